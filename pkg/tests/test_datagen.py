import numpy as np
import pytest

from kfatt.datagen import (
    GenConfig,
    Row,
    build_world,
    cheating_scores,
    generate,
    instances_from_rows,
    read_dataset,
    tag_subsets,
    write_dataset,
)
from kfatt.evalbench import auc
from kfatt.numerics import Rng


def small_cfg(**kw):
    base = dict(seed=11, n_users=120, n_categories=10, items_per_category=30,
                behaviors_min=6, behaviors_max=12)
    base.update(kw)
    return GenConfig(**base)


class TestConfigValidation:
    def test_bad_fields_listed_together(self):
        with pytest.raises(ValueError) as err:
            GenConfig(behaviors_min=9, behaviors_max=3, new_query_prob=1.5)
        msg = str(err.value)
        assert "behaviors_min" in msg and "new_query_prob" in msg

    def test_negative_ratio_needs_item_headroom(self):
        with pytest.raises(ValueError, match="items_per_category"):
            small_cfg(items_per_category=3, test_neg_ratio=3)

    def test_new_queries_need_spare_categories(self):
        with pytest.raises(ValueError, match="spare categories"):
            small_cfg(categories_per_user=10, new_query_prob=0.3)

    def test_vocab_sizes(self):
        cfg = small_cfg()
        assert cfg.n_queries == cfg.n_categories * cfg.queries_per_category
        assert cfg.n_items == cfg.n_categories * cfg.items_per_category


class TestWorld:
    def test_frequency_weights_normalized_and_positive(self):
        world = build_world(small_cfg())
        assert (world.freq_weights > 0).all()
        assert world.freq_weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_every_query_and_item_has_one_category(self):
        cfg = small_cfg()
        world = build_world(cfg)
        for cat in range(cfg.n_categories):
            assert [world.query_category(q) for q in world.category_queries(cat)] \
                == [cat] * cfg.queries_per_category
            assert {world.item_category(i) for i in world.category_items(cat)} == {cat}

    def test_personal_centroid_independent_of_access_order(self):
        cfg = small_cfg()
        a, b = build_world(cfg), build_world(cfg)
        np.testing.assert_array_equal(a.personal_centroid(3, 2),
                                      b.personal_centroid(3, 2))
        b.personal_centroid(7, 1)  # unrelated access first
        np.testing.assert_array_equal(a.personal_centroid(7, 1),
                                      b.personal_centroid(7, 1))

    def test_zero_noise_click_is_nearest_item(self):
        cfg = small_cfg(click_noise=0.0)
        world = build_world(cfg)
        rng = Rng(0)
        item = world.sample_click(5, 2, rng)
        target = world.personal_centroid(5, 2)
        items = world.category_items(2)
        d = np.linalg.norm(world.item_vecs[items] - target, axis=1)
        assert item == items[np.argmin(d)]


class TestGenerate:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        cfg = small_cfg()
        rows1, _ = generate(cfg)
        rows2, _ = generate(cfg)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_dataset(p1, rows1, cfg, "digest")
        write_dataset(p2, rows2, cfg, "digest")
        assert p1.read_bytes() == p2.read_bytes()

    def test_new_query_prob_one_tags_everything_new(self):
        rows, _ = generate(small_cfg(new_query_prob=1.0))
        test_rows = [r for r in rows if r.split == "test"]
        assert test_rows
        assert all("New" in r.tag for r in test_rows)

    def test_zero_skew_gives_uniform_categories(self):
        # all-affinity users, no bursts, no new-query holdout: every
        # history event category is an iid uniform draw
        cfg = GenConfig(seed=13, n_users=800, n_categories=8,
                        categories_per_user=8, new_query_prob=0.0,
                        skew_exponent=0.0, repeat_burst_prob=0.0,
                        explore_prob=0.0, items_per_category=30)
        rows, _ = generate(cfg)
        cats = np.array([r.query_id // cfg.queries_per_category
                         for r in rows if r.split != "test" and r.label == 1])
        n = len(cats)
        assert n >= 10_000
        p = 1.0 / cfg.n_categories
        sigma = np.sqrt(n * p * (1 - p))
        counts = np.bincount(cats, minlength=cfg.n_categories)
        assert np.abs(counts - n * p).max() <= 3 * sigma

    def test_one_test_impression_per_user(self):
        cfg = small_cfg()
        rows, _ = generate(cfg)
        test_rows = [r for r in rows if r.split == "test"]
        per_user: dict[int, list[Row]] = {}
        for r in test_rows:
            per_user.setdefault(r.user_id, []).append(r)
        assert len(per_user) == cfg.n_users
        for urows in per_user.values():
            assert len(urows) == 1 + cfg.test_neg_ratio
            assert sum(r.label for r in urows) == 1
            assert len({r.query_id for r in urows}) == 1
            assert len({r.tag for r in urows}) == 1
            assert len({r.timestamp for r in urows}) == 1

    def test_negatives_come_from_query_category_unclicked(self):
        cfg = small_cfg()
        rows, world = generate(cfg)
        clicked: dict[int, set[int]] = {}
        for r in rows:
            if r.label == 1:
                clicked.setdefault(r.user_id, set()).add(r.item_id)
        for r in rows:
            if r.label == 0:
                cat = r.query_id // cfg.queries_per_category
                assert world.item_category(r.item_id) == cat
                assert r.item_id not in clicked[r.user_id]

    def test_timestamps_nondecreasing_per_user(self):
        rows, _ = generate(small_cfg())
        last: dict[int, float] = {}
        for r in rows:
            assert last.get(r.user_id, -1.0) <= r.timestamp
            last[r.user_id] = r.timestamp


class TestTagRules:
    def cfg(self):
        return small_cfg(n_categories=4, queries_per_category=1,
                         categories_per_user=2)

    def test_unseen_category_is_new(self):
        cfg = self.cfg()
        rows = [Row(0, 0.0, 0, 1, 1, "history"),
                Row(0, 50.0, 1, 31, 1, "test")]
        tagged = tag_subsets(rows, cfg)
        assert "New" in tagged[1].tag
        assert tagged[0].tag == "-"

    def test_seen_category_not_new(self):
        cfg = self.cfg()
        rows = [Row(0, 0.0, 1, 31, 1, "history"),
                Row(0, 50.0, 1, 32, 1, "test")]
        tagged = tag_subsets(rows, cfg)
        assert "New" not in tagged[1].tag

    def test_max_count_category_never_infreq(self):
        cfg = self.cfg()
        rows = [Row(u, float(u), 0, 1, 1, "train") for u in range(6)]
        rows += [Row(9, 0.0, c, 30 * c + 1, 1, "train") for c in (1, 2)]
        rows.append(Row(7, 99.0, 0, 2, 1, "test"))
        tagged = tag_subsets(rows, cfg)
        assert "Infreq" not in tagged[-1].tag

    def test_zero_quantile_empties_infreq(self):
        cfg = small_cfg(infreq_quantile=0.0)
        rows, _ = generate(cfg)
        retagged = tag_subsets([Row(r.user_id, r.timestamp, r.query_id,
                                    r.item_id, r.label, r.split)
                                for r in rows], cfg)
        assert all("Infreq" not in r.tag for r in retagged if r.split == "test")

    def test_infreq_threshold_is_train_click_quantile(self):
        cfg = small_cfg()
        rows, _ = generate(cfg)
        counts = np.zeros(cfg.n_categories, dtype=np.int64)
        for r in rows:
            if r.split != "test" and r.label == 1:
                counts[r.query_id // cfg.queries_per_category] += 1
        threshold = np.quantile(counts, cfg.infreq_quantile)
        for r in rows:
            if r.split == "test":
                cat = r.query_id // cfg.queries_per_category
                assert ("Infreq" in r.tag) == (counts[cat] < threshold)


class TestGroundTruthPredictors:
    def test_zero_noise_personal_predictor_is_perfect(self):
        cfg = small_cfg(click_noise=0.0)
        rows, world = generate(cfg)
        _, test = instances_from_rows(rows)
        labels = np.array([i.label for i in test])
        scores = cheating_scores(world, test, "personal")
        assert auc(scores, labels) == 1.0

    def test_new_instances_unlearnable_from_history_alone(self):
        cfg = small_cfg(click_noise=0.0, n_users=400)
        rows, world = generate(cfg)
        _, test = instances_from_rows(rows)
        new = [i for i in test if "New" in i.tag]
        assert len(new) >= 100
        labels = np.array([i.label for i in new])
        hist = auc(cheating_scores(world, new, "history"), labels)
        pop = auc(cheating_scores(world, new, "population"), labels)
        assert 0.45 <= hist <= 0.55
        assert pop > 0.9

    def test_unknown_predictor_rejected(self):
        cfg = small_cfg()
        rows, world = generate(cfg)
        _, test = instances_from_rows(rows)
        with pytest.raises(ValueError, match="cheating predictor"):
            cheating_scores(world, test[:1], "oracle")


class TestInstances:
    def test_history_strictly_precedes_scored_row(self):
        rows, _ = generate(small_cfg())
        train, test = instances_from_rows(rows)
        for inst in train + test:
            ts = [e[0] for e in inst.events]
            assert ts == sorted(ts)

    def test_scored_rows_have_context(self):
        rows, _ = generate(small_cfg())
        train, test = instances_from_rows(rows)
        assert all(len(i.events) >= 1 for i in train)
        assert all(len(i.events) >= 1 for i in test)

    def test_test_count_matches_protocol(self):
        cfg = small_cfg()
        rows, _ = generate(cfg)
        _, test = instances_from_rows(rows)
        assert len(test) == cfg.n_users * (1 + cfg.test_neg_ratio)


class TestDatasetFiles:
    def test_roundtrip(self, tmp_path):
        cfg = small_cfg()
        rows, _ = generate(cfg)
        path = tmp_path / "data.tsv"
        write_dataset(path, rows, cfg, "cfg-digest")
        loaded, meta = read_dataset(path)
        assert loaded == rows
        assert meta["config_digest"] == "cfg-digest"
        assert meta["n_rows"] == len(rows)
        assert meta["n_queries"] == cfg.n_queries
        assert meta["n_items"] == cfg.n_items

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("1\t2.0\t3\n")
        with pytest.raises(ValueError, match="1: expected 7"):
            read_dataset(path)

    def test_unknown_split_rejected(self, tmp_path):
        cfg = small_cfg()
        rows, _ = generate(cfg)
        path = tmp_path / "data.tsv"
        write_dataset(path, rows, cfg, "")
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace("\thistory\t", "\tvalidation\t")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="unknown split"):
            read_dataset(path)
