"""Synthetic behavior logs with a known ground-truth interest process.

The world has categories with heavy-tailed (Zipf) inherent frequencies,
a latent centroid per category, and per-(user, category) personal
centroids offset from it. Users click the item nearest their personal
centroid (up to a noise temperature), so the dataset is learnable by
construction, and two failure modes are planted deliberately:

  new demand    with some probability a user's final click lands in a
                category absent from their whole history, so the history
                carries no signal and only population knowledge helps;
  frequency     affinity categories are drawn by the skewed weights, so
  skew          a frequent category's query dominates histories by sheer
                repetition, rewarding models that cap it.

Scored rows come in impressions: one query, the clicked positive, and
negatives sampled from the other items of the query's category that the
user never clicked. All rows of an impression share the query id, so the
subset tag (New / Infreq, judged from the query against that user's
history) is an impression-level property. Records are TSV lines
(user_id, timestamp_minutes, query_id, item_id, label, split,
subset_tag) plus a JSON sidecar with vocabulary sizes and the generating
config digest. split is one of: history (clicked context event, never
scored), train (scored training instance), test (scored held-out
instance, the user's last event plus its sampled negatives). Clicked
rows (label 1, split != test) of a user form the history of every later
instance of that user. A real click log would map onto the same record
shape: one row per impression with label and timestamp.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import CtrInstance
from .numerics import Rng

__all__ = [
    "GenConfig",
    "World",
    "Row",
    "build_world",
    "generate",
    "tag_subsets",
    "write_dataset",
    "read_dataset",
    "instances_from_rows",
    "cheating_scores",
]

SPLITS = ("history", "train", "test")
# Substream namespaces under the root seed, so per-entity draws do not
# depend on generation order.
_NS_WORLD, _NS_USER, _NS_PERSONAL, _NS_NEG = 0, 1, 2, 3


@dataclass(frozen=True)
class GenConfig:
    seed: int = 7
    n_users: int = 5000
    n_categories: int = 40
    queries_per_category: int = 2
    items_per_category: int = 150
    latent_dim: int = 8
    behaviors_min: int = 8
    behaviors_max: int = 20
    categories_per_user: int = 3
    new_query_prob: float = 0.3
    skew_exponent: float = 1.2
    personal_offset: float = 0.35
    click_noise: float = 0.35
    explore_prob: float = 0.15
    repeat_burst_prob: float = 0.5
    burst_len_min: int = 6
    burst_len_max: int = 12
    train_positions_per_user: int = 1
    train_first_clicks: bool = True
    train_neg_ratio: int = 1
    test_neg_ratio: int = 3
    infreq_quantile: float = 0.25
    within_gap_mean: float = 5.0
    between_gap_mean: float = 240.0
    session_break_prob: float = 0.25

    def __post_init__(self):
        bad = []
        for name in ("n_users", "n_categories", "queries_per_category", "items_per_category",
                     "latent_dim", "behaviors_min", "behaviors_max", "categories_per_user",
                     "train_positions_per_user", "train_neg_ratio", "test_neg_ratio"):
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        for name in ("new_query_prob", "explore_prob", "repeat_burst_prob",
                     "session_break_prob", "infreq_quantile"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad.append(f"{name} must be in [0, 1]")
        if not 2 <= self.burst_len_min <= self.burst_len_max:
            bad.append("burst lengths need 2 <= burst_len_min <= burst_len_max")
        for name in ("personal_offset", "click_noise", "skew_exponent"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        for name in ("within_gap_mean", "between_gap_mean"):
            if getattr(self, name) <= 0:
                bad.append(f"{name} must be > 0")
        if self.behaviors_min > self.behaviors_max:
            bad.append("behaviors_min must be <= behaviors_max")
        if self.categories_per_user > self.n_categories:
            bad.append("categories_per_user must be <= n_categories")
        if self.new_query_prob > 0 and self.categories_per_user >= self.n_categories:
            bad.append("new_query_prob > 0 needs spare categories outside every user's affinity")
        if self.items_per_category <= max(self.train_neg_ratio, self.test_neg_ratio):
            bad.append("items_per_category must exceed the negative ratios "
                       "(negatives come from the query category, minus clicked items)")
        if bad:
            raise ValueError("invalid generation config: " + "; ".join(bad))

    @property
    def n_queries(self) -> int:
        return self.n_categories * self.queries_per_category

    @property
    def n_items(self) -> int:
        return self.n_categories * self.items_per_category


@dataclass(frozen=True)
class Row:
    user_id: int
    timestamp: float
    query_id: int
    item_id: int
    label: int
    split: str
    tag: str = "-"


class World:
    """Latent ground truth: centroids, item vectors, frequency weights.

    Never shown to the model; tests use it for cheating predictors and
    tagging checks. Personal centroids are drawn lazily from a stream
    keyed by (user, category), so access order cannot change them.
    """

    def __init__(self, cfg: GenConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed).split(_NS_WORLD)
        c, L = cfg.n_categories, cfg.latent_dim
        self.centroids = rng.normal(0.0, 2.5, size=(c, L))
        self.item_vecs = np.vstack([
            self.centroids[k] + rng.normal(0.0, 1.0, size=(cfg.items_per_category, L))
            for k in range(c)])
        raw = (np.arange(c) + 1.0) ** (-cfg.skew_exponent)
        self.freq_weights = raw / raw.sum()
        self._personal: dict[tuple[int, int], np.ndarray] = {}

    def query_category(self, query_id: int) -> int:
        return query_id // self.cfg.queries_per_category

    def item_category(self, item_id: int) -> int:
        return item_id // self.cfg.items_per_category

    def sample_query(self, cat: int, rng: Rng) -> int:
        """One of the category's query ids, uniformly."""
        qs = self.category_queries(cat)
        return int(qs[int(rng.integers(0, len(qs)))])

    def category_items(self, cat: int) -> np.ndarray:
        k = self.cfg.items_per_category
        return np.arange(cat * k, (cat + 1) * k)

    def category_queries(self, cat: int) -> np.ndarray:
        k = self.cfg.queries_per_category
        return np.arange(cat * k, (cat + 1) * k)

    def personal_centroid(self, user: int, cat: int) -> np.ndarray:
        key = (user, cat)
        if key not in self._personal:
            rng = Rng(self.cfg.seed).split(_NS_PERSONAL).split(user).split(cat)
            self._personal[key] = (self.centroids[cat]
                                   + self.cfg.personal_offset * rng.normal(size=self.cfg.latent_dim))
        return self._personal[key]

    def sample_click(self, user: int, cat: int, rng: Rng) -> int:
        """Item the user clicks for a query in cat: nearest item to the
        personal centroid at zero noise, otherwise distance-softmax."""
        target = self.personal_centroid(user, cat)
        items = self.category_items(cat)
        d2 = np.sum((self.item_vecs[items] - target) ** 2, axis=1)
        if self.cfg.click_noise == 0.0:
            return int(items[int(np.argmin(d2))])
        logits = -d2 / (2.0 * self.cfg.click_noise ** 2)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        return int(rng.choice(items, p=p))


def build_world(cfg: GenConfig) -> World:
    return World(cfg)


def _negatives(world: World, cat: int, reviewed: set[int], count: int, rng: Rng) -> list[int]:
    """Negatives for one impression: other items of the query's category
    the user never clicked, without replacement. A category can run dry
    when a user clicked nearly all of it; that is a config problem
    (items_per_category too small for the behavior range), not a sampling
    retry case."""
    pool = np.array([i for i in world.category_items(cat) if i not in reviewed])
    if len(pool) < count:
        raise ValueError(
            f"category {cat} has {len(pool)} unclicked items, need {count} negatives; "
            "raise items_per_category or lower the negative ratio")
    return [int(i) for i in rng.choice(pool, size=count, replace=False)]


def generate(cfg: GenConfig) -> tuple[list[Row], World]:
    """All rows for all users, already subset-tagged, in (user, time) order."""
    world = World(cfg)
    rows: list[Row] = []
    all_cats = np.arange(cfg.n_categories)
    for user in range(cfg.n_users):
        rng = Rng(cfg.seed).split(_NS_USER).split(user)
        nrng = Rng(cfg.seed).split(_NS_NEG).split(user)
        affinity = np.sort(rng.choice(all_cats, size=cfg.categories_per_user,
                                      replace=False, p=world.freq_weights))
        aff_p = world.freq_weights[affinity] / world.freq_weights[affinity].sum()
        n_events = int(rng.integers(cfg.behaviors_min, cfg.behaviors_max + 1))

        # Clicked history: affinity categories weighted by their inherent
        # frequency (a frequent category dominates the history by sheer
        # repetition), occasional exploration outside.
        t = float(rng.uniform(0.0, 60.0))
        events: list[tuple[float, int, int, int]] = []  # (ts, cat, query, item)
        for _ in range(n_events):
            if rng.uniform() < cfg.session_break_prob:
                t += 30.0 + float(rng.uniform(0, 2 * cfg.between_gap_mean))
            else:
                t += float(rng.uniform(0.5, 2 * cfg.within_gap_mean))
            if rng.uniform() < cfg.explore_prob:
                # Exploration is deliberately unweighted: it is the only
                # traffic rare categories get from most users.
                cat = int(rng.integers(0, cfg.n_categories))
            else:
                cat = int(rng.choice(affinity, p=aff_p))
            item = world.sample_click(user, cat, rng)
            events.append((round(t, 3), cat, world.sample_query(cat, rng), item))

        # A slice of users hammer one query at the end of the history and
        # keep re-opening the same result, the usual shape of a real
        # comparison-shopping session. Every repeat re-reads one noisy
        # sensor; a model that counts each click as fresh evidence lets
        # the burst drown the rest of the history.
        if rng.uniform() < cfg.repeat_burst_prob and len(events) > cfg.burst_len_min:
            k = min(int(rng.integers(cfg.burst_len_min, cfg.burst_len_max + 1)),
                    len(events) - 1)
            # Any interest area can host a deep-dive, so the burst category
            # is uniform over the user's affinities rather than weighted by
            # global popularity.
            bcat = int(rng.choice(affinity))
            bquery = world.sample_query(bcat, rng)
            pool = world.category_items(bcat)
            item = int(pool[int(rng.integers(0, len(pool)))])
            for j in range(len(events) - k, len(events)):
                events[j] = (events[j][0], bcat, bquery, item)

        # The user's last event is the held-out test positive; with the
        # configured probability its category is forced outside the whole
        # history (the new-demand case).
        hist_cats = {cat for _, cat, _, _ in events}
        t += 30.0 + float(rng.uniform(0, 2 * cfg.between_gap_mean))
        force_new = rng.uniform() < cfg.new_query_prob
        unseen = np.array([c for c in all_cats if c not in hist_cats])
        if force_new and len(unseen) > 0:
            test_cat = int(rng.choice(unseen))
        else:
            test_cat = int(rng.choice(affinity))
        test_item = world.sample_click(user, test_cat, rng)
        test_query = world.sample_query(test_cat, rng)
        test_ts = round(t, 3)
        reviewed = {item for _, _, _, item in events} | {test_item}

        # Scored training positions: the most recent clicks before the
        # test event, plus (optionally) the user's first click in each
        # category, a natural cold-start moment: the history before it
        # holds no sample of that category. Position 0 stays unscored so
        # every scored row has a nonempty history. The rest is context.
        n_train = min(cfg.train_positions_per_user, len(events))
        train_pos = set(range(len(events) - n_train, len(events)))
        if cfg.train_first_clicks:
            seen_cats: set[int] = set()
            for j, (_, cat, _, _) in enumerate(events):
                if cat not in seen_cats and j > 0:
                    train_pos.add(j)
                seen_cats.add(cat)
        for j, (ts, cat, query, item) in enumerate(events):
            split = "train" if j in train_pos else "history"
            rows.append(Row(user, ts, query, item, 1, split))
            if split == "train":
                for neg in _negatives(world, cat, reviewed, cfg.train_neg_ratio, nrng):
                    rows.append(Row(user, ts, query, neg, 0, "train"))
        rows.append(Row(user, test_ts, test_query, test_item, 1, "test"))
        for neg in _negatives(world, test_cat, reviewed, cfg.test_neg_ratio, nrng):
            rows.append(Row(user, test_ts, test_query, neg, 0, "test"))
    return tag_subsets(rows, cfg), world


def tag_subsets(rows: list[Row], cfg: GenConfig) -> list[Row]:
    """Tag each test row by its query: New if the query's category is
    absent from that user's clicked history, Infreq if the category's
    training-click count is below the configured quantile of per-category
    counts. Rows of one impression share the query, so they share the
    tag."""
    by_user_hist: dict[int, set[int]] = {}
    cat_counts = np.zeros(cfg.n_categories, dtype=np.int64)
    for r in rows:
        cat = r.query_id // cfg.queries_per_category
        if r.split != "test" and r.label == 1:
            by_user_hist.setdefault(r.user_id, set()).add(cat)
            cat_counts[cat] += 1
    threshold = float(np.quantile(cat_counts, cfg.infreq_quantile))
    tagged = []
    for r in rows:
        if r.split != "test":
            tagged.append(r)
            continue
        cat = r.query_id // cfg.queries_per_category
        new = cat not in by_user_hist.get(r.user_id, set())
        infreq = cat_counts[cat] < threshold
        tag = {(False, False): "-", (True, False): "New",
               (False, True): "Infreq", (True, True): "New+Infreq"}[(new, infreq)]
        tagged.append(Row(r.user_id, r.timestamp, r.query_id, r.item_id, r.label, r.split, tag))
    return tagged


def write_dataset(path, rows: list[Row], cfg: GenConfig, config_digest: str = "") -> None:
    """TSV records plus a .meta sidecar (vocab sizes, counts, digest)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(f"{r.user_id}\t{r.timestamp:.3f}\t{r.query_id}\t{r.item_id}\t"
                     f"{r.label}\t{r.split}\t{r.tag}\n")
    meta = {
        "n_rows": len(rows),
        "n_users": cfg.n_users,
        "n_categories": cfg.n_categories,
        "n_queries": cfg.n_queries,
        "n_items": cfg.n_items,
        "queries_per_category": cfg.queries_per_category,
        "items_per_category": cfg.items_per_category,
        "config_digest": config_digest,
        "gen_config": asdict(cfg),
    }
    with open(path.with_suffix(path.suffix + ".meta"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path) -> tuple[list[Row], dict]:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
            u, ts, q, i, y, split, tag = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append(Row(int(u), float(ts), int(q), int(i), int(y), split, tag))
    with open(path.with_suffix(path.suffix + ".meta"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return rows, meta


def instances_from_rows(rows: list[Row]) -> tuple[list[CtrInstance], list[CtrInstance]]:
    """Attach each scored row's per-user history (earlier clicked rows).

    Returns (train, test) instance lists in file order.
    """
    by_user: dict[int, list[Row]] = {}
    for r in rows:
        by_user.setdefault(r.user_id, []).append(r)
    train, test = [], []
    for user, urows in by_user.items():
        clicks = sorted((r for r in urows if r.label == 1 and r.split != "test"),
                        key=lambda r: r.timestamp)
        for r in urows:
            if r.split == "history":
                continue
            events = tuple((c.timestamp, c.query_id, c.item_id)
                           for c in clicks if c.timestamp < r.timestamp)
            inst = CtrInstance(user, r.query_id, r.item_id, r.label, events, r.tag)
            (test if r.split == "test" else train).append(inst)
    return train, test


def cheating_scores(world: World, instances: list[CtrInstance], kind: str) -> np.ndarray:
    """Ground-truth-powered predictors for dataset sanity checks.

    personal    negative distance to the item the user's zero-noise clicks
                concentrate on (the candidate category's item nearest the
                user's personal centroid); knows latent centroids even for
                categories the user never visited
    history     negative distance to the mean of the user's clicked items
                in the candidate's category; a user with no clicks there
                has no estimate, scored -inf (ranks below every candidate
                the history does cover, ties among themselves)
    population  negative distance to the candidate's category centroid,
                normalized by the best distance any item in that category
                achieves (what a global prior can know without history)
    """
    scores = np.zeros(len(instances))
    for j, inst in enumerate(instances):
        cat = world.query_category(inst.query_id)
        vec = world.item_vecs[inst.item_id]
        if kind == "personal":
            target = world.personal_centroid(inst.user_id, cat)
            items = world.category_items(cat)
            nearest = items[np.argmin(np.linalg.norm(world.item_vecs[items] - target, axis=1))]
            scores[j] = -np.linalg.norm(vec - world.item_vecs[nearest])
        elif kind == "population":
            items = world.category_items(cat)
            d = np.linalg.norm(world.item_vecs[items] - world.centroids[cat], axis=1)
            scores[j] = -(np.linalg.norm(vec - world.centroids[cat]) - d.min())
        elif kind == "history":
            clicked = [iid for _, _, iid in inst.events if world.item_category(iid) == cat]
            if not clicked:
                scores[j] = -np.inf
            else:
                mean = world.item_vecs[np.array(clicked)].mean(axis=0)
                scores[j] = -np.linalg.norm(vec - mean)
        else:
            raise ValueError(f"unknown cheating predictor {kind!r}")
    return scores
