from pathlib import Path

import pytest

from kfatt.config import (
    ConfigError,
    default_tree,
    example_yaml,
    load_config,
    tree_digest,
)
from kfatt.datagen import GenConfig
from kfatt.model import ModelConfig


def write(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text, encoding="utf-8")
    return p


class TestPrecedence:
    def test_defaults_when_file_is_empty(self, tmp_path):
        cfg = load_config(write(tmp_path, ""), env={})
        assert cfg.train.lr == pytest.approx(3e-3)
        assert cfg.model.kernel == "kfatt_freq"

    def test_file_beats_defaults(self, tmp_path):
        cfg = load_config(write(tmp_path, "train:\n  lr: 0.01\n"), env={})
        assert cfg.train.lr == pytest.approx(0.01)

    def test_env_beats_file(self, tmp_path):
        cfg = load_config(write(tmp_path, "train:\n  lr: 0.01\n"),
                          env={"KFATT_TRAIN__LR": "0.02"})
        assert cfg.train.lr == pytest.approx(0.02)

    def test_set_beats_env(self, tmp_path):
        cfg = load_config(write(tmp_path, "train:\n  lr: 0.01\n"),
                          overrides=("train.lr=0.03",),
                          env={"KFATT_TRAIN__LR": "0.02"})
        assert cfg.train.lr == pytest.approx(0.03)

    def test_unprefixed_env_ignored(self, tmp_path):
        cfg = load_config(write(tmp_path, ""), env={"TRAIN__LR": "9.0"})
        assert cfg.train.lr == pytest.approx(3e-3)


class TestDigest:
    def test_same_effective_tree_same_digest(self, tmp_path):
        a = load_config(write(tmp_path, "model:\n  kernel: vanilla\n"), env={})
        b = load_config(write(tmp_path, ""),
                        overrides=("model.kernel=vanilla",), env={})
        c = load_config(write(tmp_path, ""),
                        env={"KFATT_MODEL__KERNEL": "vanilla"})
        assert a.digest == b.digest == c.digest

    def test_different_value_different_digest(self, tmp_path):
        a = load_config(write(tmp_path, ""), env={})
        b = load_config(write(tmp_path, ""), overrides=("seed=1",), env={})
        assert a.digest != b.digest

    def test_digest_is_canonical_tree_hash(self, tmp_path):
        cfg = load_config(write(tmp_path, ""), env={})
        assert cfg.digest == tree_digest(default_tree())


class TestValidation:
    def test_unknown_section_named(self, tmp_path):
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(write(tmp_path, "optimizer:\n  kind: adam\n"), env={})

    def test_unknown_key_named(self, tmp_path):
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(write(tmp_path, "train:\n  learning_rate: 0.1\n"), env={})

    def test_bad_values_aggregated_across_sections(self, tmp_path):
        text = ("datagen:\n  behaviors_min: 9\n  behaviors_max: 2\n"
                "train:\n  epochs: 0\n")
        with pytest.raises(ConfigError) as err:
            load_config(write(tmp_path, text), env={})
        fields = "; ".join(err.value.fields)
        assert "datagen" in fields and "train" in fields

    def test_unknown_override_path_named(self, tmp_path):
        with pytest.raises(ConfigError, match="model.decay"):
            load_config(write(tmp_path, ""), overrides=("model.decay=1",), env={})

    def test_malformed_override_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="key=value"):
            load_config(write(tmp_path, ""), overrides=("train.lr",), env={})

    def test_seed_must_be_integer(self, tmp_path):
        with pytest.raises(ConfigError, match="seed"):
            load_config(write(tmp_path, "seed: fast\n"), env={})
        with pytest.raises(ConfigError, match="seed"):
            load_config(write(tmp_path, "seed: true\n"), env={})

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.yaml", env={})

    def test_non_mapping_root_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="mapping"):
            load_config(write(tmp_path, "- 1\n- 2\n"), env={})

    def test_scalar_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="must be a mapping"):
            load_config(write(tmp_path, "train: fast\n"), env={})


class TestTreeShape:
    def test_sections_are_typed(self, tmp_path):
        cfg = load_config(write(tmp_path, ""), env={})
        assert isinstance(cfg.datagen, GenConfig)
        assert isinstance(cfg.model, ModelConfig)
        # vocab sizes come from the dataset sidecar, never from config
        assert cfg.model.n_queries == 0 and cfg.model.n_items == 0

    def test_example_yaml_round_trips(self, tmp_path):
        cfg = load_config(write(tmp_path, example_yaml()), env={})
        assert cfg.digest == tree_digest(default_tree())

    def test_repo_example_config_loads(self, tmp_path):
        repo_example = Path(__file__).resolve().parent.parent / "config.example.yaml"
        cfg = load_config(repo_example, env={})
        assert cfg.datagen.n_users == 5000
        assert cfg.datagen.n_categories == 40
        assert cfg.datagen.new_query_prob == pytest.approx(0.3)
        assert cfg.datagen.skew_exponent == pytest.approx(1.2)
