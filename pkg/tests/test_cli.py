from pathlib import Path

import pytest
from click.testing import CliRunner

from kfatt.cli import main

SMALL_CONFIG = """\
seed: 0
datagen:
  seed: 5
  n_users: 40
  n_categories: 8
  items_per_category: 20
  behaviors_min: 6
  behaviors_max: 12
model:
  kernel: kfatt_base
  d_model: 4
  n_heads: 2
  d_k: 3
  d_v: 3
  ctr_hidden: 5
train:
  epochs: 1
  batch_size: 16
"""


@pytest.fixture()
def runner():
    return CliRunner()


def setup_config(text=SMALL_CONFIG):
    Path("run.yaml").write_text(text, encoding="utf-8")
    return ["--config", "run.yaml"]


class TestPipeline:
    def test_generate_train_evaluate(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            res = runner.invoke(main, ["generate", *args])
            assert res.exit_code == 0, res.output + res.stderr
            assert "wrote" in res.output and "train" in res.output
            assert Path("artifacts/dataset.tsv").exists()

            res = runner.invoke(main, ["train", *args])
            assert res.exit_code == 0, res.output + res.stderr
            assert "epoch 0: loss" in res.output
            assert Path("artifacts/model.ckpt").exists()
            assert Path("artifacts/train_loss.tsv").read_text().startswith(
                "# config_digest=")

            res = runner.invoke(main, ["evaluate", *args])
            assert res.exit_code == 0, res.output + res.stderr
            text = Path("artifacts/metrics.tsv").read_text(encoding="utf-8")
            assert text.startswith("# config_digest=")
            for subset in ("All", "New", "Infreq"):
                assert f"\t{subset}\t" in text

    def test_evaluate_is_deterministic(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            for cmd in ("generate", "train", "evaluate"):
                assert runner.invoke(main, [cmd, *args]).exit_code == 0
            first = Path("artifacts/metrics.tsv").read_bytes()
            assert runner.invoke(main, ["evaluate", *args]).exit_code == 0
            assert Path("artifacts/metrics.tsv").read_bytes() == first

    def test_full_rerun_is_byte_identical(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            artifacts = ["artifacts/dataset.tsv", "artifacts/model.ckpt",
                         "artifacts/metrics.tsv"]
            for cmd in ("generate", "train", "evaluate"):
                assert runner.invoke(main, [cmd, *args]).exit_code == 0
            first = [Path(p).read_bytes() for p in artifacts]
            for cmd in ("generate", "train", "evaluate"):
                assert runner.invoke(main, [cmd, *args]).exit_code == 0
            second = [Path(p).read_bytes() for p in artifacts]
            assert first == second


class TestDigestGuard:
    def test_mismatched_dataset_refused(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            assert runner.invoke(main, ["generate", *args]).exit_code == 0
            res = runner.invoke(main, ["train", *args, "--set", "train.lr=0.004"])
            assert res.exit_code == 1
            assert "produced under config digest" in res.stderr
            assert "--force" in res.stderr

    def test_force_overrides_guard(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            assert runner.invoke(main, ["generate", *args]).exit_code == 0
            res = runner.invoke(
                main, ["train", *args, "--set", "train.lr=0.004", "--force"])
            assert res.exit_code == 0, res.output + res.stderr
            assert "warning" in res.stderr and "forced" in res.stderr


class TestConfigErrors:
    def test_bad_kernel_exits_two(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            res = runner.invoke(main, ["generate", *args,
                                       "--set", "model.kernel=bogus"])
            assert res.exit_code == 2
            assert "config error:" in res.stderr
            assert "kernel" in res.stderr

    def test_missing_config_exits_two(self, runner):
        with runner.isolated_filesystem():
            res = runner.invoke(main, ["generate", "--config", "nope.yaml"])
            assert res.exit_code == 2
            assert "config error:" in res.stderr


class TestVerify:
    def test_certification_reports_zero_failures(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            res = runner.invoke(main, ["verify", *args])
            assert res.exit_code == 0, res.output + res.stderr
            assert "0 failures across" in res.output
            assert "base" in res.output and "freq" in res.output


class TestBench:
    def test_bench_table_shape(self, runner):
        with runner.isolated_filesystem():
            args = setup_config()
            res = runner.invoke(main, ["bench", *args])
            assert res.exit_code == 0, res.output + res.stderr
            lines = Path("artifacts/bench.tsv").read_text().splitlines()
            assert lines[0].startswith("# config_digest=")
            assert lines[1] == "kernel\tlength\tp50_us\tp99_us\tmacs\tencoder_macs"
            body = [ln.split("\t") for ln in lines[2:]]
            # one session-restricted row and one full-attention row per length
            assert len(body) == 8
            assert {r[0] for r in body} == {"kfatt_base", "full_attention"}
            for r in body:
                assert float(r[3]) >= float(r[2])
                assert int(r[4]) >= int(r[5]) > 0
