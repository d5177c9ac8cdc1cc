import json

import numpy as np
import pytest

from butdlearn.cli import main
from butdlearn.data import load_mm36


def run_cli(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def data_dir(digits_idx_dir, tmp_path_factory):
    """Prepared mm36 caches built through the CLI itself."""
    out = tmp_path_factory.mktemp("caches")
    code = run_cli("make-data", "--data", str(digits_idx_dir), "--out", str(out),
                   "--seed", "3", "--n-train", "512", "--n-test", "128")
    assert code == 0
    return out


TRAIN_ARGS = ["--epochs", "2", "--batch-size", "32", "--channels", "4",
              "--hidden", "16", "--n-train", "192", "--n-test", "64",
              "--eval-every", "1", "--lr", "1e-3"]


class TestMakeData:
    def test_writes_caches(self, data_dir):
        train = load_mm36(data_dir / "train.mm36")
        test = load_mm36(data_dir / "test.mm36")
        assert len(train) == 512 and len(test) == 128
        assert train.images.shape[2:] == (36, 36)

    def test_missing_source_dir_exits_2(self, tmp_path, capsys):
        code = run_cli("make-data", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path))
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_train_writes_metrics_and_checkpoint(self, data_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--data", str(data_dir), "--out", str(out),
                       *TRAIN_ARGS)
        assert code == 0
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        records = [json.loads(l) for l in lines]
        assert [r["epoch"] for r in records] == [1, 2]
        assert records[-1]["avg_test_acc"] is not None
        assert records[-1]["avg_test_acc"] == pytest.approx(
            np.mean(records[-1]["test_acc"]))
        assert (out / "final.ckpt").exists()

    def test_same_seed_identical_metrics(self, data_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("train", "--data", str(data_dir), "--out", str(out),
                           "--seed", "7", *TRAIN_ARGS) == 0
            records = [json.loads(l) for l in
                       (out / "metrics.jsonl").read_text().splitlines()]
            for r in records:
                r.pop("seconds")
            outs.append(records)
        assert outs[0] == outs[1]

    def test_eval_matches_train_final_metrics(self, data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("train", "--data", str(data_dir), "--out", str(out),
                       *TRAIN_ARGS) == 0
        records = [json.loads(l) for l in
                   (out / "metrics.jsonl").read_text().splitlines()]
        capsys.readouterr()
        code = run_cli("eval", "--checkpoint", str(out / "final.ckpt"),
                       "--data", str(data_dir), *TRAIN_ARGS)
        assert code == 0
        result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert result["test_acc"] == records[-1]["test_acc"]
        assert result["avg_test_acc"] == records[-1]["avg_test_acc"]

    def test_repetitions_run_per_seed(self, data_dir, tmp_path, capsys):
        out = tmp_path / "reps"
        code = run_cli("train", "--data", str(data_dir), "--out", str(out),
                       *TRAIN_ARGS, "--epochs", "1", "--repetitions", "2")
        assert code == 0
        assert (out / "rep0" / "final.ckpt").exists()
        assert (out / "rep1" / "metrics.jsonl").exists()
        assert "mean avg test accuracy over 2 repetitions" in capsys.readouterr().out
        # different seeds: the two runs differ
        a = (out / "rep0" / "final.ckpt").read_bytes()
        b = (out / "rep1" / "final.ckpt").read_bytes()
        assert a != b

    def test_missing_data_exits_2(self, tmp_path):
        assert run_cli("train", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "o"), *TRAIN_ARGS) == 2

    def test_bad_checkpoint_exits_2(self, data_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE")
        assert run_cli("eval", "--checkpoint", str(bad),
                       "--data", str(data_dir)) == 2

    def test_diverging_run_exits_4(self, data_dir, tmp_path, capsys):
        # sgd at an absurd rate overflows the forward pass within an epoch
        with np.errstate(over="ignore", invalid="ignore"):
            code = run_cli("train", "--data", str(data_dir),
                           "--out", str(tmp_path / "o"), *TRAIN_ARGS,
                           "--optimizer", "sgd", "--lr", "1e200")
        assert code == 4
        assert "non-finite" in capsys.readouterr().err


class TestConfigHandling:
    def test_config_file_with_flag_override(self, data_dir, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(
            "epochs = 1\nbatch_size = 32\nchannels = 4\nhidden = 16\n"
            "n_train = 96\nn_test = 32\neval_every = 1\n")
        out = tmp_path / "out"
        code = run_cli("train", "--config", str(cfgfile), "--data", str(data_dir),
                       "--out", str(out), "--epochs", "2")
        assert code == 0
        records = [json.loads(l) for l in
                   (out / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 2  # flag overrode the file's epochs = 1

    def test_unknown_config_key_exits_1(self, data_dir, tmp_path):
        cfgfile = tmp_path / "bad.cfg"
        cfgfile.write_text("dropout = 0.5\n")
        assert run_cli("train", "--config", str(cfgfile),
                       "--data", str(data_dir)) == 1

    def test_unknown_flag_exits_1(self):
        assert run_cli("train", "--does-not-exist", "1") == 1

    def test_bad_mode_exits_1(self, data_dir):
        assert run_cli("train", "--data", str(data_dir), "--mode", "zz") == 1

    def test_help_exits_0(self, capsys):
        assert run_cli("--help") == 0
        assert "train" in capsys.readouterr().out


class TestChecks:
    def test_grad_check_passes(self, capsys):
        code = run_cli("grad-check", "--trials", "10", "--seed", "1")
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("PASS") >= 4 and "FAIL" not in out

    def test_align_check_writes_csv_and_passes(self, tmp_path, capsys):
        out = tmp_path / "align"
        code = run_cli("align-check", "--out", str(out), "--steps", "150",
                       "--lr", "0.01", "--kp-lambda", "1.0")
        assert code == 0
        lines = (out / "align.csv").read_text().splitlines()
        assert len(lines) == 151  # header + steps
        assert lines[0].startswith("step,")
        assert "PASS" in capsys.readouterr().out

    def test_align_check_lambda_zero(self, tmp_path):
        assert run_cli("align-check", "--out", str(tmp_path), "--steps", "80",
                       "--kp-lambda", "0.0") == 0


class TestSingleTaskModes:
    @pytest.mark.parametrize("mode", ["single_task", "fa", "dfa", "kolen_pollack"])
    def test_modes_run_end_to_end(self, mode, data_dir, tmp_path):
        out = tmp_path / mode
        code = run_cli("train", "--data", str(data_dir), "--out", str(out),
                       "--mode", mode, "--epochs", "1", "--batch-size", "32",
                       "--channels", "4", "--hidden", "16", "--n-train", "96",
                       "--n-test", "32", "--eval-every", "1")
        assert code == 0
        records = [json.loads(l) for l in
                   (out / "metrics.jsonl").read_text().splitlines()]
        assert len(records[-1]["test_acc"]) == 1
