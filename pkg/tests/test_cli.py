import csv

import pytest

from emstdp.cli import EXIT_CODES, build_parser, main


@pytest.fixture
def base(tiny_idx, tmp_path):
    args = ["--structure", "8x8x1-16d-4d", "--threshold-scale", "8,4", "--n-train", "0", "--n-test", "0",
            "--epochs", "1"]
    for k, v in tiny_idx.items():
        args += ["--" + k.replace("_", "-"), v]
    return args


def rows(path):
    with open(path) as f:
        return [r for r in csv.reader(line for line in f if not line.startswith("#"))]


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    assert "--feedback-mode" in text and "default: DFA" in text


def test_train_then_eval(base, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *base, "--out-dir", str(out)]) == 0
    for name in ("config.txt", "metrics.csv", "timing.csv", "model.ckpt"):
        assert (out / name).exists()
    assert (out / "metrics.csv").read_text().startswith("# emstdp metrics format 1")
    assert main(["eval", *base, "--out-dir", str(out), "--checkpoint", str(out / "model.ckpt")]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert len(rows(out / "eval.csv")) == 2


def test_training_is_byte_reproducible(base, tmp_path):
    for d in ("a", "b"):
        assert main(["train", *base, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("model.ckpt", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_epochs_writes_initial_checkpoint(base, tmp_path):
    out = tmp_path / "z"
    assert main(["train", *base, "--epochs", "0", "--out-dir", str(out)]) == 0
    assert (out / "model.ckpt").exists()


def test_config_file_and_flag_precedence(base, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("feedback_mode = FA\nepochs = 3\n")
    out = tmp_path / "c"
    assert main(["train", "--config", str(cfg), *base, "--out-dir", str(out)]) == 0
    text = (out / "config.txt").read_text()
    assert "feedback_mode = FA" in text and "epochs = 1" in text


def test_map_and_sweep(base, tmp_path):
    out = tmp_path / "m"
    assert main(["map", *base, "--out-dir", str(out)]) == 0
    assert len(rows(out / "coremap.csv")) > 1
    assert main(["sweep", *base, "--out-dir", str(out), "--l-m-list", "1,2,4"]) == 0
    body = rows(out / "sweep.csv")[1:]
    assert len(body) == 6


def test_incremental_with_baseline(base, tmp_path):
    out = tmp_path / "inc"
    rc = main(["incremental", *base, "--initial-classes", "0,1", "--increments", "2,3", "--chunks", "2",
               "--out-dir", str(out), "--baseline"])
    assert rc == 0
    assert (out / "incremental.csv").read_text().startswith("# emstdp incremental format 1")
    assert len(rows(out / "incremental.csv")) == 1 + 2 * 2
    assert (out / "baseline.csv").exists()


def test_oracle_train_and_eval(base, tmp_path):
    out = tmp_path / "o"
    assert main(["oracle-train", *base, "--out-dir", str(out)]) == 0
    assert main(["oracle-eval", *base, "--out-dir", str(out), "--checkpoint", str(out / "oracle.ckpt"),
                 "--activation", "floor"]) == 0
    assert (out / "oracle_eval.csv").exists()


def test_exit_codes(base, tmp_path, capsys):
    out = str(tmp_path / "e")
    assert main(["train", "--out-dir", out, "--train-images", str(tmp_path / "missing")]) == EXIT_CODES["dataset"]
    assert main(["train", *base, "--eta", "1/3", "--out-dir", out]) == EXIT_CODES["config"]
    assert main(["train", *base, "--structure", "8x8x1-99999d-4d", "--out-dir", out]) == EXIT_CODES["mapping"]
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", *base, "--checkpoint", str(bad), "--out-dir", out]) == EXIT_CODES["checkpoint"]
    assert "error[checkpoint]" in capsys.readouterr().err
