import numpy as np
import pytest

from paraformer import checkpoint
from paraformer.cli import cli_main
from paraformer.config import build, dump_run_config, load_run_config, parse_pairs
from paraformer.errors import ConfigError

TINY = ["n_branches=3", "layers_per_branch=1", "width=8", "heads=2", "ffn_width=16",
        "patch_size=2", "image_height=4", "image_width=4", "channels=1", "n_classes=3",
        "epochs=2", "batch_size=8", "synth_train=24", "synth_test=12"]


def sets(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


class TestConfig:
    def test_parse_comments_and_blanks(self):
        pairs = parse_pairs(["# header", "", "width = 16  # inline", "schedule=joint"])
        assert pairs == {"width": "16", "schedule": "joint"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="widht"):
            parse_pairs(["widht = 3"])

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_pairs(["width 3"])

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            build({"width": "wide"})

    def test_types_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("width = 16\nheads = 2\nmilestones = 1,2,2\nepochs = 4\nschedule = milestone\n"
                        "standardize = yes\nshuffle_seed = 5\n")
        cfg = load_run_config(path, ["width=32"])
        assert cfg.model.width == 32 and cfg.train.milestones == (1, 2, 2)
        assert cfg.data.standardize is True and cfg.train.seed == 5

    def test_dump_round_trip(self):
        cfg = build(parse_pairs(TINY + ["milestones=1,1,2"]))
        again = build(parse_pairs(dump_run_config(cfg).splitlines()))
        assert again == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.cfg")


def test_verify_closedform_ok(capsys):
    assert cli_main(["verify-closedform", "--seed", "0", "--tokens", "2", "--width", "4",
                     "--heads", "2"]) == 0
    assert "pass=True" in capsys.readouterr().out


def test_verify_closedform_failure_exit_code():
    # a negative tolerance can never be met
    assert cli_main(["verify-closedform", "--tol", "-1"]) == 3


def test_verify_closedform_too_big():
    assert cli_main(["verify-closedform", "--tokens", "100", "--width", "100"]) == 1


def test_unknown_subcommand():
    assert cli_main(["frobnicate"]) == 1


def test_unknown_config_key():
    assert cli_main(["train", "--set", "bogus=1"]) == 1


def test_train_missing_dataset(tmp_path):
    code = cli_main(["train", "--set", "dataset=idx", "--set", f"data_dir={tmp_path / 'nope'}",
                     "--out-dir", str(tmp_path / "run")])
    assert code == 2


def test_compress_keep_zero(tmp_path):
    assert cli_main(["compress", "--checkpoint", str(tmp_path / "x.pfck"), "--keep", "0",
                     "--out", str(tmp_path / "y.pfck")]) == 1


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pfck"
    bad.write_bytes(b"PFCK" + b"\0" * 20)
    assert cli_main(["compress", "--checkpoint", str(bad), "--keep", "1",
                     "--out", str(tmp_path / "y.pfck")]) == 2


def test_end_to_end(tmp_path, capsys):
    run = tmp_path / "run"
    assert cli_main(["train", *sets(TINY), "--out-dir", str(run)]) == 0
    ckpt = run / "model.pfck"
    assert ckpt.is_file() and (run / "metrics.csv").is_file() and (run / "run.cfg").is_file()
    lines = (run / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3 * 2

    assert cli_main(["eval", "--config", str(run / "run.cfg"), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "eval.csv")]) == 0

    small = tmp_path / "small.pfck"
    assert cli_main(["compress", "--checkpoint", str(ckpt), "--keep", "2",
                     "--out", str(small)]) == 0
    assert checkpoint.load(small).n_branches == 2
    assert cli_main(["compress", "--checkpoint", str(ckpt), "--keep", "4",
                     "--out", str(small)]) == 1

    grown = tmp_path / "grown.pfck"
    assert cli_main(["expand", "--config", str(run / "run.cfg"), "--checkpoint", str(ckpt),
                     "--out", str(grown), "--freeze", "--epochs", "1",
                     "--set", "synth_seed=4"]) == 0
    before, after = checkpoint.load(ckpt), checkpoint.load(grown)
    assert after.n_branches == 4 and after.frozen == set(before.named_parameters())
    for name, arr in before.named_parameters().items():
        assert arr.tobytes() == after.named_parameters()[name].tobytes()
    assert "acc_before" in capsys.readouterr().out

    feats = tmp_path / "f.csv"
    assert cli_main(["export-features", "--config", str(run / "run.cfg"), "--checkpoint",
                     str(ckpt), "--out", str(feats)]) == 0
    assert len(feats.read_text().splitlines()) == 1 + 12 * 3

    bench = tmp_path / "bench.csv"
    assert cli_main(["bench", *sets(TINY), "--checkpoint", str(ckpt), "--workers", "1,2",
                     "--samples", "16", "--batch-size", "8", "--out", str(bench)]) == 0
    assert len(bench.read_text().splitlines()) == 1 + 3


def test_train_modes_write_metrics(tmp_path):
    for mode, extra in [("joint", []), ("milestone", ["milestones=1,1,2"])]:
        out = tmp_path / mode
        assert cli_main(["train", *sets(TINY + extra), "--mode", mode, "--out-dir", str(out)]) == 0
        assert np.isfinite(checkpoint.load(out / "model.pfck").agg.bias).all()


def test_bench_bad_workers(tmp_path):
    assert cli_main(["bench", *sets(TINY), "--workers", "a,b"]) == 1


@pytest.mark.parametrize("name", ["synthetic.cfg", "fashion.cfg"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert cfg.train.schedule == "progressive"
