import csv
import os
import subprocess
import sys

import pytest

from hcseg import cli
from hcseg.phantom import load_split


def run(*args):
    return cli.main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert run("gen-data", "--out", root, "--n-train", 2, "--n-val", 2, "--n-test", 0, "--size", 32, "--seed", 3) == 0
    return root


class TestGenData:
    def test_default_counts(self, default_dataset):
        for split, n in (("train", 100), ("val", 25), ("test", 20)):
            files = os.listdir(os.path.join(default_dataset, split))
            assert len([f for f in files if f.endswith(".img.hcv")]) == n
            assert len([f for f in files if f.endswith(".lbl.hcv")]) == n

    def test_rerun_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / d, "--n-train", 3, "--n-val", 1, "--n-test", 1) == 0
        for dirpath, _, files in os.walk(tmp_path / "a"):
            for f in files:
                p = os.path.join(dirpath, f)
                q = p.replace(str(tmp_path / "a"), str(tmp_path / "b"))
                assert open(p, "rb").read() == open(q, "rb").read()

    def test_empty_train(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--n-train", 0, "--n-val", 1, "--n-test", 0) == 0
        rows = read_csv(tmp_path / "manifest.csv")
        assert rows[0] == ["split", "seed", "size"] and [r[0] for r in rows[1:]] == ["val"]
        assert load_split(tmp_path, "train")[2] == []

    def test_bad_size(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--size", 8) == 1


class TestConfig:
    def test_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nn_train = 7\nseed = 4\nsize = 40\n")
        args = cli.make_parser().parse_args(["gen-data", "--config", str(cfg), "--size", "36"])
        monkeypatch.setenv("HC_SEED", "11")
        resolved = cli.resolve("gen-data", args)
        assert resolved["n_train"] == 7 and resolved["size"] == 36 and resolved["seed"] == 11
        args = cli.make_parser().parse_args(["gen-data", "--config", str(cfg), "--seed", "2"])
        assert cli.resolve("gen-data", args)["seed"] == 2

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("colour = blue\n")
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 1

    def test_missing_config(self, tmp_path):
        assert run("gen-data", "--config", tmp_path / "nope.cfg") == 1

    def test_bad_value(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--n-train", "many") == 1

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--colour", "blue")
        assert exc.value.code == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run("fly")
        assert exc.value.code == 1


class TestTrainEval:
    def test_overfit_then_eval_on_train(self, tiny, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--data", tiny, "--out", out, "--mode", "dynamic", "--n", 2, "--depth", 2,
                   "--epochs", 100, "--batch-size", 2) == 0
        metrics = read_csv(out / "metrics.csv")
        assert metrics[0] == cli.METRICS_HEADER and len(metrics) == 101
        beta = read_csv(out / "beta.csv")
        assert beta[0] == ["epoch", "layer_index", "stream", "beta_value"]
        assert len(beta) == 1 + 100 * 10 * 2
        assert run("eval", "--checkpoint", out / "model.hck", "--data", tiny, "--split", "train",
                   "--out", tmp_path / "e.csv") == 0
        rows = read_csv(tmp_path / "e.csv")
        assert rows[0] == cli.EVAL_HEADER and rows[-1][0] == "mean" and len(rows) == 4
        assert float(rows[-1][4]) > 0.95

    def test_seed_fixed_rerun_identical(self, tiny, tmp_path):
        for d in ("a", "b"):
            assert run("train", "--data", tiny, "--out", tmp_path / d, "--mode", "static", "--n", 2,
                       "--depth", 1, "--epochs", 2) == 0
        for f in ("metrics.csv", "beta.csv", "model.hck"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_empty_split_header_only(self, tiny, tmp_path):
        assert run("train", "--data", tiny, "--out", tmp_path / "r", "--depth", 1, "--epochs", 1) == 0
        assert run("eval", "--checkpoint", tmp_path / "r" / "model.hck", "--data", tiny, "--split", "test",
                   "--out", tmp_path / "e.csv") == 0
        assert read_csv(tmp_path / "e.csv") == [cli.EVAL_HEADER]

    def test_bad_dropout(self, tiny, tmp_path):
        assert run("train", "--data", tiny, "--out", tmp_path / "r", "--modality-dropout", 2) == 1

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "r") == 1

    def test_bad_mode(self, tiny, tmp_path):
        assert run("train", "--data", tiny, "--out", tmp_path / "r", "--mode", "cubic") == 1

    def test_missing_checkpoint(self, tiny, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "x.hck", "--data", tiny) == 1

    def test_corrupt_checkpoint(self, tiny, tmp_path):
        (tmp_path / "x.hck").write_bytes(b"garbage")
        assert run("eval", "--checkpoint", tmp_path / "x.hck", "--data", tiny, "--out", tmp_path / "e.csv") == 1


@pytest.fixture(scope="module")
def ckpts(tiny, tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    for name, mode, n in (("base", "baseline", 1), ("var", "dynamic", 2)):
        assert run("train", "--data", tiny, "--out", root / name, "--mode", mode, "--n", n,
                   "--depth", 1, "--epochs", 1) == 0
    return root


class TestAblate:
    def test_single_model(self, tiny, ckpts, tmp_path):
        out = tmp_path / "a.csv"
        assert run("ablate", "--checkpoint", ckpts / "var" / "model.hck", "--data", tiny, "--out", out) == 0
        rows = read_csv(out)
        assert rows[0][-1] == "dse" and all(r[-1] == "" for r in rows[1:])

    def test_with_baseline(self, tiny, ckpts, tmp_path):
        out = tmp_path / "a.csv"
        assert run("ablate", "--checkpoint", ckpts / "var" / "model.hck", "--baseline",
                   ckpts / "base" / "model.hck", "--variant", "DHCx2", "--data", tiny, "--out", out) == 0
        rows = [dict(zip(read_csv(out)[0], r)) for r in read_csv(out)[1:]]
        filled = [r for r in rows if r["dse"]]
        assert len(filled) == 3
        for r in filled:
            base = next(b for b in rows if b["variant"] == "baseline" and b["region"] == r["region"]
                        and b["modality"] == r["modality"])
            assert float(r["dse"]) == pytest.approx(float(r["drop"]) - float(base["drop"]), abs=2e-6)

    def test_dse_without_baseline(self, tiny, ckpts, tmp_path):
        assert run("ablate", "--checkpoint", ckpts / "var" / "model.hck", "--dse", "true", "--data", tiny,
                   "--out", tmp_path / "a.csv") == 1

    def test_fixture(self, tmp_path):
        fixture = os.path.join(os.path.dirname(__file__), "data", "dom_drops.csv")
        out = tmp_path / "dse.csv"
        assert run("ablate", "--fixture", fixture, "--out", out) == 0
        rows = read_csv(out)
        printed = read_csv(fixture)
        assert rows[0] == ["model", "region", "variant", "drop_dom", "dse"]
        for got, want in zip(rows[1:], printed[1:]):
            if want[2] == "baseline":
                assert got[4] == ""
            else:
                assert abs(float(got[4]) - float(want[4])) <= 0.001 + 1e-9


class TestAudit:
    def test_default_models(self, tmp_path):
        out = tmp_path / "audit.csv"
        assert run("audit-params", "--out", out) == 0
        rows = read_csv(out)
        assert [r[0] for r in rows[1:]] == ["baseline", "SHCx2", "SHCx4", "DHCx2", "DHCx4"]
        hc = [int(r[1]) for r in rows[1:]]
        assert hc[0] == 0 and hc[1] < hc[2] and hc[3] < hc[4]
        assert rows[1][5] == "" and rows[2][5] == "+0.03661"

    def test_no_baseline(self, tmp_path):
        assert run("audit-params", "--models", "static:2", "--out", tmp_path / "a.csv") == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hcseg.cli", "audit-params", "--out", str(tmp_path / "a.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    proc = subprocess.run([sys.executable, "-m", "hcseg.cli", "train", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
