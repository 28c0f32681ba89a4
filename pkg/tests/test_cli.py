import csv
import json
import subprocess
import sys

import pytest

from ocean.cli import MANIFEST_NAME, RunManifest, content_hash, main
from ocean.evalx import REPORT_COLUMNS


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "--rules", "hans3-lite", "--n-train", "24", "--n-val", "6", "--n-test", "6",
               "--seed", "7", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["warmup", "--data", str(data_dir), "--epochs", "1", "--batch-size", "24",
                 "--out", str(root / "warm")]) == 0
    assert main(["train-game", "--checkpoint", str(root / "warm"), "--data", str(data_dir), "--game-epochs", "2",
                 "--batch-size", "12", "--out", str(root / "ck")]) == 0
    return root


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert main(["gen-data", "--rules", "hans3-lite", "--out", "x", "--bogus"]) == 2
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["fly"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_value(self):
        assert main(["gen-data", "--rules", "hans3-lite", "--res", "0", "--out", "x"]) == 2

    def test_runtime_failure(self, tmp_path):
        assert main(["warmup", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "ocean", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "gen-data" in r.stdout


class TestGenData:
    def test_archive_and_manifest(self, data_dir):
        m = RunManifest.read(data_dir / MANIFEST_NAME)
        assert (data_dir / "scenes.ocds").exists()
        assert m.command == "gen-data" and m.seed == 7 and m.config["n_train"] == 24
        assert m.outputs == [str(data_dir / "scenes.ocds")] and m.started <= m.finished

    def test_same_seed_same_bytes(self, data_dir, tmp_path):
        assert main(["gen-data", "--rules", "hans3-lite", "--n-train", "24", "--n-val", "6", "--n-test", "6",
                     "--seed", "7", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "scenes.ocds").read_bytes() == (data_dir / "scenes.ocds").read_bytes()
        assert content_hash([tmp_path]) == content_hash([data_dir])


class TestPipeline:
    def test_training_outputs(self, trained):
        for name in ("slotcoder.ockp", "players.ockp", "model.json", "history.json", "history.csv", MANIFEST_NAME):
            assert (trained / "ck" / name).exists(), name
        rows = list(csv.DictReader((trained / "ck" / "history.csv").open()))
        assert len(rows) == 2
        m = RunManifest.read(trained / "ck" / MANIFEST_NAME)
        assert len(m.input_hash) == 64

    def test_eval_csv(self, data_dir, trained, tmp_path):
        assert main(["eval", "--config", "A", "--checkpoint", str(trained / "ck"), "--data", str(data_dir),
                     "--out", str(tmp_path)]) == 0
        rows = list(csv.reader((tmp_path / "metrics.csv").open()))
        assert tuple(rows[0]) == REPORT_COLUMNS and len(REPORT_COLUMNS) == 2 + 6
        assert [r[0] for r in rows[1:]] == ["hans3-lite/test_nonconfounded", "hans3-lite/val_confounded"]

    def test_eval_deterministic(self, data_dir, trained, tmp_path):
        for d in ("a", "b"):
            assert main(["eval", "--checkpoint", str(trained / "ck"), "--data", str(data_dir),
                         "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_eval_under_other_rules(self, data_dir, trained, tmp_path):
        assert main(["eval", "--config", "B", "--checkpoint", str(trained / "ck"), "--data", str(data_dir),
                     "--splits", "test_nonconfounded", "--out", str(tmp_path)]) == 0
        assert list(csv.reader((tmp_path / "metrics.csv").open()))[1][1] == "B"

    def test_explain(self, data_dir, trained, tmp_path):
        assert main(["explain", "--checkpoint", str(trained / "ck"), "--data", str(data_dir), "-n", "2",
                     "--format", "svg", "--out", str(tmp_path)]) == 0
        jsons = sorted(tmp_path.glob("scene_*.json"))
        assert len(jsons) == 2 and len(list(tmp_path.glob("scene_*.svg"))) == 2
        rec = json.loads(jsons[0].read_text())
        assert rec["final"]["prediction"] in (0, 1, 2)

    def test_report(self, data_dir, trained, tmp_path):
        assert main(["eval", "--checkpoint", str(trained / "ck"), "--data", str(data_dir),
                     "--out", str(tmp_path / "ev")]) == 0
        assert main(["report", "--runs", str(tmp_path / "ev"), "--histories", str(trained / "ck"),
                     "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "metrics.csv").exists()
        assert (tmp_path / "rep" / "curve_accuracy.svg").exists()

    def test_training_overrides(self, data_dir, trained, tmp_path):
        assert main(["train-game", "--checkpoint", str(trained / "warm"), "--data", str(data_dir), "--game-epochs", "1",
                     "--lr-players", "0.002", "--entropy-coef", "0.05", "--out", str(tmp_path)]) == 0
        params = json.loads((tmp_path / "model.json").read_text())["estimator"]
        assert params["lr_players"] == 0.002 and params["entropy_coef"] == 0.05
        assert main(["train-game", "--checkpoint", str(trained / "warm"), "--data", str(data_dir),
                     "--entropy-coef", "-1", "--out", str(tmp_path)]) == 2

    def test_train_e2e(self, data_dir, tmp_path):
        assert main(["train-e2e", "--data", str(data_dir), "--warmup-epochs", "1", "--game-epochs", "1",
                     "--em-cycles", "1", "--batch-size", "12", "--out", str(tmp_path)]) == 0
        phases = [h["phase"] for h in json.loads((tmp_path / "history.json").read_text())]
        assert phases == ["game", "game", "m1"]
