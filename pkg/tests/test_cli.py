import json
import subprocess
import sys

import numpy as np
import pytest

from ocacompat.cli import main
from ocacompat.retrieval import FeatureStore, save_store

TINY = """
[experiment]
seeds = [0, 1]
output_dir = "{out}"

[data]
num_classes = 4
old_classes = 2
per_class_train = 15
per_class_eval = 5
input_dim = 6

[train]
d_old = 4
d_extra = 2
hidden = [8]
epochs = 2
batch_size = 16
"""


def write_cfg(tmp_path, body=None, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(body if body is not None else TINY.format(out=tmp_path / "out"))
    return str(path)


def files_digest(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenData:
    def test_writes_both_splits(self, tmp_path):
        assert main(["gen-data", "--config", write_cfg(tmp_path)]) == 0
        for seed in (0, 1):
            assert (tmp_path / "out" / f"seed_{seed}" / "train.data").exists()
            assert (tmp_path / "out" / f"seed_{seed}" / "eval.data").exists()

    def test_rerun_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        main(["gen-data", "--config", cfg])
        first = files_digest(tmp_path / "out")
        main(["gen-data", "--config", cfg])
        assert files_digest(tmp_path / "out") == first

    def test_seed_override(self, tmp_path):
        assert main(["gen-data", "--config", write_cfg(tmp_path), "--seeds", "5"]) == 0
        assert [p.name for p in (tmp_path / "out").iterdir()] == ["seed_5"]

    def test_missing_seeds(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY.format(out=tmp_path).replace("seeds = [0, 1]", ""))
        assert main(["gen-data", "--config", cfg]) == 2
        assert "experiment.seeds" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY.format(out=tmp_path) + "bogus = 1\n")
        assert main(["gen-data", "--config", cfg]) == 2
        assert "train.bogus" in capsys.readouterr().err

    def test_wrong_type(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY.format(out=tmp_path).replace("epochs = 2", 'epochs = "2"'))
        assert main(["gen-data", "--config", cfg]) == 2
        assert "train.epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("OCA_OUTPUT_ROOT", str(tmp_path / "root"))
        body = "\n".join(l for l in TINY.splitlines() if not l.startswith("output_dir"))
        assert main(["gen-data", "--config", write_cfg(tmp_path, body, "exp.toml")]) == 0
        assert (tmp_path / "root" / "exp" / "seed_0" / "train.data").exists()


class TestTrain:
    def test_new_without_old(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        main(["gen-data", "--config", cfg])
        assert main(["train", "--config", cfg, "--role", "new"]) == 2
        err = capsys.readouterr().err
        assert "old.ckpt" in err and "--role old" in err

    def test_without_data(self, tmp_path, capsys):
        assert main(["train", "--config", write_cfg(tmp_path), "--role", "old"]) == 2
        assert "gen-data" in capsys.readouterr().err

    def test_oca_without_extra_dims(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY.format(out=tmp_path / "out").replace("d_extra = 2", "d_extra = 0"))
        assert main(["train", "--config", cfg, "--role", "new"]) == 2
        assert "d_extra" in capsys.readouterr().err


class TestEval:
    def _stores(self, tmp_path, dims=(3, 3)):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1, 2], 4)
        q = FeatureStore(np.arange(12), labels, rng.normal(size=(12, dims[0])) + 3 * np.eye(dims[0])[labels % dims[0]])
        g = FeatureStore(np.arange(12), labels, rng.normal(size=(12, dims[1])) + 3 * np.eye(dims[1])[labels % dims[1]])
        save_store(q, tmp_path / "q.ocaf")
        save_store(g, tmp_path / "g.ocaf")
        return str(tmp_path / "q.ocaf"), str(tmp_path / "g.ocaf")

    def test_report(self, tmp_path):
        q, g = self._stores(tmp_path)
        assert main(["eval", "--query", q, "--gallery", g, "--out", str(tmp_path / "r.json")]) == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        assert 0 <= rep["map_at_1"] <= 1 and set(rep["cmc"]) == {"1", "5", "10"}
        assert rep["self_exclusion"] is True

    def test_dim_mismatch_needs_pad(self, tmp_path, capsys):
        q, g = self._stores(tmp_path, dims=(5, 3))
        assert main(["eval", "--query", q, "--gallery", g, "--out", str(tmp_path / "r.json")]) == 2
        assert "--pad" in capsys.readouterr().err
        for pad in ("zero", "truncate"):
            assert main(["eval", "--query", q, "--gallery", g, "--pad", pad, "--out", str(tmp_path / f"{pad}.json")]) == 0
            assert json.loads((tmp_path / f"{pad}.json").read_text())["padding_mode"] == pad

    def test_malformed_store(self, tmp_path, capsys):
        q, g = self._stores(tmp_path)
        (tmp_path / "bad.ocaf").write_bytes(b"OCAF\x01\x00")
        assert main(["eval", "--query", q, "--gallery", str(tmp_path / "bad.ocaf"), "--out", str(tmp_path / "r.json")]) == 3
        assert "bad.ocaf" in capsys.readouterr().err

    def test_missing_store(self, tmp_path):
        q, _ = self._stores(tmp_path)
        assert main(["eval", "--query", q, "--gallery", str(tmp_path / "none.ocaf"), "--out", str(tmp_path / "r.json")]) == 3


class TestPipeline:
    def test_report_needs_artifacts(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        main(["gen-data", "--config", cfg])
        assert main(["compat-report", "--config", cfg]) == 2
        err = capsys.readouterr().err
        assert "--role old" in err and "--mode independent" in err

    def test_step_by_step_then_rerun(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "out"
        assert main(["gen-data", "--config", cfg]) == 0
        assert main(["train", "--config", cfg, "--role", "old"]) == 0
        assert main(["train", "--config", cfg, "--role", "new"]) == 0
        assert main(["train", "--config", cfg, "--role", "new", "--mode", "independent"]) == 0
        assert main(["compat-report", "--config", cfg]) == 0
        report = (out / "compat_report_oca.json").read_bytes()
        summary = json.loads(report)
        assert summary["seeds"] == [0, 1] and "new/old" in summary["mean"]
        assert main(["compat-report", "--config", cfg]) == 0
        assert (out / "compat_report_oca.json").read_bytes() == report

        ckpt = out / "seed_0" / "new_oca.ckpt"
        data = out / "seed_0" / "eval.data"
        assert main(["extract", "--checkpoint", str(ckpt), "--data", str(data), "--part", "full", "--out", str(tmp_path / "x.ocaf")]) == 0
        assert (tmp_path / "x.ocaf").read_bytes() == (out / "seed_0" / "stores" / "new_oca.ocaf").read_bytes()

    def test_module_entry_point(self, tmp_path):
        cfg = write_cfg(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "ocacompat.cli", "run", "--config", cfg, "--seeds", "0"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "new/old" in proc.stdout and "ECC" in proc.stdout

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", "x.toml"])
        assert exc.value.code == 2
