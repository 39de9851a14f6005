"""Command-line interface: artifacts, refusal codes, determinism."""
import hashlib
import json
import os
import subprocess

import pytest

from conftest import TINY_SEED, tiny_config
from ezhoi.cli import LADDER_ORDER, main
from ezhoi.config import TOGGLE_FIELDS
from ezhoi.data import dataset_files, read_jsonl


def _sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("clicfg") / "tiny.cfg"
    path.write_text(tiny_config().replace(epochs=2).to_text())
    return str(path)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_dir, cfg_file, capsysbinary):
    out = str(tmp_path_factory.mktemp("clirun") / "first")
    rc = main(["train", "--config", cfg_file, "--data-dir", tiny_dir,
               "--out", out])
    assert rc == 0
    return out


class TestGenData:
    def test_fresh_generation_matches_library_output(self, tiny_dir, cfg_file,
                                                     tmp_path, capsys):
        dest = str(tmp_path / "world")
        rc = main(["gen-data", "--config", cfg_file, "--data-dir", dest])
        assert rc == 0
        printed = dict(line.split() for line in
                       capsys.readouterr().out.strip().splitlines())
        assert set(printed) == set(dataset_files())
        for name, checksum in printed.items():
            assert checksum == _sha(os.path.join(tiny_dir, name)), name

    def test_refuses_nonempty_dir(self, tiny_dir, cfg_file, capsys):
        rc = main(["gen-data", "--config", cfg_file, "--data-dir", tiny_dir])
        assert rc == 2
        assert "--force" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, trained_run):
        names = sorted(os.listdir(trained_run))
        assert names == ["config.txt", "epoch000.ckpt", "epoch001.ckpt",
                         "metrics.jsonl", "model.ckpt"]
        history = read_jsonl(os.path.join(trained_run, "metrics.jsonl"))
        assert [h["epoch"] for h in history] == [0, 1]
        for h in history:
            assert {"loss", "focal", "relation", "val_seen_mAP"} <= set(h)

    def test_repeat_run_is_byte_identical(self, trained_run, tiny_dir,
                                          cfg_file, tmp_path):
        again = str(tmp_path / "again")
        rc = main(["train", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--out", again])
        assert rc == 0
        for name in ("model.ckpt", "metrics.jsonl", "config.txt"):
            assert _sha(os.path.join(again, name)) == \
                _sha(os.path.join(trained_run, name)), name

    def test_refuses_nonempty_out(self, trained_run, tiny_dir, cfg_file):
        rc = main(["train", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--out", trained_run])
        assert rc == 2

    def test_missing_data_dir_refused(self, cfg_file, monkeypatch, capsys):
        monkeypatch.delenv("EZHOI_DATA_DIR", raising=False)
        rc = main(["train", "--config", cfg_file])
        assert rc == 2
        assert "EZHOI_DATA_DIR" in capsys.readouterr().err

    def test_env_var_names_the_data_dir(self, tiny_dir, cfg_file, trained_run,
                                        monkeypatch):
        monkeypatch.setenv("EZHOI_DATA_DIR", tiny_dir)
        rc = main(["train", "--config", cfg_file, "--out", trained_run])
        assert rc == 2  # reached the non-empty out dir, so the env var worked

    def test_unknown_toggle_refused(self, tiny_dir, cfg_file, capsys):
        rc = main(["train", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--toggle", "warp_drive=on"])
        assert rc == 2
        assert "warp_drive" in capsys.readouterr().err


class TestEval:
    def test_report_shape(self, trained_run, tiny_dir, cfg_file, tmp_path,
                          tiny_world):
        out = str(tmp_path / "ev")
        rc = main(["eval", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--checkpoint", os.path.join(trained_run, "model.ckpt"),
                   "--out", out])
        assert rc == 0
        with open(os.path.join(out, "report.json")) as f:
            report = json.load(f)
        assert set(report) == {"mAP", "seen_mAP", "unseen_mAP", "per_class"}
        assert len(report["per_class"]) == tiny_world.n_classes
        flagged = {r["class_id"] for r in report["per_class"] if r["unseen"]}
        assert flagged == set(tiny_world.unseen_ids)
        for r in report["per_class"]:
            assert tuple((r["verb"], r["object"])) == \
                tiny_world.classes[r["class_id"]]
        preds = read_jsonl(os.path.join(out, "preds.jsonl"))
        assert preds and {"scene_id", "class_id", "score"} <= set(preds[0])

    def test_tau_override_changes_predictions(self, trained_run, tiny_dir,
                                              cfg_file, tmp_path):
        ckpt = os.path.join(trained_run, "model.ckpt")
        outs = []
        for tau in ("2.8", "1.0"):
            out = str(tmp_path / f"tau{tau}")
            rc = main(["eval", "--config", cfg_file, "--data-dir", tiny_dir,
                       "--checkpoint", ckpt, "--out", out, "--tau", tau])
            assert rc == 0
            outs.append(_sha(os.path.join(out, "preds.jsonl")))
        assert outs[0] != outs[1]

    def test_structural_mismatch_refused(self, trained_run, tiny_dir,
                                         cfg_file, tmp_path, capsys):
        out = str(tmp_path / "bad")
        rc = main(["eval", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--checkpoint", os.path.join(trained_run, "model.ckpt"),
                   "--out", out, "--toggle", "utpl=off"])
        assert rc == 2
        assert "checkpoint" in capsys.readouterr().err.lower()


class TestGradcheck:
    def test_self_test_runs_without_data(self, capsys):
        rc = main(["gradcheck", "--self-test"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("others passed") == 3
        assert "clean pass ok" in out

    def test_float32_refused(self, tiny_dir, cfg_file, capsys):
        rc = main(["gradcheck", "--config", cfg_file, "--data-dir", tiny_dir,
                   "--precision", "32"])
        assert rc == 2
        assert "64" in capsys.readouterr().err

    def test_full_audit_passes(self, tiny_dir, cfg_file, capsys):
        rc = main(["gradcheck", "--config", cfg_file, "--data-dir", tiny_dir])
        assert rc == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("PASS") >= 8


class TestAblate:
    def test_ladder(self, tiny_dir, tmp_path_factory, capsys):
        cfg_dir = tmp_path_factory.mktemp("abl")
        cfg_path = cfg_dir / "fast.cfg"
        cfg_path.write_text(tiny_config().replace(epochs=1).to_text())
        out = str(cfg_dir / "out")
        rc = main(["ablate", "--config", str(cfg_path), "--data-dir", tiny_dir,
                   "--out", out])
        assert rc == 0
        with open(os.path.join(out, "results.json")) as f:
            results = json.load(f)
        assert results["mode"] == "uv"
        assert results["seeds"] == [TINY_SEED + k for k in range(3)]
        rows = results["rows"]
        assert [r["row"] for r in rows] == \
            ["baseline"] + [f"+{t}" for t in LADDER_ORDER]
        for i, r in enumerate(rows):
            assert sum(r["toggles"].values()) == i
            assert len(r["per_seed"]) == 3
            for key in ("mAP", "seen_mAP", "unseen_mAP"):
                assert set(r[key]) == {"mean", "sd"}
        assert set(rows[-1]["toggles"]) == set(TOGGLE_FIELDS)
        assert all(rows[-1]["toggles"].values())


def test_console_script_help():
    proc = subprocess.run(["ezhoi", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "gradcheck", "ablate"):
        assert cmd in proc.stdout
