import hashlib
import subprocess
import sys

import numpy as np
import pytest

from pgn.cli import run
from pgn.datasets import read_dataset


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGeneration:
    def test_gen_balls_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run(["gen-balls", "--n", "10", "--seed", "7", "-o", str(tmp_path / f"{name}.pgnv")]) == 0
        assert digest(tmp_path / "a.pgnv") == digest(tmp_path / "b.pgnv")
        assert len(read_dataset(tmp_path / "a.pgnv")) == 10

    def test_gen_objects_writes_sidecar(self, tmp_path):
        out = tmp_path / "o.pgnv"
        assert run(["gen-objects", "--n", "3", "--size", "16", "-o", str(out)]) == 0
        assert read_dataset(out).latents is not None

    def test_gen_classes(self, tmp_path, capsys):
        out = tmp_path / "c.pgnv"
        assert run(["gen-classes", "--ids", "3", "--size", "8", "-o", str(out)]) == 0
        assert "3 identities x 12 angles" in capsys.readouterr().out

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("# balls\nn=4\nframes=5\nseed=3\n")
        assert run(["gen-balls", "--config", str(cfg), "-o", str(tmp_path / "a.pgnv")]) == 0
        assert read_dataset(tmp_path / "a.pgnv").frames.shape[:2] == (4, 5)
        assert run(["gen-balls", "--config", str(cfg), "--n", "2", "-o", str(tmp_path / "b.pgnv")]) == 0
        assert len(read_dataset(tmp_path / "b.pgnv")) == 2


class TestErrors:
    def test_missing_dataset_is_usage_error(self, tmp_path, capsys):
        code = run(["train", "--train", str(tmp_path / "nope.pgnv"), "--val", str(tmp_path / "nope.pgnv")])
        err = capsys.readouterr().err
        assert code == 1
        assert "usage:" in err and "no such file" in err

    def test_unknown_flag(self, capsys):
        assert run(["gen-balls", "--colour", "red"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run(["fly"]) == 1

    def test_bad_config_entry(self, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("wings=2\n")
        assert run(["gen-balls", "--config", str(cfg)]) == 1

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.pgnv"
        bad.write_bytes(b"garbage" * 20)
        assert run(["eval", "--copy", "--data", str(bad)]) == 2
        assert "pgn: error" in capsys.readouterr().err

    def test_classify_needs_models(self, tmp_path):
        out = tmp_path / "c.pgnv"
        run(["gen-classes", "--ids", "2", "--size", "8", "-o", str(out)])
        assert run(["classify", "--classes", str(out)]) == 1


class TestGradcheck:
    def test_passes(self, capsys):
        assert run(["gradcheck", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out
        worst = float(out.strip().splitlines()[-1].split()[3])
        assert worst < 1e-4


class TestPipeline:
    def test_train_eval_and_replay(self, balls_files, tmp_path, capsys):
        run_dir = tmp_path / "run"
        args = ["train", "--train", str(balls_files["train"]), "--val", str(balls_files["val"]),
                "--epochs", "1", "--batch-size", "6", "--seed", "3", "-o", str(run_dir)]
        assert run(args) == 0
        captured = capsys.readouterr()
        assert "# resolved config: train" in captured.err
        assert "checkpoint:" in captured.out
        echoed = captured.err.split("\n", 1)[1]
        assert echoed == (run_dir / "config.txt").read_text()

        replay = tmp_path / "replay.cfg"
        replay.write_text(echoed.replace(str(run_dir), str(tmp_path / "again")))
        assert run(["train", "--config", str(replay)]) == 0
        assert (run_dir / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()

        out = tmp_path / "eval.csv"
        assert run(["eval", "--checkpoint", str(run_dir / "final.pgnc"), "--data", str(balls_files["test"]),
                    "-o", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "video,error" and len(rows) == 7

    def test_copy_eval_matches_recorded_baseline(self, balls_files, capsys):
        from pgn.datasets import baseline_from_constants
        assert run(["eval", "--copy", "--data", str(balls_files["test"])]) == 0
        mean = float(capsys.readouterr().out.split(":")[1].split()[0])
        recorded = baseline_from_constants(read_dataset(balls_files["test"]).constants)
        assert mean == pytest.approx(recorded, abs=1e-6)

    def test_object_analyses(self, objects_files, tmp_path, capsys):
        run_dir = tmp_path / "obj"
        assert run(["train", "--arch", "objects", "--train", str(objects_files["train"]),
                    "--val", str(objects_files["val"]), "--epochs", "1", "--batch-size", "5",
                    "-o", str(run_dir)]) == 0
        probes = ["--probe-train", str(objects_files["train"]), "--probe-val", str(objects_files["val"]),
                  "--probe-test", str(objects_files["test"])]
        ck = str(run_dir / "final.pgnc")
        assert run(["decode", "--checkpoint", str(run_dir / "epoch_000.pgnc"), ck, *probes,
                    "-o", str(tmp_path / "d.csv")]) == 0
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "epoch,state,latent,r2" and len(lines) == 13
        assert run(["project", "--checkpoint", ck, *probes, "-o", str(tmp_path / "p.csv")]) == 0
        assert run(["extrapolate", "--checkpoint", ck, *probes, "--component", "2", "--deltas", "0,1",
                    "-o", str(tmp_path / "img" / "x")]) == 0
        assert sorted(p.name for p in (tmp_path / "img").iterdir()) == [
            "x_model_000.pgm", "x_model_001.pgm", "x_truth_000.pgm", "x_truth_001.pgm"]
        classes = tmp_path / "c.pgnv"
        assert run(["gen-classes", "--ids", "3", "--size", "16", "-o", str(classes)]) == 0
        assert run(["classify", "--classes", str(classes), "--model", f"pgn={ck}", "--ks", "6",
                    "-o", str(tmp_path / "c.csv")]) == 0
        assert (tmp_path / "c.csv").read_text().startswith("model,k,accuracy\npgn,6,")


def test_module_entry_point(tmp_path):
    out = tmp_path / "x.pgnv"
    proc = subprocess.run([sys.executable, "-m", "pgn", "gen-balls", "--n", "2", "--frames", "3", "-o", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert np.all(read_dataset(out).frames <= 1)
