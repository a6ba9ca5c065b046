import json
import subprocess
import sys

import numpy as np
import pytest

from h2t import cli, experiments
from h2t.errors import ConfigError


def tiny_config(tmp_path, **over):
    cfg = {
        "backbone": {"source_examples": 1200, "steps": 400},
        "tasks": ["far_sign"],
        "task_train_examples": 300,
        "task_test_examples": 200,
        "methods": ["lp"],
        "grid": {"lrs": [0.5], "steps": [200], "reg_coefs": [0.001],
                 "target_sizes": [64], "fractions": [0.05, 0.1]},
        "cv_folds": 2,
        "seeds": [0],
    }
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults_complete(self):
        config = experiments.merge_config(experiments.DEFAULT_CONFIG, {})
        assert config["cv_folds"] == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            experiments.merge_config(experiments.DEFAULT_CONFIG, {"nope": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="grid.nope"):
            experiments.merge_config(experiments.DEFAULT_CONFIG,
                                     {"grid": {"nope": []}})

    def test_override_parses_json_values(self):
        config = experiments.merge_config(experiments.DEFAULT_CONFIG, {})
        config = experiments.apply_override(config, "grid.lrs", "[0.9]")
        assert config["grid"]["lrs"] == [0.9]
        config = experiments.apply_override(config, "seed", "7")
        assert config["seed"] == 7

    def test_override_unknown_key(self):
        config = experiments.merge_config(experiments.DEFAULT_CONFIG, {})
        with pytest.raises(ConfigError):
            experiments.apply_override(config, "grid.bogus", "1")


class TestExitCodes:
    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = cli.run(["evaluate", "--config", str(tmp_path / "absent.json")])
        assert code == 2
        assert "code=2" in capsys.readouterr().err

    def test_bad_override_exits_2(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        code = cli.run(["evaluate", "--config", str(cfg),
                        "--override", "grid.bogus=1",
                        "--out-dir", str(tmp_path / "out")])
        assert code == 2

    def test_usage_error_exits_1(self, capsys):
        code = cli.run(["evaluate", "--override", "novalue"])
        assert code == 1

    def test_validate_store_missing_exits_3(self, tmp_path, capsys):
        code = cli.run(["validate-store", str(tmp_path / "none.h2ta")])
        assert code == 3

    def test_corrupted_store_exits_3_with_location(self, tmp_path, capsys):
        import h2t.store as sto
        rng = np.random.default_rng(0)
        blocks = {"layer0": rng.normal(size=(4, 6)).astype(np.float32)}
        manifest = sto.StoreManifest(
            "x", "train", 4, np.zeros(4, dtype=np.uint32),
            [sto.LayerRecord("layer0", (6,))])
        path = tmp_path / "s.h2ta"
        sto.write_store(manifest, blocks, path)
        raw = bytearray(path.read_bytes())
        float_off = len(raw) - 8 - 4 * 6 * 4 + 5 * 4  # example 0, offset 5
        raw[float_off:float_off + 4] = b"\x00\x00\xc0\x7f"  # quiet NaN
        path.write_bytes(bytes(raw))
        code = cli.run(["validate-store", str(path)])
        captured = capsys.readouterr()
        assert code == 3
        assert "layer=layer0" in captured.err
        assert "offset 5" in captured.err or "index=5" in captured.err

    def test_valid_store_exits_0(self, tmp_path, capsys):
        import h2t.store as sto
        blocks = {"a": np.ones((2, 3), dtype=np.float32)}
        manifest = sto.StoreManifest("x", "t", 2, np.zeros(2, dtype=np.uint32),
                                     [sto.LayerRecord("a", (3,))])
        path = tmp_path / "ok.h2ta"
        sto.write_store(manifest, blocks, path)
        assert cli.run(["validate-store", str(path)]) == 0
        assert "ok" in capsys.readouterr().out


class TestHelp:
    def test_help_lists_config_keys_with_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.run(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for key in ("grid.lrs", "grid.fractions", "cv_folds", "seeds",
                    "backbone.arch", "tasks", "methods", "jobs"):
            assert key in out
        assert "0.0005" in out  # fraction grid default visible


class TestPipelineCommands:
    def test_pretrain_then_extract_then_probe(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out = str(tmp_path / "out")
        assert cli.run(["pretrain", "--config", str(cfg), "--out-dir", out]) == 0
        assert "source_accuracy" in capsys.readouterr().out
        assert cli.run(["extract", "--config", str(cfg), "--out-dir", out]) == 0
        capsys.readouterr()
        assert cli.run(["probe", "--config", str(cfg), "--out-dir", out]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "task,method,seed,test_acc"
        assert lines[1].startswith("far_sign,lp,0,")

    def test_evaluate_writes_results(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out_dir = tmp_path / "out"
        assert cli.run(["evaluate", "--config", str(cfg),
                        "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "results.csv").exists()
        assert (out_dir / "accuracy_by_task.svg").exists()
        text = (out_dir / "results.csv").read_text()
        assert text.startswith(",".join(["task", "method", "seed", "fold"]))

    def test_evaluate_deterministic_csv(self, tmp_path):
        cfg = tiny_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.run(["evaluate", "--config", str(cfg), "--seed", "0",
                        "--out-dir", str(a)]) == 0
        assert cli.run(["evaluate", "--config", str(cfg), "--seed", "0",
                        "--out-dir", str(b)]) == 0
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()

    def test_report_from_results(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out_dir = tmp_path / "out"
        cli.run(["evaluate", "--config", str(cfg), "--out-dir", str(out_dir)])
        assert cli.run(["report", "--results", str(out_dir / "results.csv"),
                        "--out-dir", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "method_medians.svg").exists()

    def test_parallel_jobs_match_sequential(self, tmp_path):
        cfg = tiny_config(tmp_path, tasks=["far_sign", "near_pair"])
        seq, par = tmp_path / "seq", tmp_path / "par"
        assert cli.run(["evaluate", "--config", str(cfg),
                        "--out-dir", str(seq)]) == 0
        assert cli.run(["evaluate", "--config", str(cfg), "--jobs", "2",
                        "--out-dir", str(par)]) == 0
        assert (seq / "results.csv").read_bytes() == \
            (par / "results.csv").read_bytes()


class TestEntryPoint:
    def test_console_script_runs(self):
        proc = subprocess.run([sys.executable, "-m", "h2t.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "config keys" in proc.stdout
