"""Config parsing, the run/validate/analyze commands, and result files."""

import dataclasses
import json

import numpy as np
import pytest

from ocl_lab.cli import main
from ocl_lab.config import parse_config, write_config
from ocl_lab.errors import ConfigError
from ocl_lab.runner import derive_run_seed, load_snapshot, run

MINIMAL = """\
[dataset]
kind = synth

[experiment]
tasks = 5
seeds = 0

[method.erfsl]
"""

SMALL_GRID = """\
[dataset]
kind = synth
classes = 4
input_dim = 16
per_class = 40
separation = 6.0

[experiment]
tasks = 1
seeds = 3 5
hidden_dims = 16
feature_dim = 16

[method.er]
lr = 0.2
buffer = 64
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseConfig:
    def test_minimal_config_parses_with_defaults(self, tmp_path):
        config = parse_config(write(tmp_path, MINIMAL))
        assert config.dataset.kind == "synth"
        assert config.seeds == (0,)
        assert config.task_count == 5
        assert config.methods[0].method == "erfsl"
        assert config.methods[0].gamma == 0.5

    def test_gamma_range_error_names_key(self, tmp_path):
        text = MINIMAL.replace("[method.erfsl]\n", "[method.erfsl]\ngamma = 1.5\n")
        with pytest.raises(ConfigError, match="gamma"):
            parse_config(write(tmp_path, text))

    def test_duplicate_seeds_deduplicated_with_warning(self, tmp_path, caplog):
        text = MINIMAL.replace("seeds = 0", "seeds = 4 4 7")
        with caplog.at_level("WARNING"):
            config = parse_config(write(tmp_path, text))
        assert config.seeds == (4, 7)
        assert any("duplicate" in r.message for r in caplog.records)

    def test_unknown_key_rejected(self, tmp_path):
        text = MINIMAL.replace("tasks = 5", "tasks = 5\nbogus = 1")
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(write(tmp_path, text))

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="extras"):
            parse_config(write(tmp_path, MINIMAL + "\n[extras]\nx = 1\n"))

    def test_missing_seeds_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(write(tmp_path, MINIMAL.replace("seeds = 0\n", "")))

    def test_method_section_required(self, tmp_path):
        with pytest.raises(ConfigError, match="method"):
            parse_config(write(tmp_path, MINIMAL.replace("[method.erfsl]\n", "")))

    def test_unknown_method_name_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="method"):
            parse_config(write(tmp_path, MINIMAL.replace("[method.erfsl]", "[method.sgd]")))

    def test_ablation_on_non_erfsl_rejected(self, tmp_path):
        text = MINIMAL.replace("[method.erfsl]\n", "[method.er]\nablation = fixed_s\n")
        with pytest.raises(ConfigError, match="ablation"):
            parse_config(write(tmp_path, text))

    def test_missing_idx_files_rejected(self, tmp_path):
        text = MINIMAL.replace(
            "kind = synth",
            "kind = idx\ntrain_images = nope.idx\ntrain_labels = nope.idx\n"
            "test_images = nope.idx\ntest_labels = nope.idx",
        )
        with pytest.raises(ConfigError, match="does not exist"):
            parse_config(write(tmp_path, text))

    def test_classes_must_divide_tasks(self, tmp_path):
        text = MINIMAL.replace("kind = synth", "kind = synth\nclasses = 9")
        with pytest.raises(ConfigError, match="divisible"):
            parse_config(write(tmp_path, text))

    def test_round_trip_is_identity(self, tmp_path):
        config = parse_config(write(tmp_path, SMALL_GRID))
        echo = tmp_path / "echo.ini"
        write_config(config, echo)
        assert parse_config(echo) == config


class TestRun:
    def test_results_csv_rows_and_rerun_identical(self, tmp_path):
        config = parse_config(write(tmp_path, SMALL_GRID))
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        report = run(config, out_dir=out_a)
        assert not report.failed
        lines = (out_a / "results.csv").read_text().splitlines()
        # header + (2 seeds x 1 task) + 1 aggregate row
        assert len(lines) == 4
        assert lines[-1].startswith("er,mean,1,")
        run(config, out_dir=out_b)
        assert (out_a / "results.csv").read_bytes() == (out_b / "results.csv").read_bytes()

    def test_effective_config_round_trips(self, tmp_path):
        config = parse_config(write(tmp_path, SMALL_GRID))
        out = tmp_path / "out"
        run(config, out_dir=out)
        echoed = parse_config(out / "effective_config.ini")
        assert echoed == dataclasses.replace(config, output=str(out))

    def test_seed_override_runs_one_seed(self, tmp_path):
        config = parse_config(write(tmp_path, SMALL_GRID))
        out = tmp_path / "out"
        report = run(config, out_dir=out, seed_override=11)
        assert [o.seed for o in report.outcomes] == [11]

    def test_adding_a_method_does_not_perturb_existing_runs(self, tmp_path):
        base = parse_config(write(tmp_path, SMALL_GRID, "base.ini"))
        extended_text = SMALL_GRID + "\n[method.erfsl]\nlr = 0.2\nsubspace_size = 8\nbuffer = 64\n"
        extended = parse_config(write(tmp_path, extended_text, "ext.ini"))
        report_a = run(base, out_dir=tmp_path / "a")
        report_b = run(extended, out_dir=tmp_path / "b")
        a = {(o.label, o.seed): o.final_accuracy for o in report_a.outcomes}
        b = {(o.label, o.seed): o.final_accuracy for o in report_b.outcomes if o.label == "er"}
        assert a == b

    def test_failed_runs_are_isolated(self, tmp_path):
        # 3 csv classes cannot split into 2 tasks: every run fails, no crash
        csv_path = tmp_path / "data.csv"
        rows = ["f0,f1,label"]
        rng = np.random.default_rng(0)
        for c in range(3):
            for _ in range(8):
                rows.append(f"{rng.random():.4f},{rng.random():.4f},{c}")
        csv_path.write_text("\n".join(rows) + "\n")
        text = SMALL_GRID.replace(
            "kind = synth\nclasses = 4\ninput_dim = 16\nper_class = 40\nseparation = 6.0",
            f"kind = csv\ntrain_path = {csv_path}",
        ).replace("tasks = 1", "tasks = 2")
        config = parse_config(write(tmp_path, text))
        report = run(config, out_dir=tmp_path / "out")
        assert len(report.failed) == len(report.outcomes) == 2
        runs_payload = json.loads((tmp_path / "out" / "runs.json").read_text())
        assert all(entry["error"] for entry in runs_payload)

    def test_run_seed_derivation_is_label_scoped(self):
        assert derive_run_seed("er", 3) != derive_run_seed("erfsl", 3)
        assert derive_run_seed("er", 3) == derive_run_seed("er", 3)

    def test_thread_budget_bounded_by_env(self, tmp_path, monkeypatch):
        text = SMALL_GRID.replace("[experiment]", "[experiment]\nthreads = 4")
        config = parse_config(write(tmp_path, text))
        monkeypatch.setenv("OCL_LAB_THREADS", "2")
        report = run(config, out_dir=tmp_path / "out")
        assert not report.failed
        monkeypatch.setenv("OCL_LAB_THREADS", "nonsense")
        with pytest.raises(ConfigError, match="OCL_LAB_THREADS"):
            run(config, out_dir=tmp_path / "out2")

    def test_parallel_results_match_sequential(self, tmp_path, monkeypatch):
        config = parse_config(write(tmp_path, SMALL_GRID))
        run(config, out_dir=tmp_path / "seq")
        monkeypatch.setenv("OCL_LAB_THREADS", "3")
        run(dataclasses.replace(config, threads=3), out_dir=tmp_path / "par")
        assert (tmp_path / "seq" / "results.csv").read_bytes() == (
            tmp_path / "par" / "results.csv"
        ).read_bytes()


class TestCliCommands:
    def test_validate_ok(self, tmp_path, capsys):
        path = write(tmp_path, MINIMAL)
        assert main(["validate", "--config", str(path)]) == 0
        assert "OK" in capsys.readouterr().out

    def test_validate_bad_config(self, tmp_path, capsys):
        path = write(tmp_path, MINIMAL.replace("tasks = 5", "tasks = 0"))
        assert main(["validate", "--config", str(path)]) == 2
        assert "tasks" in capsys.readouterr().err

    def test_run_exit_code_nonzero_on_failed_runs(self, tmp_path, capsys):
        csv_path = tmp_path / "data.csv"
        rows = ["f0,f1,label"] + [f"0.{i}1,0.{i}2,{i % 3}" for i in range(9)]
        csv_path.write_text("\n".join(rows) + "\n")
        text = SMALL_GRID.replace(
            "kind = synth\nclasses = 4\ninput_dim = 16\nper_class = 40\nseparation = 6.0",
            f"kind = csv\ntrain_path = {csv_path}",
        ).replace("tasks = 1", "tasks = 2")
        path = write(tmp_path, text)
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
        assert "FAILED" in capsys.readouterr().out

    def test_run_and_analyze(self, tmp_path, capsys):
        grid = SMALL_GRID.replace("tasks = 1", "tasks = 2").replace("seeds = 3 5", "seeds = 3")
        path = write(tmp_path, grid)
        out = tmp_path / "out"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        capsys.readouterr()
        snapshot = out / "snapshot_er_3.npz"
        assert snapshot.exists()
        assert main(["analyze", "--model", str(snapshot), "--profile"]) == 0
        printed = capsys.readouterr().out
        assert "old-class group mean" in printed and "new-class group mean" in printed

    def test_snapshot_round_trip_preserves_model(self, tmp_path):
        grid = SMALL_GRID.replace("tasks = 1", "tasks = 2").replace("seeds = 3 5", "seeds = 3")
        config = parse_config(write(tmp_path, grid))
        out = tmp_path / "out"
        report = run(config, out_dir=out)
        model, payload = load_snapshot(out / "snapshot_er_3.npz")
        original = report.outcomes[0].result.state.model
        for a, b in zip(original.extractor.weights, model.extractor.weights):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(original.classifier.weights, model.classifier.weights)
        assert payload["meta"]["seed"] == 3
