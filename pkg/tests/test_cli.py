import os

import pandas as pd
import pytest

from compare_variants import curve_checks, ordering_checks, summary_table
from evaluation import MetricsReport
from main import main
from nn.train import CurvePoint
from run_config import KEYS, RunConfig, RunConfigError, parse_lines, parse_overrides, read_config_file

TABULAR = ["--set", "dataset=tabular", "--set", "n_samples=240", "--set", "cardinalities=4,2,2",
           "--set", "feature_dim=6"]
QUICK = ["--set", "stage1_epochs=1", "--set", "stage2_epochs=1", "--set", "batch_size=32",
         "--set", "screening_threshold=0", "--set", "augment_count=100"]


def _args(command, data_dir, *extra, seed=0):
    return [command, "--set", f"seed={seed}", "--set", f"data_dir={data_dir}", *extra]


@pytest.fixture
def data_dir(tmp_path):
    path = tmp_path / "data"
    assert main(_args("generate", path, *TABULAR)) == 0
    return path


# ----------------------------------------------------------------------
# Run config
# ----------------------------------------------------------------------
def test_resolve_defaults_and_precedence(tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text("# comment\nseed = 3\nbatch_size = 16  # inline\nstep_ratio = 2:3\n",
                           encoding="utf-8")
    cfg = RunConfig.resolve("train", read_config_file(config_file),
                            parse_overrides(["batch_size=8"]), environ={})
    assert cfg.seed == 3
    assert cfg.batch_size == 8
    assert cfg.step_ratio == (2, 3)
    assert cfg.stage1_epochs == 30
    assert cfg.augment_count is None
    assert cfg.causal_edges == ()
    assert cfg.output_dir == os.path.join("runs", "train")
    assert cfg.run_id == "train-3"
    assert cfg.explicit == {"seed", "batch_size", "step_ratio"}


def test_output_root_from_environment():
    cfg = RunConfig.resolve("curve", overrides={"seed": "1"}, environ={"GCDR_OUTPUT_ROOT": "/tmp/out"})
    assert cfg.output_dir == os.path.join("/tmp/out", "curve")
    assert cfg.marks == (1, 10, 30)


@pytest.mark.parametrize("command,overrides", [
    ("train", {"batch_size": "8"}),
    ("train", {"seed": "1", "bogus": "2"}),
    ("validate", {"seed": "1", "variant": "full"}),
    ("train", {"seed": "x"}),
    ("train", {"seed": "1", "step_ratio": "1:2:3"}),
    ("train", {"seed": "1", "causal_edges": "1-2"}),
    ("fit", {"seed": "1"}),
])
def test_resolve_rejects(command, overrides):
    with pytest.raises(RunConfigError):
        RunConfig.resolve(command, overrides=overrides, environ={})


def test_config_syntax_errors(tmp_path):
    with pytest.raises(RunConfigError):
        parse_lines(["seed 3"])
    with pytest.raises(RunConfigError):
        parse_overrides(["seed"])
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "missing.cfg")


def test_resolved_config_echo(tmp_path):
    cfg = RunConfig.resolve("train", overrides={"seed": "2", "causal_edges": "2>1", "verbose": "yes"},
                            environ={})
    path = cfg.write_resolved(tmp_path)
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == "# command = train"
    assert "causal_edges = 2>1" in lines
    assert "step_ratio = 1:5" in lines
    assert "verbose = true" in lines
    assert "augment_count = " in lines
    assert len(lines) == 1 + sum(1 for key in KEYS.values() if "train" in key.commands)


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def test_generate_and_validate(data_dir, capsys):
    assert (data_dir / "samples.npz").exists()
    manifest = (data_dir / "split.manifest").read_text(encoding="utf-8")
    assert manifest.startswith("# gcdr-split v1\n")
    assert "class_sharing=0,0,1" in manifest
    assert main(_args("validate", data_dir)) == 0
    assert "GCDR constraints: PASS" in capsys.readouterr().out


def _break_manifest(data_dir):
    path = data_dir / "split.manifest"
    text = path.read_text(encoding="utf-8")
    path.write_text(text.replace("\ttest\t", "\ttrain\t", 1), encoding="utf-8")


def test_validate_reports_violation(data_dir, capsys):
    _break_manifest(data_dir)
    assert main(_args("validate", data_dir)) == 2
    out = capsys.readouterr().out
    assert "combination-disjointness" in out
    assert "GCDR constraints: FAIL" in out


def test_train_refuses_violating_split(data_dir, tmp_path):
    _break_manifest(data_dir)
    out_dir = tmp_path / "run"
    assert main(_args("train", data_dir, *QUICK, "--set", f"output_dir={out_dir}")) == 2
    assert not (out_dir / "metrics.csv").exists()


def test_unknown_key_is_an_error(data_dir, capsys):
    assert main(_args("validate", data_dir, "--set", "bogus=1")) == 1
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_missing_data_is_an_error(tmp_path, capsys):
    assert main(_args("validate", tmp_path / "nowhere")) == 1
    assert "run 'generate' first" in capsys.readouterr().err


def test_corrupt_manifest_is_an_error(data_dir):
    (data_dir / "split.manifest").write_text("not a manifest\n", encoding="utf-8")
    assert main(_args("validate", data_dir)) == 1


def test_cmnist_rejects_causal_edges(tmp_path):
    assert main(_args("generate", tmp_path, "--set", "causal_edges=2>1")) == 1


def test_generate_records_causal_edge(tmp_path):
    path = tmp_path / "data"
    assert main(_args("generate", path, *TABULAR, "--set", "causal_edges=3>2")) == 0
    lines = (path / "split.manifest").read_text(encoding="utf-8").splitlines()
    assert "# causal_edges 3>2" in lines


def test_generate_cmnist_manifest_is_reproducible(tmp_path):
    pools = ["--set", "train_pool=1200", "--set", "test_pool=400"]
    manifests = []
    for name in ("a", "b"):
        path = tmp_path / name
        assert main(_args("generate", path, *pools, seed=4)) == 0
        manifests.append((path / "split.manifest").read_bytes())
    assert manifests[0] == manifests[1]
    assert b"# causal_edges -\n" in manifests[0]


def test_train_writes_outputs_deterministically(data_dir, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        argv = _args("train", data_dir, *QUICK, "--set", f"output_dir={out_dir}", "--set", "run_id=r")
        assert main(argv) == 0
        outputs.append(out_dir)

    first, second = outputs
    for name in ("metrics.csv", "checkpoint.gcdr", "config.resolved"):
        assert (first / name).exists()
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert (first / "checkpoint.gcdr").read_bytes() == (second / "checkpoint.gcdr").read_bytes()

    frame = pd.read_csv(first / "metrics.csv")
    assert list(frame.columns) == ["run_id", "variant", "stage", "epoch", "split", "metric", "value"]
    assert set(frame["split"]) == {"validation", "test"}
    assert set(frame["stage"]) == {"stage1", "stage2"}
    assert (frame["run_id"] == "r").all()


def test_ablate_writes_tables(data_dir, tmp_path):
    out_dir = tmp_path / "ablate"
    argv = _args("ablate", data_dir, *QUICK, "--set", f"output_dir={out_dir}",
                 "--set", "variants=full,direct")
    assert main(argv) == 0
    summary = pd.read_csv(out_dir / "summary.csv")
    assert list(summary["variant"]) == ["full", "full", "direct"]
    assert (out_dir / "ablation.csv").exists()
    assert (out_dir / "full" / "checkpoint.gcdr").exists()
    assert (out_dir / "direct" / "metrics.csv").exists()


def test_curve_writes_points(data_dir, tmp_path):
    out_dir = tmp_path / "curve"
    argv = _args("curve", data_dir, *QUICK, "--set", f"output_dir={out_dir}", "--set", "marks=2,1")
    assert main(argv) == 0
    lines = (out_dir / "curve.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,aauc_before,aauc_after"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]


# ----------------------------------------------------------------------
# Comparison checks
# ----------------------------------------------------------------------
def _report(auc, eo=None):
    return MetricsReport(auc=auc, far=0.1, frr=0.1, acc=0.5, eo_gap=eo)


def test_ordering_checks_pass_on_expected_ordering():
    reports = {
        "full": {"stage1": _report(0.80), "stage2": _report(0.86, eo=0.10)},
        "no-adv-stage1": {"stage1": _report(0.70), "stage2": _report(0.75)},
        "shared-d": {"stage1": _report(0.68), "stage2": _report(0.72)},
        "single-branch": {"stage1": _report(0.62)},
        "direct": {"stage1": _report(0.60, eo=0.30)},
    }
    checks = ordering_checks(reports)
    assert len(checks) == 7
    assert all(c.passed for c in checks), [c for c in checks if not c.passed]


def test_ordering_checks_flag_small_stage2_gain():
    checks = ordering_checks({"full": {"stage1": _report(0.80), "stage2": _report(0.81)}})
    assert [(c.name, c.passed) for c in checks] == [("stage 2 improves stage 1", False)]


def test_summary_table_columns():
    table = summary_table({"direct": {"stage1": _report(0.6)}})
    assert list(table.columns) == ["variant", "stage", "aauc", "afar", "afrr", "combined", "acc1", "eo_gap"]
    assert table["eo_gap"].isna().all()


def test_curve_checks():
    good = [CurvePoint(1, 0.60, 0.75), CurvePoint(10, 0.80, 0.85), CurvePoint(30, 0.86, 0.855)]
    assert all(c.passed for c in curve_checks(good))
    flat = [CurvePoint(1, 0.60, 0.62), CurvePoint(10, 0.80, 0.70)]
    assert [c.passed for c in curve_checks(flat)] == [True, False, False]
    assert curve_checks([]) == []
