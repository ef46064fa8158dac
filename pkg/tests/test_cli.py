import io
import json
import subprocess
import sys

import numpy as np
import pytest

from prevshift.cli import main
from prevshift.data import ScoreDataset, SyntheticSpec, read_scores, synth_generate, write_scores
from prevshift.experiments import ExperimentConfig, read_results, synthetic_task


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def scores(tmp_path):
    spec = SyntheticSpec(((1.5, 0.0), (0.0, 1.5)), n_dev=3000, t_distort=2.0, b_distort=(0.4, -0.4))
    path = tmp_path / "cal.csv"
    write_scores(synth_generate(spec, seed=1).dev, path)
    return path


def test_calibrate_then_evaluate(tmp_path, scores):
    map_path = tmp_path / "map.json"
    code, out, _ = run("calibrate", "--scores", scores, "--kind", "affine", "--out", map_path)
    assert code == 0
    m = json.loads(map_path.read_text())
    assert m["kind"] == "affine" and 1.7 < m["t"] < 2.3
    code, out, _ = run("evaluate", "--scores", scores, "--map", map_path, "--metrics", "expected_cost,accuracy,cwce")
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert [r["metric_id"] for r in records] == ["expected_cost", "accuracy", "cwce"]
    assert records[0]["value"] == pytest.approx(1 - records[1]["value"], abs=1e-12)


def test_calibrate_with_weights(tmp_path, scores):
    map_path = tmp_path / "map.json"
    code, _, _ = run("calibrate", "--scores", scores, "--dep-prev", "0.9,0.1", "--out", map_path)
    assert code == 0
    b = json.loads(map_path.read_text())["b"]
    assert b[0] - b[1] > 1.5


def test_decide_threshold_and_bayes(tmp_path):
    path = tmp_path / "s.csv"
    logits = np.log(np.array([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]]))
    write_scores(ScoreDataset(logits, [0, 1, 1], 2), path)
    code, out, _ = run("decide", "--scores", path, "--rule", "threshold", "--threshold", 0.5, "--positive-class", 0)
    assert code == 0 and out.split() == ["prediction", "0", "0", "1"]
    costs = tmp_path / "c.json"
    costs.write_text(json.dumps([[0, 1], [5, 0]]))
    code, out, _ = run("decide", "--scores", path, "--rule", "bayes", "--costs", costs)
    assert out.split() == ["prediction", "1", "1", "1"]


def test_evaluate_prevalence_override(tmp_path):
    path = tmp_path / "s.csv"
    logits = np.log(np.eye(2)[[0, 0, 1, 0]] * 0.98 + 0.01)
    write_scores(ScoreDataset(logits, [0, 0, 1, 1], 2), path)
    code, out, _ = run("evaluate", "--scores", path, "--metrics", "ec", "--prev-override", "0.9,0.1")
    assert code == 0
    assert json.loads(out)["value"] == pytest.approx(0.05)


def test_subsample_and_perturb(tmp_path, scores):
    out_path = tmp_path / "sub.csv"
    code, out, _ = run("subsample", "--scores", scores, "--ir", 4, "--seed", 3, "--out", out_path)
    assert code == 0
    counts = read_scores(out_path).class_counts()
    assert max(counts) / min(counts) == pytest.approx(4, rel=0.01)
    code, out, _ = run("perturb", "--prev", "0.5,0.5", "--std", 0, "--seed", 1)
    assert out.strip() == "0.5,0.5"
    code, out, _ = run("perturb", "--prev", "0.9,0.1", "--std", 0.2, "--seed", 1)
    q = [float(v) for v in out.strip().split(",")]
    assert sum(q) == pytest.approx(1.0) and min(q) > 0


def test_synth_command(tmp_path):
    code, out, _ = run("synth", "--task", "synth-bin-1", "--seed", 0, "--out-dir", tmp_path)
    assert code == 0
    assert len(read_scores(tmp_path / "dev.csv")) == 40000


def test_experiment_command(tmp_path):
    cfg = ExperimentConfig(
        tasks=(synthetic_task("t", 2, 2.0, n=4000),),
        ir_grid=(1.0, 2.0),
        variants=("none",),
        metrics=("expected_cost",),
        perturbation_stds=(0.1,),
    )
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out_path = tmp_path / "res.csv"
    code, out, _ = run("experiment", "--config", cfg_path, "--which", "calibration", "--out", out_path)
    assert code == 0
    assert len(read_results(out_path)) == 4


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["calibrate", "--scores", "x.csv"],
        ["perturb", "--prev", "0.5,0.6", "--std", "0.1", "--seed", "0"],
        ["decide", "--scores", "x.csv", "--rule", "threshold"],
        ["bogus"],
    ],
)
def test_usage_errors_exit_1(argv):
    code, _, err = run(*argv)
    assert code == 1 and err


def test_data_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("logit_0,logit_1,label\n0.1,zz,0\n")
    code, _, err = run("evaluate", "--scores", bad)
    assert code == 2 and "line 2" in err
    code, _, _ = run("evaluate", "--scores", tmp_path / "missing.csv")
    assert code == 2


def test_failed_command_writes_nothing(tmp_path):
    path = tmp_path / "s.csv"
    write_scores(ScoreDataset(np.zeros((4, 3)), [0, 1, 2, 0], 3), path)
    out_path = tmp_path / "preds.csv"
    code, _, _ = run("decide", "--scores", path, "--rule", "threshold", "--threshold", 0.5, "--out", out_path)
    assert code == 2 and not out_path.exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "prevshift", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()


def test_cli_matches_library_pipeline(tmp_path, scores):
    from prevshift.calibration import CalibrationMap, apply_map, fit_calibration, prevalence_weights
    from prevshift.data import empirical_prevalence
    from prevshift.metrics import MetricSpec, evaluate_metric

    map_path = tmp_path / "map.json"
    code, _, _ = run(
        "calibrate", "--scores", scores, "--kind", "affine", "--cal-prev", "auto",
        "--dep-prev", "0.909,0.091", "--out", map_path,
    )
    assert code == 0
    ds = read_scores(scores)
    p_dep = np.array([0.909, 0.091])
    expected = fit_calibration(ds, "affine", prevalence_weights(p_dep / p_dep.sum(), empirical_prevalence(ds)))
    assert map_path.read_text() == expected.to_json() + "\n"

    code, out, _ = run(
        "evaluate", "--scores", scores, "--map", map_path, "--rule", "argmax", "--metrics", "ec",
        "--costs", "zero-one", "--prev-override", "0.909,0.091",
    )
    assert code == 0
    s = apply_map(CalibrationMap.from_json(map_path.read_text()), ds)
    lib = evaluate_metric(MetricSpec("ec", prevalence=(0.909, 0.091)), s, ds.labels)
    assert json.loads(out)["value"] == lib.value
