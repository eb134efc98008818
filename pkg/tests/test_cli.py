import json
import subprocess
import sys

import numpy as np
import pytest

from spectf.cli import main


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--scenario", "b", "--target", "f2", "--n", 80, "--p", 30,
                "--seed", 1, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def model(sim, tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    assert _run("fit", "--data", sim / "data.csv", "--orders", "4,1", "--holdout",
                sim / "validation.csv", "--seed", 2, "--out", d) == 0
    return d


def test_simulate_is_reproducible(sim, tmp_path):
    assert _run("simulate", "--scenario", "b", "--target", "f2", "--n", 80, "--p", 30,
                "--seed", 1, "--out", tmp_path) == 0
    assert _files(tmp_path) == _files(sim)
    header = (sim / "data.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["id", "z1", "z2", "z3", "z4", "z5", "response"]
    assert len(header) == 37


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPECTF_SEED", "1")
    assert _run("simulate", "--scenario", "a", "--n", 20, "--p", 10, "--out", tmp_path / "e") == 0
    assert _run("simulate", "--scenario", "a", "--n", 20, "--p", 10, "--seed", 1,
                "--out", tmp_path / "s") == 0
    assert _files(tmp_path / "e") == _files(tmp_path / "s")


def test_fit_model_has_two_term_penalty(model):
    doc = json.loads((model / "model.json").read_text())
    assert [t["order"] for t in doc["penalty"]["terms"]] == [4, 1]
    report = json.loads((model / "fit_report.json").read_text())
    assert len(report["penalty"]["terms"]) == 2
    assert report["selection"] is not None


def test_fit_rerun_and_threads_byte_identical(sim, tmp_path):
    for tag, threads in (("a", 1), ("b", 1), ("c", 3)):
        assert _run("fit", "--data", sim / "data.csv", "--orders", "2", "--cv", 4, "--seed", 5,
                    "--threads", threads, "--out", tmp_path / tag) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b") == _files(tmp_path / "c")


def test_cv_command(sim, tmp_path):
    assert _run("cv", "--data", sim / "data.csv", "--orders", "1", "--cv", 3, "--seed", 1,
                "--threads", 2, "--out", tmp_path / "a") == 0
    assert _run("cv", "--data", sim / "data.csv", "--orders", "1", "--cv", 3, "--seed", 1,
                "--threads", 1, "--out", tmp_path / "b") == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    doc = json.loads((tmp_path / "a" / "cv.json").read_text())
    assert doc["folds"] == 3 and len(doc["mean"]) == len(doc["grid"]) == 50


def test_predict_matches_fit_report(sim, model, tmp_path):
    assert _run("predict", "--model", model / "model.json", "--data", sim / "data.csv",
                "--out", tmp_path) == 0
    lines = (tmp_path / "predictions.csv").read_text().splitlines()
    assert lines[0] == "id,prediction"
    pred = np.array([float(l.split(",")[1]) for l in lines[1:]])
    report = json.loads((model / "fit_report.json").read_text())
    np.testing.assert_allclose(pred, report["fitted"]["value"], rtol=0, atol=1e-12)


def test_bootstrap_outputs(sim, model, tmp_path):
    for tag, threads in (("a", 1), ("b", 2)):
        assert _run("bootstrap", "--model", model / "model.json", "--data", sim / "data.csv",
                    "--boot", 200, "--seed", 3, "--threads", threads, "--out", tmp_path / tag) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    scal = (tmp_path / "a" / "scalars.csv").read_text().splitlines()
    assert scal[0] == "covariate,lower_0.025,estimate,upper_0.975,significant"
    assert [s.split(",")[0] for s in scal[1:]] == ["intercept", "z1", "z2", "z3", "z4", "z5"]
    # gamma = (2, -1, 1, 0, 0): the first three are clearly significant
    assert [s.split(",")[-1] for s in scal[2:5]] == ["1", "1", "1"]


def test_bernoulli_fit_and_predict(tmp_path):
    assert _run("simulate", "--scenario", "c", "--target", "f2", "--n", 120, "--p", 20,
                "--seed", 4, "--out", tmp_path / "sim") == 0
    assert _run("fit", "--data", tmp_path / "sim" / "data.csv", "--family", "bernoulli",
                "--orders", "1", "--cv", 3, "--out", tmp_path / "fit") == 0
    assert _run("predict", "--model", tmp_path / "fit" / "model.json", "--data",
                tmp_path / "sim" / "validation.csv", "--out", tmp_path / "pred") == 0
    lines = (tmp_path / "pred" / "predictions.csv").read_text().splitlines()
    assert lines[0] == "id,prediction,probability,label"
    prob = np.array([float(l.split(",")[2]) for l in lines[1:]])
    assert np.all((prob > 0) & (prob < 1))
    assert _run("bootstrap", "--model", tmp_path / "fit" / "model.json", "--data",
                tmp_path / "sim" / "data.csv", "--boot", 200, "--out", tmp_path / "bad") == 1


def test_log_response_predictions(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 12))
    y = np.exp(0.2 * X @ np.linspace(0, 1, 12) + 0.1 * rng.standard_normal(40))
    rows = ["id,response," + ",".join(str(900 + 2 * j) for j in range(12))]
    rows += [f"s{i},{y[i]}," + ",".join(str(v) for v in X[i]) for i in range(40)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    assert _run("fit", "--data", tmp_path / "d.csv", "--log-response", "--aggregate", 2,
                "--lambda", 0.5, "--out", tmp_path / "fit") == 0
    assert _run("predict", "--model", tmp_path / "fit" / "model.json", "--data",
                tmp_path / "d.csv", "--out", tmp_path / "pred") == 0
    lines = (tmp_path / "pred" / "predictions.csv").read_text().splitlines()
    assert lines[0] == "id,prediction,prediction_original_scale"
    a, b = map(float, lines[1].split(",")[1:])
    assert b == pytest.approx(np.exp(a))


def test_exit_codes(sim, model, tmp_path):
    # usage errors
    assert _run("fit") == 1
    assert _run("fit", "--data", sim / "data.csv", "--orders", "x", "--out", tmp_path) == 1
    assert _run("fit", "--data", sim / "data.csv", "--lambda", "1", "--holdout",
                sim / "validation.csv", "--out", tmp_path) == 1
    # data errors
    assert _run("fit", "--data", tmp_path / "missing.csv", "--out", tmp_path) == 2
    rows = (sim / "data.csv").read_text().splitlines()
    short = [",".join(r.split(",")[:-1]) for r in rows]
    (tmp_path / "short.csv").write_text("\n".join(short) + "\n")
    assert _run("predict", "--model", model / "model.json", "--data", tmp_path / "short.csv",
                "--out", tmp_path / "p") == 2
    nan = rows[:2] + [rows[2].rsplit(",", 1)[0] + ",nan"] + rows[3:]
    (tmp_path / "nan.csv").write_text("\n".join(nan) + "\n")
    assert _run("fit", "--data", tmp_path / "nan.csv", "--lambda", "1", "--out", tmp_path / "q") == 2


def test_numerical_failure_exit_code(tmp_path):
    x = 1e-5 * np.linspace(-1, 1, 40)
    rows = ["id,response,1,2,3"] + [f"s{i},{int(v > 0)},{v},{v},{v}" for i, v in enumerate(x)]
    (tmp_path / "sep.csv").write_text("\n".join(rows) + "\n")
    assert _run("fit", "--data", tmp_path / "sep.csv", "--family", "bernoulli", "--orders", "1",
                "--no-intercept", "--lambda", "1e-10", "--out", tmp_path / "o") == 3


def test_benchmark_command(tmp_path):
    args = ["benchmark", "--reps", 10, "--n", 50, "--p", 20, "--scenarios", "a",
            "--targets", "f2,f3", "--estimators", "TF-1,SPL", "--seed", 7]
    assert _run(*args, "--threads", 1, "--out", tmp_path / "a") == 0
    assert _run(*args, "--threads", 2, "--out", tmp_path / "b") == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    lines = (tmp_path / "a" / "table1.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert _run("benchmark", "--estimators", "GAM", "--out", tmp_path / "c") == 1


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "spectf.cli", "simulate", "--n", "10", "--p", "10",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0
    assert (tmp_path / "data.csv").exists()
