import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cyclone_alexnet.errors import ConfigError, DataError
from cyclone_alexnet.evaluation import (
    bias,
    classification_scores,
    confusion_and_report,
    confusion_matrix,
    evaluate,
    mae,
    relative_rmse,
    render_confusion,
    render_table,
    report_from_predictions,
    rmse,
)

from fixtures import make_index

speeds = st.lists(st.floats(1.0, 250.0), min_size=2, max_size=60)


def brute(yhat, y):
    """Plain-Python loops, independent of the vectorized code."""
    n = len(y)
    sq = sum((a - b) ** 2 for a, b in zip(yhat, y))
    return {
        "rmse": math.sqrt(sq / n),
        "mae": sum(abs(a - b) for a, b in zip(yhat, y)) / n,
        "bias": sum(a - b for a, b in zip(yhat, y)) / n,
        "relative_rmse": math.sqrt(sq / (n - 1)) / (sum(yhat) / n),
    }


def test_worked_examples():
    y = [50.0, 60.0]
    yhat = [53.0, 56.0]
    assert rmse(yhat, y) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert round(rmse(yhat, y), 5) == 3.53553
    assert mae(yhat, y) == 3.5 and bias(yhat, y) == -0.5
    assert relative_rmse([10.0, 20.0], [13.0, 16.0]) == pytest.approx(1 / 3, abs=1e-12)
    for f in (rmse, mae, bias, relative_rmse):
        assert f(y, y) == 0.0


def test_errors():
    with pytest.raises(DataError):
        rmse([], [])
    with pytest.raises(DataError):
        relative_rmse([1.0], [2.0])
    with pytest.raises(ConfigError):
        mae([1.0, 2.0], [1.0])


@given(speeds, st.integers(0, 10**6))
def test_metrics_match_brute_force(y, seed):
    rng = np.random.default_rng(seed)
    yhat = list(np.array(y) + rng.normal(0, 20, len(y)).clip(-0.9 * np.array(y)))
    ref = brute(yhat, y)
    got = {"rmse": rmse(yhat, y), "mae": mae(yhat, y), "bias": bias(yhat, y), "relative_rmse": relative_rmse(yhat, y)}
    for k in ref:
        assert got[k] == pytest.approx(ref[k], rel=1e-9, abs=1e-12)
    assert got["mae"] <= got["rmse"] * (1 + 1e-12)
    assert abs(got["bias"]) <= got["rmse"] * (1 + 1e-12)


@given(speeds, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(y, r):
    yhat = [v * 1.1 + 3 for v in y]
    order = list(range(len(y)))
    r.shuffle(order)
    a = report_from_predictions(yhat, y)
    b = report_from_predictions([yhat[i] for i in order], [y[i] for i in order])
    for k in ("rmse", "mae", "bias", "relative_rmse"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12)
    assert a.confusion == b.confusion


def test_constructed_confusion_case():
    codes = {"TD": 20.0, "TS": 50.0, "H1": 70.0}
    y = [codes[c] for c in ["TD", "TD", "TS", "TS", "H1", "H1"]]
    yhat = [codes[c] for c in ["TD", "TS", "TS", "TS", "H1", "TD"]]
    conf, scores = confusion_and_report(yhat, y)
    expected = np.zeros((7, 7), dtype=int)
    expected[0, 0] = expected[0, 1] = 1
    expected[1, 1] = 2
    expected[2, 2] = expected[2, 0] = 1
    np.testing.assert_array_equal(conf, expected)
    assert scores["precision"] == pytest.approx((1 / 2 + 2 / 3 + 1) / 3, abs=1e-12)
    assert round(scores["precision"], 4) == 0.7222
    assert scores["recall"] == pytest.approx((1 / 2 + 1 + 1 / 2) / 3)
    f1 = [2 * 0.5 * 0.5 / 1.0, 2 * (2 / 3) / (2 / 3 + 1), 2 * 0.5 / 1.5]
    assert scores["f1"] == pytest.approx(np.mean(f1))


def test_perfect_predictions_diagonal():
    y = np.array([20.0, 50, 70, 90, 100, 120, 150])
    conf = confusion_matrix(y, y)
    np.testing.assert_array_equal(conf, np.eye(7, dtype=int))
    assert classification_scores(conf) == (1.0, 1.0, 1.0)


def test_never_predicted_class_precision_zero():
    conf = np.zeros((7, 7), dtype=int)
    conf[0, 1] = 3  # every TD predicted as TS
    conf[1, 1] = 2
    p, r, f = classification_scores(conf)
    assert p == pytest.approx((0 + 2 / 5) / 2)
    assert r == pytest.approx(0.5)


@given(speeds, st.integers(0, 10**6))
def test_confusion_invariants(y, seed):
    yhat = np.array(y) * np.random.default_rng(seed).uniform(0.5, 1.5, len(y))
    conf = confusion_matrix(yhat, y)
    assert conf.sum() == len(y)
    truth = np.bincount([min(6, int(np.searchsorted([34, 64, 83, 96, 113, 137], v, side="right"))) for v in y], minlength=7)
    np.testing.assert_array_equal(conf.sum(axis=1), truth)


def test_evaluate_constant_mean_predictor():
    idx = make_index([("A", 30, 3), ("B", 55, 2), ("C", 120, 1)])
    y = idx.labels()
    rep, yhat = evaluate(lambda imgs: np.full(len(imgs), y.mean()), idx)
    assert abs(rep.bias) < 1e-12
    assert rep.rmse == pytest.approx(math.sqrt(sum((v - y.mean()) ** 2 for v in y) / len(y)), rel=1e-9)
    assert rep.n == 6


def test_evaluate_oracle_predictor():
    idx = make_index([("A", 30, 3), ("B", 55, 2), ("C", 120, 1)])
    labels = idx.labels()
    rep, _ = evaluate(lambda imgs: labels, idx)
    assert rep.rmse == rep.mae == rep.bias == rep.relative_rmse == 0.0
    assert np.trace(np.array(rep.confusion)) == 6
    with pytest.raises(DataError):
        evaluate(lambda imgs: labels, make_index([]))


def test_report_json_and_tables():
    rep = report_from_predictions([10.0, 20.0, 40.0], [12.0, 18.0, 41.0], model_kind="ensemble")
    d = json.loads(rep.to_json())
    assert d["categories"] == ["TD", "TS", "H1", "H2", "H3", "H4", "H5"]
    assert d["extra"]["model_kind"] == "ensemble"
    assert rep.to_json() == report_from_predictions([10.0, 20.0, 40.0], [12.0, 18.0, 41.0], model_kind="ensemble").to_json()
    table = render_table({"Global": rep, "Distributed": rep})
    lines = table.splitlines()
    assert lines[0].split() == ["Evaluation", "Metric", "Global", "Distributed"]
    assert [ln.split()[0] for ln in lines[2:]] == ["RMSE", "MAE", "Bias", "Relative"]
    assert "precision" in render_confusion(rep)
