"""Error metrics in knots, Saffir-Simpson confusion matrix and the report table."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .models import CATEGORIES, categorize_many


def _pair(yhat, y, min_len=1):
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if yhat.shape != y.shape:
        raise ConfigError(f"prediction/label length mismatch: {yhat.size} vs {y.size}")
    if y.size < min_len:
        raise DataError(f"need at least {min_len} samples, got {y.size}")
    return yhat, y


def rmse(yhat, y):
    yhat, y = _pair(yhat, y)
    return float(np.sqrt(np.mean((yhat - y) ** 2)))


def mae(yhat, y):
    yhat, y = _pair(yhat, y)
    return float(np.mean(np.abs(yhat - y)))


def bias(yhat, y):
    yhat, y = _pair(yhat, y)
    return float(np.mean(yhat - y))


def relative_rmse(yhat, y):
    """``sqrt(sum((yhat - y)**2) / (N - 1)) / mean(yhat)``.

    Note the sample (N - 1) denominator and the normalization by the mean
    *prediction*, not the mean label.
    """
    yhat, y = _pair(yhat, y, min_len=2)
    avg = float(np.mean(yhat))
    if avg == 0:
        raise ConfigError("relative_rmse is undefined when the mean prediction is zero")
    return float(np.sqrt(np.sum((yhat - y) ** 2) / (y.size - 1)) / avg)


def confusion_matrix(yhat, y):
    """7x7 counts, rows = true category, columns = predicted category."""
    yhat, y = _pair(yhat, y)
    t = categorize_many(y)
    p = categorize_many(yhat)
    k = len(CATEGORIES)
    return np.bincount(t * k + p, minlength=k * k).reshape(k, k)


def classification_scores(conf):
    """Macro precision/recall/F1 over categories that occur in the truth.

    A category never predicted has precision 0; F1 of a class with zero
    precision and recall is 0.
    """
    conf = np.asarray(conf)
    present = np.flatnonzero(conf.sum(axis=1) > 0)
    precision, recall, f1 = [], [], []
    for c in present:
        tp = conf[c, c]
        pred = conf[:, c].sum()
        true = conf[c, :].sum()
        p = tp / pred if pred else 0.0
        r = tp / true
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(precision)), float(np.mean(recall)), float(np.mean(f1))


def confusion_and_report(yhat, y):
    conf = confusion_matrix(yhat, y)
    p, r, f = classification_scores(conf)
    return conf, {"precision": p, "recall": r, "f1": f}


@dataclass
class EvalReport:
    rmse: float
    mae: float
    bias: float
    relative_rmse: float
    confusion: list
    precision: float
    recall: float
    f1: float
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["categories"] = [c.code for c in CATEGORIES]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_predictions(yhat, y, **extra):
    yhat, y = _pair(yhat, y)
    conf, scores = confusion_and_report(yhat, y)
    return EvalReport(
        rmse=rmse(yhat, y),
        mae=mae(yhat, y),
        bias=bias(yhat, y),
        relative_rmse=relative_rmse(yhat, y) if y.size >= 2 else math.nan,
        confusion=conf.tolist(),
        precision=scores["precision"],
        recall=scores["recall"],
        f1=scores["f1"],
        n=int(y.size),
        extra=extra,
    )


def evaluate(predictor, dataset, **extra):
    """Run ``predictor`` once over ``dataset`` and compute every metric.

    ``predictor`` is anything with ``predict(images) -> speeds`` or a plain
    callable. Returns ``(EvalReport, predictions)``.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    images, y = dataset.arrays()
    fn = predictor.predict if hasattr(predictor, "predict") else predictor
    yhat = np.asarray(fn(images), dtype=np.float64)
    return report_from_predictions(yhat, y, **extra), yhat


TABLE_ROWS = (("RMSE", "rmse"), ("MAE", "mae"), ("Bias", "bias"), ("Relative RMSE", "relative_rmse"))


def render_table(reports):
    """Plain-text table with one column per named report (RMSE, MAE, Bias, Relative RMSE rows)."""
    names = list(reports)
    width = max([len("Evaluation Metric")] + [len(n) for n in names]) + 2
    lines = ["Evaluation Metric".ljust(width) + "".join(n.rjust(width) for n in names)]
    lines.append("-" * (width * (len(names) + 1)))
    for label, attr in TABLE_ROWS:
        cells = "".join(f"{getattr(reports[n], attr):.2f}".rjust(width) for n in names)
        lines.append(label.ljust(width) + cells)
    return "\n".join(lines) + "\n"


def render_confusion(report):
    codes = [c.code for c in CATEGORIES]
    lines = ["true\\pred " + " ".join(f"{c:>6}" for c in codes)]
    for code, row in zip(codes, report.confusion):
        lines.append(f"{code:>9} " + " ".join(f"{v:>6d}" for v in row))
    lines.append(f"precision {report.precision:.2f}  recall {report.recall:.2f}  f1 {report.f1:.2f}")
    return "\n".join(lines) + "\n"
