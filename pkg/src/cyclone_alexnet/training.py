"""Loss, optimizer and training loop."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .rng import make_rng

log = logging.getLogger(__name__)


def _check_positive(name, arr):
    if arr.size == 0:
        raise ConfigError(f"{name} is empty")
    if not np.all(arr > 0):
        raise ConfigError(f"{name} must be strictly positive (log of a nonpositive speed)")


def msle(yhat, y):
    """Mean squared log error, ``mean((log yhat - log y)**2)``.

    ``yhat`` may be a :class:`Tensor`, in which case the result is a scalar
    tensor differentiable with respect to it; otherwise a float is returned.
    Nonpositive inputs raise instead of being clamped.
    """
    y = np.asarray(y, dtype=np.float64 if not isinstance(yhat, T.Tensor) else yhat.dtype)
    raw = yhat.data if isinstance(yhat, T.Tensor) else np.asarray(yhat, dtype=np.float64)
    if raw.shape != y.shape:
        raise DimensionError(f"msle: yhat {raw.shape} vs y {y.shape}", axes=("yhat", "y"))
    _check_positive("yhat", raw)
    _check_positive("y", y)
    if isinstance(yhat, T.Tensor):
        return T.mean((T.log(yhat) - np.log(y)) ** 2)
    return float(np.mean((np.log(raw) - np.log(y)) ** 2))


def log_space_mse(log_pred, y):
    """MSLE evaluated on the head's log-speed output directly."""
    y = np.asarray(y)
    _check_positive("y", y)
    return T.mean((log_pred - np.log(y).astype(log_pred.dtype)) ** 2)


def l2_penalty(model, coeff):
    """``coeff * sum(w**2)`` over conv kernels and fc weights (never batchnorm)."""
    if coeff < 0:
        raise ConfigError("l2 coefficient must be nonnegative")
    names = model.weight_names()
    if coeff == 0 or not names:
        return T.Tensor(np.zeros((), dtype=model.dtype))
    total = None
    for name in names:
        w = model.params[name]
        term = (w * w).sum()
        total = term if total is None else total + term
    return total * coeff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` maps names to tensors (or arrays); ``grads`` maps the same names
    to gradient arrays.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        data = p.data if isinstance(p, T.Tensor) else p
        g = np.asarray(grads[name])
        if g.shape != data.shape:
            raise DimensionError(f"adam: gradient for {name!r} has shape {g.shape}, param {data.shape}", axes=(name,))
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        data -= update.astype(data.dtype)
    return params, state


@dataclass
class TrainHyper:
    epochs: int = 10
    steps_per_epoch: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stopping: bool = False
    patience: int = 10
    rotation_fraction: float = 0.5
    rotation_policy: str = "quarter-turns"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class TrainReport:
    train_msle: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    model: object = None
    stopped_early: bool = False

    @property
    def epochs(self):
        return len(self.train_msle)

    def rows(self):
        for i, (loss, rmse, sec) in enumerate(zip(self.train_msle, self.val_rmse, self.seconds), start=1):
            yield {"epoch": i, "train_msle": loss, "val_rmse": rmse, "seconds": sec}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_msle", "val_rmse", "seconds"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(
                    {
                        "epoch": row["epoch"],
                        "train_msle": repr(float(row["train_msle"])),
                        "val_rmse": "" if row["val_rmse"] is None else repr(float(row["val_rmse"])),
                        "seconds": f"{row['seconds']:.3f}",
                    }
                )


def _rmse(yhat, y):
    return float(np.sqrt(np.mean((np.asarray(yhat, np.float64) - np.asarray(y, np.float64)) ** 2)))


def train(model, sampler, hyper, val_set=None, seed=0):
    """Minimize log-space MSE plus L2 over batches drawn from ``sampler``.

    ``sampler`` is a :class:`~cyclone_alexnet.dataset.BatchSampler` (anything
    with ``sample(rng) -> (images, speeds)`` and ``default_steps``).
    ``val_set`` is an optional ``(images, speeds)`` pair scored after every
    epoch. Returns a :class:`TrainReport`; the model is left in eval mode.
    """
    hyper.validate()
    steps = hyper.steps_per_epoch or sampler.default_steps()
    state = AdamState(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)
    batch_rng = make_rng(seed, 1)
    dropout_rng = make_rng(seed, 2)
    coeff = model.config.l2_coeff
    report = TrainReport(model=model)
    best = (math.inf, None)
    since_best = 0
    global_step = 0

    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for _ in range(steps):
            global_step += 1
            images, speeds = sampler.sample(batch_rng)
            log_pred = model.log_speed(images[:, None].astype(model.dtype), rng=dropout_rng)
            data_loss = log_space_mse(log_pred, speeds)
            loss = data_loss + l2_penalty(model, coeff) if coeff > 0 else data_loss
            if not np.isfinite(loss.data).all():
                model.eval()
                raise NumericError(f"non-finite loss at epoch {epoch}, step {global_step}")
            grads = T.backward(loss, model.params)
            adam_step(model.params, grads, state)
            losses.append(float(data_loss.data))
        model.eval()
        rmse = None
        if val_set is not None and len(val_set[1]):
            rmse = _rmse(model.predict(val_set[0]), val_set[1])
        report.train_msle.append(float(np.mean(losses)))
        report.val_rmse.append(rmse)
        report.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d: train_msle=%.5f val_rmse=%s", epoch, report.train_msle[-1], rmse)

        if hyper.early_stopping and rmse is not None:
            if rmse < best[0]:
                best = (rmse, model.copy())
                since_best = 0
            else:
                since_best += 1
                if since_best >= hyper.patience:
                    report.stopped_early = True
                    break

    if report.stopped_early and best[1] is not None:
        for name, t in best[1].params.items():
            model.params[name].data = t.data
        model.buffers.update(best[1].buffers)
    model.eval()
    return report
