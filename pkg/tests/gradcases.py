"""Randomized finite-difference cases shared by the unit and acceptance suites.

Each builder takes a seed and returns ``(fn, inputs)`` for ``grad_check``.
Losses are weighted sums against a fixed random tensor, because a plain sum
has a zero input gradient through batchnorm and would hide errors.
"""

import numpy as np

from cyclone_alexnet import tensor as T
from cyclone_alexnet.training import log_space_mse, msle


def _rng(seed, salt):
    return np.random.default_rng([seed, salt])


def _weighted(out_shape, rng):
    w = T.Tensor(rng.normal(size=out_shape))
    return lambda out: T.tsum(T.mul(out, w))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def conv_case(seed):
    rng = _rng(seed, 1)
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7), rng.integers(3, 7)
    padding = ("same", "valid")[seed % 2]
    x = T.Tensor(rng.normal(size=(n, c, h, w)))
    k = T.Tensor(rng.normal(size=(o, c, 3, 3)))
    b = T.Tensor(rng.normal(size=(o,)))
    ho, wo = (h, w) if padding == "same" else (h - 2, w - 2)
    loss = _weighted((n, o, ho, wo), rng)
    return (lambda x, k, b: loss(T.conv2d(x, k, b, padding=padding))), [x, k, b]


def maxpool_case(seed):
    rng = _rng(seed, 2)
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = 2 * rng.integers(1, 4), 2 * rng.integers(1, 4)
    # distinct values so no window is within 2h of a tie
    vals = rng.permutation(n * c * h * w).astype(np.float64) * 0.1
    x = T.Tensor(vals.reshape(n, c, h, w))
    loss = _weighted((n, c, h // 2, w // 2), rng)
    return (lambda x: loss(T.maxpool2d(x))), [x]


def batchnorm_case(seed, training=True):
    rng = _rng(seed, 3)
    n, c = rng.integers(2, 9), rng.integers(1, 4)
    h, w = rng.integers(1, 4), rng.integers(1, 4)
    x = T.Tensor(rng.normal(size=(n, c, h, w)) * 2 + 1)
    gamma = T.Tensor(rng.normal(size=(c,)))
    beta = T.Tensor(rng.normal(size=(c,)))
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    loss = _weighted((n, c, h, w), rng)

    def fn(x, gamma, beta):
        # fresh copies so running-stat updates cannot leak between calls
        return loss(T.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), training))

    return fn, [x, gamma, beta]


def dense_case(seed):
    rng = _rng(seed, 4)
    n, f, g = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 4)
    x = T.Tensor(rng.normal(size=(n, f)))
    wt = T.Tensor(rng.normal(size=(f, g)))
    b = T.Tensor(rng.normal(size=(g,)))
    loss = _weighted((n, g), rng)
    return (lambda x, wt, b: loss(T.dense(x, wt, b))), [x, wt, b]


def relu_case(seed):
    rng = _rng(seed, 5)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    x = T.Tensor(_away_from_zero(rng, shape))
    loss = _weighted(shape, rng)
    return (lambda x: loss(T.relu(x))), [x]


def dropout_case(seed):
    rng = _rng(seed, 6)
    shape = tuple(rng.integers(1, 6, size=2))
    x = T.Tensor(rng.normal(size=shape))
    loss = _weighted(shape, rng)
    rate = float(rng.uniform(0.1, 0.7))
    # a fixed mask: the same generator state for every evaluation
    state = rng.bit_generator.state

    def fn(x):
        r = np.random.default_rng()
        r.bit_generator.state = state
        return loss(T.dropout(x, rate, True, r))

    return fn, [x]


def msle_case(seed):
    rng = _rng(seed, 7)
    n = int(rng.integers(1, 20))
    yhat = T.Tensor(rng.uniform(5.0, 200.0, size=n))
    y = rng.uniform(5.0, 200.0, size=n)
    return (lambda yhat: msle(yhat, y)), [yhat]


def log_mse_case(seed):
    rng = _rng(seed, 8)
    n = int(rng.integers(1, 20))
    s = T.Tensor(rng.normal(4.0, 0.5, size=n))
    y = rng.uniform(5.0, 200.0, size=n)
    return (lambda s: log_space_mse(s, y)), [s]


def chain_case(seed):
    """conv -> batchnorm -> relu -> maxpool -> dense, the full stage chain."""
    rng = _rng(seed, 9)
    n, c, o = 3, 2, 3
    x = T.Tensor(rng.normal(size=(n, c, 4, 4)))
    k = T.Tensor(rng.normal(size=(o, c, 3, 3)) * 0.5)
    b = T.Tensor(rng.normal(size=(o,)))
    gamma = T.Tensor(rng.uniform(0.5, 1.5, size=o))
    beta = T.Tensor(rng.normal(size=o))
    wt = T.Tensor(rng.normal(size=(o * 4, 2)))
    bd = T.Tensor(rng.normal(size=2))
    loss = _weighted((n, 2), rng)

    def fn(x, k, b, gamma, beta, wt, bd):
        a = T.conv2d(x, k, b)
        a = T.batchnorm(a, gamma, beta, np.zeros(o), np.ones(o), True)
        a = T.maxpool2d(T.relu(a))
        return loss(T.dense(T.reshape(a, (n, -1)), wt, bd))

    return fn, [x, k, b, gamma, beta, wt, bd]


CASES = {
    "conv2d": conv_case,
    "maxpool2d": maxpool_case,
    "batchnorm-train": batchnorm_case,
    "batchnorm-eval": lambda s: batchnorm_case(s, training=False),
    "dense": dense_case,
    "relu": relu_case,
    "dropout": dropout_case,
    "msle": msle_case,
    "log-space-mse": log_mse_case,
}
