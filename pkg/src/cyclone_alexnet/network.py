"""AlexNet-style wind-speed regressor.

Five conv stages, each ``conv3x3 -> maxpool2x2 -> batchnorm -> relu``,
followed by two fully connected layers. The second fc layer has one unit whose
output is the log wind speed; predictions are its exponential, so they are
always positive and the log-error loss reduces to squared error on the head.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError
from .rng import make_rng

N_STAGES = 5
CHECKPOINT_FORMAT = "cyclone-alexnet-model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    conv_channels: tuple = (4, 8, 16, 16, 16)
    fc_widths: tuple = (32, 1)
    dropout_rate: float = 0.5
    l2_coeff: float = 1e-4
    head: str = "log-speed"
    # constant added to the head so an untrained net starts near 50 kt
    log_speed_offset: float = 3.9
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))
        self.validate()

    def validate(self):
        if len(self.conv_channels) != N_STAGES:
            raise ConfigError(f"need exactly {N_STAGES} conv stages, got {len(self.conv_channels)}")
        if len(self.fc_widths) != 2:
            raise ConfigError(f"need exactly 2 fully connected layers, got {len(self.fc_widths)}")
        if any(c < 1 for c in self.conv_channels + self.fc_widths):
            raise ConfigError("layer widths must be positive")
        if self.fc_widths[1] != 1:
            raise ConfigError("the last fully connected layer must have width 1")
        if self.input_size < 2**N_STAGES or self.input_size % 2**N_STAGES:
            raise ConfigError(f"input_size must be a positive multiple of {2 ** N_STAGES}, got {self.input_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.l2_coeff < 0:
            raise ConfigError("l2_coeff must be nonnegative")
        if self.head != "log-speed":
            raise ConfigError(f"unsupported head {self.head!r}")

    @property
    def final_extent(self):
        return self.input_size // 2**N_STAGES

    @property
    def flat_features(self):
        return self.conv_channels[-1] * self.final_extent**2

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# 366-pixel imagery is resized to 352 (divisible by 32); ~4.8M parameters.
REFERENCE_CONFIG = NetworkConfig(
    input_size=352,
    conv_channels=(64, 128, 192, 192, 128),
    fc_widths=(256, 1),
    dropout_rate=0.5,
    l2_coeff=1e-4,
)

TEST_CONFIG = NetworkConfig(input_size=64, conv_channels=(4, 8, 16, 16, 16), fc_widths=(32, 1))


def expected_param_count(config):
    """Closed-form trainable-parameter count for ``config``."""
    total, c_in = 0, 1
    for c in config.conv_channels:
        total += c_in * c * 9 + c  # kernel + bias
        total += 2 * c  # bn gamma + beta
        c_in = c
    f1 = config.fc_widths[0]
    total += config.flat_features * f1 + f1
    total += f1 * 1 + 1
    return total


def _he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Model:
    """Parameters and buffers of one network plus its forward pass.

    ``params`` maps names to trainable :class:`Tensor` objects; ``buffers``
    holds the batchnorm running statistics as plain arrays.
    """

    def __init__(self, config, params, buffers, mode="eval"):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.mode = mode

    @property
    def dtype(self):
        return self.params["conv1.kernel"].dtype

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def weight_names(self):
        """Names of conv and fc weights (the L2-regularized set)."""
        return [n for n in self.params if n.endswith(".kernel") or n.endswith(".weight")]

    def copy(self):
        params = {k: T.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return Model(self.config, params, buffers, self.mode)

    def state_arrays(self):
        """All arrays in checkpoint order: parameters, then running stats."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    # forward pieces ------------------------------------------------------

    def _check_input(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise DimensionError(
                f"expected input [N,1,{s},{s}], got {tuple(x.shape)}", axes=("input.C", "input.H", "input.W")
            )

    def stage(self, i, x):
        """Run conv stage ``i`` (1-based) on ``x``."""
        p, cfg = self.params, self.config
        x = T.conv2d(x, p[f"conv{i}.kernel"], p[f"conv{i}.bias"], stride=1, padding="same")
        x = T.maxpool2d(x)
        x = T.batchnorm(
            x,
            p[f"bn{i}.gamma"],
            p[f"bn{i}.beta"],
            self.buffers[f"bn{i}.running_mean"],
            self.buffers[f"bn{i}.running_var"],
            training=self.mode == "train",
            eps=cfg.bn_eps,
            momentum=cfg.bn_momentum,
        )
        return T.relu(x)

    def features(self, x, upto=N_STAGES):
        for i in range(1, upto + 1):
            x = self.stage(i, x)
        return x

    def head_from(self, start, act, rng=None):
        """Log-speed head output given the activation after stage ``start``."""
        x = act
        for i in range(start + 1, N_STAGES + 1):
            x = self.stage(i, x)
        p = self.params
        x = x.reshape(x.shape[0], -1)
        x = T.relu(T.dense(x, p["fc1.weight"], p["fc1.bias"]))
        x = T.dropout(x, self.config.dropout_rate, self.mode == "train", rng)
        x = T.dense(x, p["fc2.weight"], p["fc2.bias"])
        return x.reshape(x.shape[0]) + self.config.log_speed_offset

    def log_speed(self, images, rng=None):
        """Graph-building forward pass: [N,1,H,W] tensor -> [N] log speeds."""
        x = images if isinstance(images, T.Tensor) else T.Tensor(np.asarray(images, dtype=self.dtype))
        self._check_input(x)
        return self.head_from(0, x, rng)

    def predict(self, images, batch_size=256):
        """Eval-mode wind speeds (knots) for ``images`` of shape [N,H,W] or [N,1,H,W]."""
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[:, None]
        mode = self.mode
        self.mode = "eval"
        try:
            out = []
            with T.no_grad():
                for start in range(0, len(images), batch_size):
                    out.append(np.exp(self.log_speed(images[start : start + batch_size]).data))
        finally:
            self.mode = mode
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)


def build_alexnet(config, seed, dtype=np.float32):
    """Fresh model with He-uniform conv/fc weights, zero biases, gamma=1, beta=0."""
    config.validate()
    rng = make_rng(seed, 0)
    params, buffers = {}, {}

    def put(name, arr):
        params[name] = T.Tensor(arr, requires_grad=True, name=name)

    c_in = 1
    for i, c in enumerate(config.conv_channels, start=1):
        put(f"conv{i}.kernel", _he_uniform(rng, (c, c_in, 3, 3), c_in * 9, dtype))
        put(f"conv{i}.bias", np.zeros(c, dtype=dtype))
        put(f"bn{i}.gamma", np.ones(c, dtype=dtype))
        put(f"bn{i}.beta", np.zeros(c, dtype=dtype))
        buffers[f"bn{i}.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"bn{i}.running_var"] = np.ones(c, dtype=dtype)
        c_in = c
    f0, f1 = config.flat_features, config.fc_widths[0]
    put("fc1.weight", _he_uniform(rng, (f0, f1), f0, dtype))
    put("fc1.bias", np.zeros(f1, dtype=dtype))
    put("fc2.weight", _he_uniform(rng, (f1, 1), f1, dtype))
    put("fc2.bias", np.zeros(1, dtype=dtype))
    return Model(config, params, buffers, mode="eval")


def forward(model, batch, mode="eval", rng=None):
    """Predicted wind speeds in knots for ``batch`` [N,1,H,W].

    Train mode uses batch statistics (and updates the running ones) and needs
    ``rng`` for dropout.
    """
    if mode == "eval":
        return model.predict(batch)
    prev = model.mode
    model.mode = mode
    try:
        with T.no_grad():
            return np.exp(model.log_speed(batch, rng=rng).data)
    finally:
        model.mode = prev


def param_count(model):
    return int(sum(t.size for t in model.params.values()))


# checkpoints -----------------------------------------------------------------

BLOB_NAME = "tensors.bin"


def save_checkpoint(model, path):
    """Write ``manifest.json`` + ``tensors.bin`` (little-endian float32) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "length": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "blob": BLOB_NAME,
        "blob_length": offset,
        "tensors": entries,
    }
    tmp = path / (BLOB_NAME + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / BLOB_NAME)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    try:
        return json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"no manifest.json in {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest.json in {path} is not valid JSON: {e}") from e


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; validates lengths and checksums first."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a single-model checkpoint (format={manifest.get('format')!r})")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing tensor blob in {path}") from e
    if len(blob) != manifest["blob_length"]:
        raise CheckpointError(f"tensor blob is {len(blob)} bytes, manifest says {manifest['blob_length']}")
    try:
        config = NetworkConfig.from_dict(manifest["config"])
    except (TypeError, ConfigError) as e:
        raise CheckpointError(f"bad config in manifest: {e}") from e

    reference = build_alexnet(config, seed=0)
    expected = reference.state_arrays()
    arrays = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        raw = blob[entry["offset"] : entry["offset"] + entry["length"]]
        if len(raw) != entry["length"]:
            raise CheckpointError(f"tensor {name!r} runs past the end of the blob")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if name not in expected or tuple(entry["shape"]) != expected[name].shape or arr.size != expected[name].size:
            raise CheckpointError(f"tensor {name!r} does not match the config")
        arrays[name] = arr.reshape(entry["shape"])
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")

    for name, t in reference.params.items():
        t.data = arrays[name].copy()
    for name in reference.buffers:
        reference.buffers[name] = arrays[name].copy()
    return reference.eval()
