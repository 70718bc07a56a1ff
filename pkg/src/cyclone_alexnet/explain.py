"""Grad-CAM for the wind-speed regressor.

The target is the scalar head output (log speed). Channel weights are the
spatial means of its gradient with respect to a conv stage's output; the map
is the ReLU of the weighted channel sum, bilinearly upsampled to the input
size and scaled into [0, 1].
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .network import N_STAGES

OVERLAY_ALPHA = 0.4


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1] at input resolution
    layer: int
    source: str = ""
    raw: np.ndarray | None = None  # ReLU'd map at activation resolution
    weights: np.ndarray | None = None  # per-channel gradient means


def normalize(cam):
    """Scale a nonnegative map into [0, 1].

    Min-max scaling when the map varies; a constant positive map becomes all
    ones and an all-zero map stays zero. Idempotent.
    """
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(cam)
    return np.zeros_like(cam)


def _interp_axis(arr, out_len, axis):
    n = arr.shape[axis]
    src = (np.arange(out_len) + 0.5) * (n / out_len) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    t = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    return a + t.reshape(shape) * (b - a)


def upsample(arr, size):
    """Bilinear resize (half-pixel centres, edge clamp); constants stay exact."""
    arr = np.asarray(arr, dtype=np.float64)
    return _interp_axis(_interp_axis(arr, size, 0), size, 1)


def _check_layer(layer):
    if not isinstance(layer, (int, np.integer)) or not 1 <= layer <= N_STAGES:
        raise ConfigError(f"layer must be a conv stage index in [1, {N_STAGES}], got {layer!r}")


def layer_gradient(model, image, layer):
    """Activation of stage ``layer`` and d(head)/d(activation), both [C, h, w]."""
    _check_layer(layer)
    size = model.config.input_size
    x = T.Tensor(np.asarray(image, dtype=model.dtype).reshape(1, 1, size, size))
    prev = model.mode
    model.eval()
    try:
        with T.no_grad():
            act = model.features(x, layer).data
        leaf = T.Tensor(act.copy(), requires_grad=True)
        head = model.head_from(layer, leaf).sum()
        T.backward(head)
    finally:
        model.mode = prev
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(act)
    return act[0], grad[0]


def grad_cam(model, image, layer=N_STAGES, source=""):
    act, grad = layer_gradient(model, image, layer)
    weights = grad.mean(axis=(1, 2)).astype(np.float64)
    cam = np.maximum(np.tensordot(weights, act.astype(np.float64), axes=1), 0.0)
    values = normalize(upsample(cam, model.config.input_size))
    return Heatmap(values=values, layer=layer, source=source, raw=cam, weights=weights)


def median_map(maps):
    """Pixelwise median; with an even count the lower middle value is used."""
    stack = np.sort(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)
    return stack[(len(stack) - 1) // 2]


def ensemble_heatmap(ensemble, image, layer=N_STAGES):
    """Per-member heatmaps and their renormalized pixelwise median."""
    members = getattr(ensemble, "members", [ensemble])
    if not members:
        raise ConfigError("empty ensemble")
    maps = [grad_cam(m, image, layer, source=f"member_{k:02d}") for k, m in enumerate(members)]
    med = median_map([h.values for h in maps])
    return maps, Heatmap(values=normalize(med), layer=layer, source="median")


# export ------------------------------------------------------------------------


def colormap(values):
    """Black-red-yellow-white ramp, monotone in every channel. Returns uint8 [H,W,3]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def to_gray8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def overlay(image, values, alpha=OVERLAY_ALPHA):
    """RGB uint8 overlay; each pixel blends the colormap in with weight ``alpha * heat``."""
    gray = to_gray8(image).astype(np.float64)[..., None].repeat(3, axis=-1)
    a = alpha * np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    blended = (1.0 - a) * gray + a * colormap(values).astype(np.float64)
    return np.round(blended).astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by this module."""
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr[..., 0] if channels == 1 else arr


def write_heatmap_csv(path, values):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(values, dtype=np.float64):
            writer.writerow([f"{v:.9g}" for v in row])


def read_heatmap_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def overlay_export(image, heatmap, prefix):
    """Write ``<prefix>_heatmap.pgm``, ``<prefix>_overlay.ppm`` and ``<prefix>_heatmap.csv``."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    image = np.asarray(image)
    if image.shape != values.shape:
        raise ConfigError(f"image {image.shape} and heatmap {values.shape} differ in shape")
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "heatmap": prefix.with_name(prefix.name + "_heatmap.pgm"),
        "overlay": prefix.with_name(prefix.name + "_overlay.ppm"),
        "csv": prefix.with_name(prefix.name + "_heatmap.csv"),
    }
    write_pgm(paths["heatmap"], to_gray8(values))
    write_ppm(paths["overlay"], overlay(image, values))
    write_heatmap_csv(paths["csv"], values)
    return paths
