"""Parametric vortex imagery with known wind speeds.

Each image is a two-armed logarithmic-spiral cloud band around a central
dense overcast, with a cleared eye for hurricane-strength storms. Speed sets
the band's tightness, the size of the cloud shield, the overcast brightness
and the eye's radius and depth. The remaining nuisance parameters are
discrete (spiral phase, integer centre jitter), so a brute-force search over
the whole generator grid can invert any noiseless image.
"""

import functools

import numpy as np

from .dataset import CycloneSample, DatasetIndex
from .errors import ConfigError
from .rng import make_rng

SPEED_MIN, SPEED_MAX = 15, 185
N_PHASES = 8
MAX_JITTER = 3
NOISE_SIGMA = 0.04


def _strength(speed):
    return np.clip((np.asarray(speed, dtype=np.float64) - SPEED_MIN) / (SPEED_MAX - SPEED_MIN), 0.0, 1.0)


def eye_radius(speed, size):
    """Eye radius in pixels."""
    return size * (0.02 + 0.05 * _strength(speed))


@functools.lru_cache(maxsize=128)
def _geometry(size, jitter_row, jitter_col):
    c = size / 2.0 - 0.5
    rows = np.arange(size, dtype=np.float64)[None, :, None] - (c + jitter_row)
    cols = np.arange(size, dtype=np.float64)[None, None, :] - (c + jitter_col)
    r = np.maximum(np.hypot(rows, cols) / size, 1e-3)
    return r, np.arctan2(rows, cols)


def render(speed, size, phase_index=0, jitter=(0, 0)):
    """Noiseless vortex image(s) in [0, 1].

    ``speed`` may be an array, giving a stack of images. The eye sits at pixel
    ``(size/2 - 0.5 + jitter_row, size/2 - 0.5 + jitter_col)``.
    """
    speed = np.asarray(speed, dtype=np.float64)
    scalar = speed.ndim == 0
    sp = np.atleast_1d(speed)[:, None, None]
    st = _strength(sp)
    r, theta = _geometry(int(size), int(jitter[0]), int(jitter[1]))

    pitch = 0.6 - 0.42 * st
    shield = 0.2 + 0.18 * st
    spiral = theta - np.log(r / 0.05) / pitch - np.pi * phase_index / N_PHASES
    band = (0.5 + 0.5 * np.cos(2.0 * spiral)) ** 2
    envelope = np.exp(-((r / shield) ** 2))
    overcast = (0.25 + 0.6 * st) * np.exp(-((r / (0.4 * shield)) ** 2))
    cloud = np.clip(0.7 * envelope * band + overcast, 0.0, 1.0)

    eye_depth = np.clip((sp - 60.0) / 50.0, 0.0, 1.0)
    eye_r = eye_radius(sp, size) / size
    eye = 1.0 - eye_depth * np.exp(-((r / eye_r) ** 4))
    img = np.clip(0.06 + 0.9 * cloud * eye, 0.0, 1.0)
    return img[0] if scalar else img


def quantize(image):
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _storm_speeds(rng, length, lo, hi):
    speeds = [rng.uniform(lo, hi)]
    drift = rng.normal(0.0, 2.0)
    for _ in range(length - 1):
        nxt = speeds[-1] + drift + rng.normal(0.0, 3.0)
        if nxt < lo:
            nxt, drift = 2 * lo - nxt, abs(drift)
        elif nxt > hi:
            nxt, drift = 2 * hi - nxt, -abs(drift)
        speeds.append(min(max(nxt, lo), hi))
    return [int(round(v)) for v in speeds]


def synth_generate(n, size=64, seed=0, speed_range=(SPEED_MIN, SPEED_MAX), noise=NOISE_SIGMA, storm_length=(4, 24)):
    """``n`` labelled vortex images grouped into storms of consecutive samples.

    Within a storm the speed follows a reflected random walk with drift, the
    spiral phase advances one step per image and the eye wanders by at most
    one pixel per image inside the jitter box. Pixels are quantized to 8 bits
    so an exported dataset reloads bit-identically.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if size < 32 or size % 32:
        raise ConfigError("size must be a positive multiple of 32")
    lo, hi = speed_range
    if not SPEED_MIN <= lo <= hi <= SPEED_MAX:
        raise ConfigError(f"speed_range must lie within [{SPEED_MIN}, {SPEED_MAX}]")
    rng = make_rng(seed, 11)
    samples, storm = [], 0
    while len(samples) < n:
        length = int(rng.integers(storm_length[0], storm_length[1] + 1))
        length = min(length, n - len(samples))
        speeds = _storm_speeds(rng, length, lo, hi)
        phase = int(rng.integers(N_PHASES))
        jit = rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2)
        storm_id = f"storm{storm:04d}"
        for k, sp in enumerate(speeds):
            jit = np.clip(jit + rng.integers(-1, 2, size=2), -MAX_JITTER, MAX_JITTER)
            clean = render(sp, size, phase, jit)
            noisy = clean + rng.normal(0.0, noise, size=clean.shape) if noise > 0 else clean
            c = size / 2.0 - 0.5
            samples.append(
                CycloneSample(
                    image_id=f"img{len(samples):06d}",
                    storm_id=storm_id,
                    image=quantize(noisy),
                    wind_speed=float(sp),
                    meta={
                        "eye_row": c + float(jit[0]),
                        "eye_col": c + float(jit[1]),
                        "phase_index": float(phase),
                    },
                )
            )
            phase = (phase + 1) % N_PHASES
        storm += 1
    return DatasetIndex(samples)


def invert(image, speeds=None, phases=None, jitters=None, chunk=64):
    """Brute-force template match over the generator grid.

    Returns ``(speed, phase_index, (jitter_row, jitter_col))`` minimizing the
    squared distance to ``image``. Defaults search every integer speed, phase
    and jitter the generator can produce.
    """
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[0]
    speeds = np.arange(SPEED_MIN, SPEED_MAX + 1) if speeds is None else np.asarray(speeds)
    phases = range(N_PHASES) if phases is None else phases
    if jitters is None:
        span = range(-MAX_JITTER, MAX_JITTER + 1)
        jitters = [(a, b) for a in span for b in span]
    best = (np.inf, None)
    for ph in phases:
        for jit in jitters:
            for start in range(0, len(speeds), chunk):
                block = speeds[start : start + chunk]
                err = ((render(block, size, ph, jit) - image) ** 2).sum(axis=(1, 2))
                i = int(np.argmin(err))
                if err[i] < best[0]:
                    best = (err[i], (int(block[i]), int(ph), tuple(int(j) for j in jit)))
    return best[1]
