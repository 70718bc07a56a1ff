"""Tiny hand-built datasets for sampler and split tests."""

import numpy as np

from cyclone_alexnet.dataset import CycloneSample, DatasetIndex


def tagged_image(k, size=4):
    # a distinct asymmetric image per sample so identity can be recovered
    img = np.arange(size * size, dtype=np.float32).reshape(size, size) / (size * size)
    img[0, 0] = (k % 997) / 997.0
    return img


def make_index(rows, size=4):
    """``rows`` is a list of (storm_id, speed, count)."""
    samples = []
    for storm, speed, count in rows:
        for _ in range(count):
            k = len(samples)
            samples.append(CycloneSample(f"img{k:05d}", storm, tagged_image(k, size), float(speed)))
    return DatasetIndex(samples)


def skewed_pair():
    """Speed 30 in storm A (100 images) and storm B (1 image)."""
    return make_index([("A", 30, 100), ("B", 30, 1)])


def random_index(rng, n_storms=None, size=4):
    n_storms = n_storms or int(rng.integers(2, 15))
    rows = []
    for s in range(n_storms):
        for sp in rng.choice(np.arange(20, 60), size=int(rng.integers(1, 5)), replace=False):
            rows.append((f"s{s}", int(sp), int(rng.integers(1, 4))))
    return make_index(rows, size)
