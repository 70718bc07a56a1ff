"""Stand-in predictors with known outputs for routing tests."""

import numpy as np


class PixelGate:
    """Predicts the value stored in pixel (0, 0) of each image."""

    def predict(self, images):
        return np.asarray(images, dtype=np.float64)[:, 0, 0].copy()


class ConstModel:
    def __init__(self, value):
        self.value = float(value)
        self.calls = 0

    def predict(self, images):
        self.calls += 1
        return np.full(len(images), self.value)


def gate_images(values, size=4):
    imgs = np.zeros((len(values), size, size))
    imgs[:, 0, 0] = values
    return imgs
