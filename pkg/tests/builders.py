"""Small model builders shared by the tests."""

from __future__ import annotations

import numpy as np

from preddiff.classifiers import Affine, Classifier, Conv2D, MaxPool2D, Network, ReLU, Softmax


class ConstantClassifier(Classifier):
    """Ignores its input entirely."""

    def __init__(self, input_shape, probs, training_size=100):
        self.input_shape = tuple(input_shape)
        self.probs = np.asarray(probs, dtype=np.float64)
        self.num_classes = len(self.probs)
        self.training_size = training_size

    def predict_proba(self, batch):
        batch = self.check_batch(batch)
        return np.repeat(self.probs[None], len(batch), axis=0)


def logistic_network(weights, bias, input_shape, training_size=None):
    """Two-class network whose class-1 logit minus class-0 logit is ``w.x + b``."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    W = np.stack([np.zeros_like(w), w], axis=1)
    return Network(input_shape, [Affine("affine1", W, np.array([0.0, float(bias)])), Softmax("softmax")],
                   training_size=training_size)


def random_network(rng, kind=None):
    """A random MLP or conv net with at most a few hundred parameters."""
    kind = kind or rng.choice(["mlp", "conv"])
    k = int(rng.integers(2, 5))
    if kind == "mlp":
        d = int(rng.integers(2, 7))
        h = int(rng.integers(2, 6))
        layers = [
            Affine("affine1", rng.standard_normal((d, h)), rng.standard_normal(h) * 0.1),
            ReLU("relu1"),
            Affine("affine2", rng.standard_normal((h, k)), rng.standard_normal(k) * 0.1),
            Softmax("softmax"),
        ]
        return Network((d,), layers)
    c = int(rng.integers(1, 3))
    f = int(rng.integers(1, 4))
    size = 6
    conv = Conv2D("conv1", rng.standard_normal((3, 3, c, f)) * 0.5, rng.standard_normal(f) * 0.1)
    flat = 2 * 2 * f
    layers = [
        conv, ReLU("relu1"), MaxPool2D("pool1", 2),
        Affine("affine1", rng.standard_normal((flat, k)), rng.standard_normal(k) * 0.1), Softmax("softmax"),
    ]
    shape = (size, size, c) if c > 1 else (size, size)
    return Network(shape, layers)
