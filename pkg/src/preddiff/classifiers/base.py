from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClassifierError(RuntimeError):
    """Evaluation failed (bad input, crashed model process, protocol fault)."""


class ShapeMismatch(ClassifierError, ValueError):
    pass


class TrainingError(RuntimeError):
    """Training diverged or was asked to do something impossible."""


SELECTORS = ("prob", "logit", "unit", "map")


@dataclass(frozen=True)
class LayerTap:
    """A node (or group of nodes) to read out of a network.

    ``selector`` is one of ``prob`` (post-softmax class probability), ``logit``
    (pre-softmax class score), ``unit`` (one flat unit of ``layer``) or ``map``
    (all units of one convolutional feature map of ``layer``).
    """

    selector: str
    index: int
    layer: str | None = None

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown tap selector {self.selector!r}")
        if self.selector in ("unit", "map") and not self.layer:
            raise ValueError(f"{self.selector} taps need a layer name")
        if self.index < 0:
            raise ValueError("tap index must be nonnegative")

    @property
    def is_probability(self) -> bool:
        return self.selector == "prob"

    def describe(self) -> dict:
        return {"selector": self.selector, "index": int(self.index), "layer": self.layer}

    @classmethod
    def probability(cls, c: int) -> "LayerTap":
        return cls("prob", int(c))


class Classifier:
    """Anything that maps a batch of inputs to class probabilities.

    Subclasses set ``input_shape`` and ``num_classes`` and implement
    :meth:`predict_proba`. ``training_size`` is the N used by the Laplace
    correction when known.
    """

    input_shape: tuple[int, ...]
    num_classes: int
    batched = True
    hidden_taps = False
    differentiable = False
    training_size: int | None = None

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] != tuple(self.input_shape):
            raise ShapeMismatch(
                f"expected inputs of shape {tuple(self.input_shape)}, got {batch.shape[1:]}"
            )
        return batch

    def tap_values(self, batch: np.ndarray, tap: LayerTap) -> np.ndarray:
        """Values of ``tap`` as a ``(B, units)`` array."""
        if tap.selector == "prob":
            probs = self.predict_proba(batch)
            return probs[:, tap.index : tap.index + 1]
        raise ClassifierError(f"{type(self).__name__} exposes no hidden taps")

    def fingerprint(self) -> str:
        return type(self).__name__

