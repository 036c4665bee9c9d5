"""Small feed-forward networks with hidden-layer taps and backprop.

Inputs are channel-last (``(H, W)`` gray or ``(H, W, C)``; affine layers
accept any shape and flatten it). Forward contractions use ``np.einsum``
without BLAS so that every row of a batch is computed by the same
floating-point sequence whatever the batch size; the explanation engine
relies on this for bitwise reproducibility.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .. import pdt1
from .base import Classifier, ClassifierError, LayerTap

MODEL_FORMAT = "preddiff-model/1"


class Layer:
    kind = ""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"name": self.name, "type": self.kind}

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"

    def __init__(self, name, weight, bias):
        super().__init__(name)
        self.params = {"W": np.asarray(weight, dtype=np.float64), "b": np.asarray(bias, dtype=np.float64)}
        if self.params["W"].ndim != 2 or self.params["b"].shape != (self.params["W"].shape[1],):
            raise ValueError(f"{name}: inconsistent affine parameter shapes")

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.params["W"].shape[0]:
            raise ValueError(f"{self.name}: input of size {int(np.prod(shape))}, weights expect {self.params['W'].shape[0]}")
        return (self.params["W"].shape[1],)

    def forward(self, x):
        flat = x.reshape(len(x), -1)
        y = np.einsum("bd,dh->bh", flat, self.params["W"], optimize=False) + self.params["b"]
        return y, (x.shape, flat)

    def backward(self, dy, cache):
        shape, flat = cache
        grads = {"W": flat.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ self.params["W"].T).reshape(shape), grads


def _with_channels(x):
    return x if x.ndim == 4 else x[..., None]


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution. Weights are ``(kh, kw, C, F)``."""

    kind = "conv"

    def __init__(self, name, weight, bias):
        super().__init__(name)
        self.params = {"W": np.asarray(weight, dtype=np.float64), "b": np.asarray(bias, dtype=np.float64)}
        if self.params["W"].ndim != 4 or self.params["b"].shape != (self.params["W"].shape[3],):
            raise ValueError(f"{name}: inconsistent conv parameter shapes")

    def output_shape(self, shape):
        kh, kw, c, f = self.params["W"].shape
        if len(shape) == 2:
            shape = shape + (1,)
        if len(shape) != 3 or shape[2] != c or shape[0] < kh or shape[1] < kw:
            raise ValueError(f"{self.name}: cannot convolve input {shape} with kernel {self.params['W'].shape}")
        return (shape[0] - kh + 1, shape[1] - kw + 1, f)

    def forward(self, x):
        xc = _with_channels(x)
        kh, kw = self.params["W"].shape[:2]
        patches = np.lib.stride_tricks.sliding_window_view(xc, (kh, kw), axis=(1, 2))
        y = np.einsum("bijcuv,uvcf->bijf", patches, self.params["W"], optimize=False)
        return y + self.params["b"], (x.shape, patches)

    def backward(self, dy, cache):
        shape, patches = cache
        w = self.params["W"]
        kh, kw = w.shape[:2]
        grads = {
            "W": np.einsum("bijcuv,bijf->uvcf", patches, dy, optimize=True),
            "b": dy.sum(axis=(0, 1, 2)),
        }
        ho, wo = dy.shape[1:3]
        dx = np.zeros(patches.shape[:1] + (ho + kh - 1, wo + kw - 1, w.shape[2]))
        for u in range(kh):
            for v in range(kw):
                dx[:, u : u + ho, v : v + wo, :] += dy @ w[u, v].T
        return dx.reshape(shape), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, cache):
        return dy * cache, {}


class MaxPool2D(Layer):
    """Non-overlapping ``size x size`` max pooling; ragged borders are dropped."""

    kind = "maxpool"

    def __init__(self, name, size: int):
        super().__init__(name)
        self.size = int(size)

    def config(self):
        return dict(super().config(), size=self.size)

    def output_shape(self, shape):
        if len(shape) == 2:
            shape = shape + (1,)
        if len(shape) != 3 or shape[0] < self.size or shape[1] < self.size:
            raise ValueError(f"{self.name}: cannot pool input {shape}")
        return (shape[0] // self.size, shape[1] // self.size, shape[2])

    def _blocks(self, xc):
        p = self.size
        b, h, w, c = xc.shape
        ho, wo = h // p, w // p
        blocks = xc[:, : ho * p, : wo * p].reshape(b, ho, p, wo, p, c)
        return blocks.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, p * p)

    def forward(self, x):
        xc = _with_channels(x)
        blocks = self._blocks(xc)
        arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, arg[..., None], -1)[..., 0], (x.shape, xc.shape, arg)

    def backward(self, dy, cache):
        shape, cshape, arg = cache
        p = self.size
        b, h, w, c = cshape
        ho, wo = h // p, w // p
        blocks = np.zeros((b, ho, wo, c, p * p))
        np.put_along_axis(blocks, arg[..., None], dy[..., None], -1)
        blocks = blocks.reshape(b, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(cshape)
        dx[:, : ho * p, : wo * p] = blocks.reshape(b, ho * p, wo * p, c)
        return dx.reshape(shape), {}


class Softmax(Layer):
    kind = "softmax"

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ValueError(f"{self.name}: softmax needs a flat input, got {shape}")
        return shape

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, dy, cache):
        y = cache
        return y * (dy - np.sum(dy * y, axis=1, keepdims=True)), {}


LAYER_TYPES = {cls.kind: cls for cls in (Affine, Conv2D, ReLU, MaxPool2D, Softmax)}


class Network(Classifier):
    """A layer list ending in softmax. Immutable once built (training copies)."""

    batched = True
    hidden_taps = True
    differentiable = True

    def __init__(self, input_shape, layers: list[Layer], training: dict | None = None,
                 training_size: int | None = None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.training = dict(training or {})
        self.training_size = training_size
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("the last layer must be softmax")
        if any(isinstance(l, Softmax) for l in self.layers[:-1]):
            raise ValueError("softmax is only allowed as the last layer")
        self.shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
            self.shapes.append(shape)
        self.num_classes = self.shapes[-1][0]
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    # structure -----------------------------------------------------------

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def layer_index(self, name: str) -> int:
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise ClassifierError(
                f"unknown layer {name!r}; available: {', '.join(self.layer_names)}"
            ) from None

    def layer_shape(self, name: str) -> tuple[int, ...]:
        return self.shapes[self.layer_index(name)]

    def num_params(self) -> int:
        return sum(p.size for l in self.layers for p in l.params.values())

    def _tap_index(self, tap: LayerTap) -> int:
        if tap.selector == "prob":
            idx = len(self.layers) - 1
        elif tap.selector == "logit":
            idx = len(self.layers) - 2
        else:
            idx = self.layer_index(tap.layer)
        if idx < 0:
            raise ClassifierError("network has no pre-softmax layer")
        shape = self.shapes[idx]
        if tap.selector == "map":
            if len(shape) != 3:
                raise ClassifierError(f"layer {self.layers[idx].name!r} has no feature maps")
            limit = shape[2]
        elif tap.selector in ("prob", "logit"):
            limit = self.num_classes
        else:
            limit = int(np.prod(shape))
        if tap.index >= limit:
            raise ClassifierError(f"tap index {tap.index} out of range ({limit}) for layer {self.layers[idx].name!r}")
        return idx

    def tap_units(self, tap: LayerTap) -> int:
        idx = self._tap_index(tap)
        if tap.selector == "map":
            return int(np.prod(self.shapes[idx][:2]))
        return 1

    def _read(self, value: np.ndarray, tap: LayerTap) -> np.ndarray:
        if tap.selector == "map":
            return value[..., tap.index].reshape(len(value), -1)
        flat = value.reshape(len(value), -1)
        return flat[:, tap.index : tap.index + 1]

    # evaluation ----------------------------------------------------------

    def _run(self, x, start=0, stop=None):
        outs = []
        for layer in self.layers[start:stop]:
            x, _ = layer.forward(x)
            outs.append(x)
        return outs

    def activations(self, batch) -> dict[str, np.ndarray]:
        batch = self.check_batch(batch)
        return dict(zip(self.layer_names, self._run(batch)))

    def predict_proba(self, batch) -> np.ndarray:
        return self._run(self.check_batch(batch))[-1]

    def logits(self, batch) -> np.ndarray:
        return self._run(self.check_batch(batch), stop=len(self.layers) - 1)[-1]

    def tap_values(self, batch, tap: LayerTap) -> np.ndarray:
        idx = self._tap_index(tap)
        outs = self._run(self.check_batch(batch), stop=idx + 1)
        return self._read(outs[idx], tap)

    def forward_with_taps(self, batch, taps: list[LayerTap]):
        """Tapped values (each ``(B, units)``) and final probabilities from one pass."""
        outs = self._run(self.check_batch(batch))
        return [self._read(outs[self._tap_index(t)], t) for t in taps], outs[-1]

    def tap_from(self, source: str, hidden, tap: LayerTap) -> np.ndarray:
        """Evaluate ``tap`` with layer ``source``'s output replaced by ``hidden``."""
        start = self.layer_index(source)
        idx = self._tap_index(tap)
        if idx <= start:
            raise ClassifierError(f"tap layer must come after {source!r}")
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.shape[1:] != self.shapes[start]:
            raise ClassifierError(f"hidden values of shape {hidden.shape[1:]}, layer has {self.shapes[start]}")
        outs = self._run(hidden, start + 1, idx + 1)
        return self._read(outs[-1], tap)

    # gradients -----------------------------------------------------------

    def _forward_cached(self, x, stop=None):
        caches = []
        for layer in self.layers[:stop]:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def _backward(self, caches, dout, top: int):
        """Backprop ``dout`` (gradient w.r.t. output of layer ``top``) to the input."""
        grads = {}
        for i in range(top, -1, -1):
            layer = self.layers[i]
            dout, g = layer.backward(dout, caches[i])
            for key, val in g.items():
                grads[(layer.name, key)] = val
        return dout, grads

    def input_gradient(self, batch, tap: LayerTap) -> np.ndarray:
        """d(sum of tapped units)/d(input), per batch item."""
        batch = self.check_batch(batch)
        idx = self._tap_index(tap)
        out, caches = self._forward_cached(batch, idx + 1)
        seed = np.zeros_like(out)
        if tap.selector == "map":
            seed[..., tap.index] = 1.0
        else:
            seed.reshape(len(seed), -1)[:, tap.index] = 1.0
        dx, _ = self._backward(caches, seed, idx)
        return dx

    def loss_and_grads(self, batch, labels, l2: float = 0.0):
        """Mean cross-entropy plus ``l2/2 * sum(W**2)`` and its parameter gradients."""
        batch = self.check_batch(batch)
        labels = np.asarray(labels, dtype=np.int64)
        logits, caches = self._forward_cached(batch, len(self.layers) - 1)
        probs, _ = self.layers[-1].forward(logits)
        n = len(batch)
        loss = -np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-300)))
        dz = probs.copy()
        dz[np.arange(n), labels] -= 1.0
        dz /= n
        _, grads = self._backward(caches, dz, len(self.layers) - 2)
        for layer in self.layers:
            if "W" in layer.params:
                w = layer.params["W"]
                loss += 0.5 * l2 * float(np.sum(w * w))
                grads[(layer.name, "W")] = grads[(layer.name, "W")] + l2 * w
        return float(loss), grads

    def parameters(self):
        """``((layer, key), array)`` pairs in a fixed order; arrays are live."""
        return [((l.name, k), l.params[k]) for l in self.layers for k in sorted(l.params)]

    def copy(self) -> "Network":
        return network_from_manifest(self.manifest(), [p.copy() for _, p in self.parameters()])

    # persistence ---------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "training_size": self.training_size,
            "layers": [
                dict(l.config(), params={k: list(l.params[k].shape) for k in sorted(l.params)})
                for l in self.layers
            ],
            "training": self.training,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for _, p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def network_from_manifest(manifest: dict, arrays) -> Network:
    arrays = list(arrays)
    layers = []
    for spec in manifest["layers"]:
        kind = spec["type"]
        if kind not in LAYER_TYPES:
            raise ValueError(f"unknown layer type {kind!r}")
        keys = sorted(spec.get("params", {}))
        params = {k: arrays.pop(0) for k in keys}
        for k in keys:
            if list(params[k].shape) != list(spec["params"][k]):
                raise ValueError(f"layer {spec['name']}: parameter {k} has wrong shape")
        if kind in ("affine", "conv"):
            layers.append(LAYER_TYPES[kind](spec["name"], params["W"], params["b"]))
        elif kind == "maxpool":
            layers.append(MaxPool2D(spec["name"], spec["size"]))
        else:
            layers.append(LAYER_TYPES[kind](spec["name"]))
    if arrays:
        raise ValueError("extra parameter arrays in model file")
    return Network(manifest["input_shape"], layers, manifest.get("training"), manifest.get("training_size"))


def save_model(path, net: Network) -> None:
    pdt1.write_container(path, net.manifest(), [(p, np.float64) for _, p in net.parameters()])


def load_model(path) -> Network:
    header, arrays = pdt1.read_container(path)
    if header.get("format") != MODEL_FORMAT:
        raise pdt1.FormatError(f"{path}: not a model file")
    return network_from_manifest(header, arrays)


def build_network(input_shape, skeleton: list[dict], num_classes: int, seed: int = 0) -> Network:
    """Instantiate a skeleton with He-initialised weights; a final affine+softmax is appended.

    Skeleton entries: ``{"type": "conv", "filters": F, "size": s}``,
    ``{"type": "affine", "units": H}``, ``{"type": "relu"}``,
    ``{"type": "maxpool", "size": p}``.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    shape = tuple(input_shape)
    counts: dict[str, int] = {}

    def name(kind):
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    for spec in list(skeleton) + [{"type": "affine", "units": num_classes}, {"type": "softmax"}]:
        kind = spec["type"]
        if kind == "affine":
            fan_in = int(np.prod(shape))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, int(spec["units"])))
            layer = Affine(spec.get("name") or name(kind), w, np.zeros(int(spec["units"])))
        elif kind == "conv":
            c = shape[2] if len(shape) == 3 else 1
            s = int(spec["size"])
            fan_in = s * s * c
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s, s, c, int(spec["filters"])))
            layer = Conv2D(spec.get("name") or name(kind), w, np.zeros(int(spec["filters"])))
        elif kind == "maxpool":
            layer = MaxPool2D(spec.get("name") or name(kind), spec["size"])
        elif kind in ("relu", "softmax"):
            layer = LAYER_TYPES[kind](spec.get("name") or name(kind))
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Network(input_shape, layers)
