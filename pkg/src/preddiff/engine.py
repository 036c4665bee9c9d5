"""Prediction difference analysis.

For every window of the input, the window is replaced by ``S`` sampled
values, the target node is averaged over the resulting images, and the
difference to the unmodified prediction is accumulated into every element
the window covers. Probability targets are scored by weight of evidence
(log2 odds ratio after Laplace correction), any other node by the plain
activation difference. Elements covered by several windows end up with the
mean of their window scores.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classifiers.base import Classifier, ClassifierError, LayerTap
from .samplers import MarginalSampler, ReferenceDataset, SamplingConfig
from .seeding import window_rng
from .tensor import ImageTensor, PatchGeometry, RelevanceMap, WindowIndex, enumerate_windows

log = logging.getLogger(__name__)

DEFAULT_BATCH = 128


class ExplainError(RuntimeError):
    """Sampling or classification failed for some window; no map is produced."""

    def __init__(self, message, window: WindowIndex | None = None, completed: int = 0):
        super().__init__(message)
        self.window = window
        self.completed = completed


@dataclass(frozen=True)
class LaplaceParams:
    """Training-set size ``N`` and class count ``K`` for ``p <- (pN + 1) / (N + K)``."""

    N: int
    K: int

    def __post_init__(self):
        if self.N < 1 or self.K < 2:
            raise ValueError(f"need N >= 1 and K >= 2, got N={self.N}, K={self.K}")

    def correct(self, p):
        return (np.asarray(p, dtype=np.float64) * self.N + 1.0) / (self.N + self.K)


def log2_odds(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log2(p) - np.log2(1.0 - p)


def weight_of_evidence(p_full, p_removed, laplace: LaplaceParams):
    """log2 odds(p_full) - log2 odds(p_removed), both Laplace-corrected."""
    result = log2_odds(laplace.correct(p_full)) - log2_odds(laplace.correct(p_removed))
    return float(result) if np.ndim(result) == 0 else result


def default_geometry(spatial_ndim: int, stride: int = 1) -> PatchGeometry:
    """k=10/l=14 for images, k=3/l=7 for volumes, single elements for 1-d inputs."""
    k, l = {1: (1, 1), 2: (10, 14), 3: (3, 7)}[spatial_ndim]
    return PatchGeometry.cubic(k, l, spatial_ndim, stride)


@dataclass
class ExplainRequest:
    """Everything needed to explain one input.

    ``target`` defaults to the probability of the most likely class.
    ``laplace`` defaults to ``N`` = the classifier's training size (or the
    reference dataset size when unknown) and ``K`` = number of classes.
    """

    image: ImageTensor
    classifier: Classifier
    sampler: object
    target: LayerTap | None = None
    geometry: PatchGeometry | None = None
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    laplace: LaplaceParams | None = None
    batch_size: int = DEFAULT_BATCH
    jobs: int = 1
    record_samples: bool = False

    def resolved(self) -> "ExplainRequest":
        target = self.target
        if target is None:
            probs = self.classifier.predict_proba(self.image.data[None])[0]
            target = LayerTap.probability(int(np.argmax(probs)))
        geometry = self.geometry or default_geometry(self.image.spatial_ndim)
        geometry.check(self.image.shape)
        laplace = self.laplace
        if laplace is None and target.is_probability:
            n = self.classifier.training_size or getattr(self.sampler, "reference_size", None)
            if n is None:
                raise ValueError("Laplace N unknown: pass laplace=LaplaceParams(N, K)")
            laplace = LaplaceParams(int(n), int(self.classifier.num_classes))
        if target.is_probability and target.index >= self.classifier.num_classes:
            raise ValueError(f"class {target.index} out of range for {self.classifier.num_classes} classes")
        if self.batch_size < 1 or self.jobs < 1:
            raise ValueError("batch_size and jobs must be positive")
        return ExplainRequest(self.image, self.classifier, self.sampler, target, geometry,
                              self.sampling, laplace, self.batch_size, self.jobs, self.record_samples)


def target_function(classifier: Classifier, target: LayerTap):
    """``f(batch) -> (B, units)`` evaluating the target node."""
    if target.is_probability:
        c = target.index
        return lambda batch: classifier.predict_proba(batch)[:, c : c + 1]
    if not classifier.hidden_taps:
        raise ClassifierError(f"{type(classifier).__name__} cannot be tapped at {target.describe()}")
    return lambda batch: classifier.tap_values(batch, target)


def _plan(windows, sizes, budget):
    """Split window indices into consecutive chunks of at most ``budget`` sample images."""
    chunks, current, used = [], [], 0
    for i, n in enumerate(sizes):
        if current and used + n > budget:
            chunks.append(current)
            current, used = [], 0
        current.append(i)
        used += n
    if current:
        chunks.append(current)
    return chunks


def _sample_count(sampler, num_samples):
    if isinstance(sampler, MarginalSampler) and sampler.exhaustive:
        return len(sampler.dataset)
    return num_samples


def _analyse(image: ImageTensor, windows, geometry, sampler, sampling, evaluate, scorer,
             batch_size, jobs, record):
    """Score every window; returns per-window scores (and sample values if recorded)."""
    full = evaluate(image.data[None])[0]
    per_window = _sample_count(sampler, sampling.num_samples)
    chunks = _plan(windows, [per_window] * len(windows), batch_size)

    def run_chunk(indices):
        pieces, spans = [], []
        for i in indices:
            w = windows[i]
            try:
                rng = window_rng(sampling.rng_seed, w.origin, w.channel)
                samples = sampler.draw(image, w, geometry, sampling.num_samples, rng)
            except Exception as exc:
                raise ExplainError(f"sampling failed at window {w.origin} channel {w.channel}: {exc}", w) from exc
            block = np.repeat(image.data[None], len(samples), axis=0)
            region = (slice(None),) + w.inner_region(geometry)
            block[region] = samples.reshape(block[region].shape)
            pieces.append(block)
            spans.append(len(samples))
        batch = np.concatenate(pieces)
        try:
            values = np.concatenate([
                evaluate(batch[j : j + batch_size]) for j in range(0, len(batch), batch_size)
            ])
        except Exception as exc:
            w = windows[indices[0]]
            raise ExplainError(
                f"classifier failed on windows starting at {w.origin} channel {w.channel}: {exc}", w
            ) from exc
        out, start = [], 0
        for i, n in zip(indices, spans):
            vals = values[start : start + n]
            start += n
            out.append((scorer(full, vals.mean(axis=0)), vals if record else None))
        return out

    results = []
    if jobs == 1:
        for chunk in chunks:
            try:
                results.extend(run_chunk(chunk))
            except ExplainError as exc:
                exc.completed = len(results)
                raise
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_chunk, c) for c in chunks]
            for fut in futures:
                try:
                    results.extend(fut.result())
                except ExplainError as exc:
                    exc.completed = len(results)
                    for f in futures:
                        f.cancel()
                    raise
    return full, results


def _scorer(target: LayerTap, laplace: LaplaceParams | None):
    if target.is_probability:
        return lambda full, removed: weight_of_evidence(full[0], removed[0], laplace)
    return lambda full, removed: float(np.mean(full - removed))


def _accumulate(shape, windows, geometry, results, kind, target, meta):
    rmap = RelevanceMap.empty(shape, kind, target)
    for w, (score, _) in zip(windows, results):
        rmap.add(w.inner_region(geometry), score)
    rmap.meta = dict(meta, windows=len(windows), uncovered=rmap.uncovered)
    return rmap


def explain(request: ExplainRequest) -> RelevanceMap:
    """Relevance of every input element for the request's target node."""
    req = request.resolved()
    windows = enumerate_windows(req.image.shape, req.geometry)
    evaluate = target_function(req.classifier, req.target)
    full, results = _analyse(
        req.image, windows, req.geometry, req.sampler, req.sampling, evaluate,
        _scorer(req.target, req.laplace), req.batch_size, req.jobs, req.record_samples,
    )
    kind = "weight_of_evidence" if req.target.is_probability else "activation_difference"
    meta = {
        "geometry": {
            "inner": list(req.geometry.inner), "outer": list(req.geometry.outer),
            "stride": list(req.geometry.stride), "spans_channels": req.geometry.spans_channels,
        },
        "sampler": getattr(req.sampler, "name", type(req.sampler).__name__),
        "samples": req.sampling.num_samples,
        "seed": req.sampling.rng_seed,
        "clip_to_range": req.sampling.clip_to_range,
        "classifier": req.classifier.fingerprint(),
        "laplace": None if req.laplace is None else {"N": req.laplace.N, "K": req.laplace.K},
        "target_value": [float(v) for v in full],
        "spatial_ndim": req.image.spatial_ndim,
    }
    rmap = _accumulate(req.image.shape, windows, req.geometry, results, kind, req.target.describe(), meta)
    if req.record_samples:
        rmap.window_samples = [vals for _, vals in results]
    return rmap


def explain_hidden_source(classifier: Classifier, image: ImageTensor, source: str, target: LayerTap,
                          reference: ReferenceDataset, geometry: PatchGeometry | None = None,
                          sampling: SamplingConfig | None = None, laplace: LaplaceParams | None = None,
                          batch_size: int = DEFAULT_BATCH, jobs: int = 1) -> RelevanceMap:
    """Relevance of the units of hidden layer ``source`` for a deeper node.

    Units are replaced by their values at the same index in the activations
    the reference images produce at ``source`` (marginal sampling only). The
    map has the layer's shape; windows default to single units.
    """
    if not classifier.hidden_taps:
        raise ClassifierError(f"{type(classifier).__name__} exposes no hidden layers")
    sampling = sampling or SamplingConfig()
    h = classifier.activations(image.data[None])[source][0]
    hidden_ref = classifier.activations(reference.images)[source]
    nd = min(h.ndim, 2)
    unbounded = (-np.inf, np.inf)
    h_tensor = ImageTensor(h, nd, unbounded)
    ref = ReferenceDataset(hidden_ref, nd, unbounded, source=f"activations:{source}")
    if geometry is None:
        geometry = PatchGeometry((1,) * nd, (1,) * nd, spans_channels=False)
    windows = enumerate_windows(h.shape, geometry)
    evaluate = lambda batch: classifier.tap_from(source, batch, target)  # noqa: E731
    if target.is_probability and laplace is None:
        laplace = LaplaceParams(int(classifier.training_size or len(reference)), classifier.num_classes)
    full, results = _analyse(h_tensor, windows, geometry, MarginalSampler(ref), sampling, evaluate,
                             _scorer(target, laplace), batch_size, jobs, False)
    kind = "weight_of_evidence" if target.is_probability else "activation_difference"
    meta = {"source_layer": source, "sampler": "marginal", "samples": sampling.num_samples,
            "seed": sampling.rng_seed, "classifier": classifier.fingerprint(),
            "target_value": [float(v) for v in full]}
    return _accumulate(h.shape, windows, geometry, results, kind, target.describe(), meta)


def feature_map_relevance(request: ExplainRequest, layer: str, map_index: int) -> RelevanceMap:
    """Input relevance for a convolutional feature map: the mean over its units' maps.

    Unit activation differences are averaged per window before accumulation,
    which equals averaging the per-unit maps because all units share counts.
    """
    clf = request.classifier
    if not clf.hidden_taps:
        raise ClassifierError(f"{type(clf).__name__} exposes no hidden layers")
    if len(clf.layer_shape(layer)) != 3:
        raise ClassifierError(f"layer {layer!r} is not spatial; it has no feature maps")
    tap = LayerTap("map", int(map_index), layer)
    req = ExplainRequest(request.image, clf, request.sampler, tap, request.geometry, request.sampling,
                         request.laplace, request.batch_size, request.jobs, request.record_samples)
    rmap = explain(req)
    rmap.meta["units"] = clf.tap_units(tap)
    return rmap


def sensitivity_map(handle: Classifier, image: ImageTensor, c: int, step: float | None = None,
                    batch_size: int = DEFAULT_BATCH) -> RelevanceMap:
    """Absolute partial derivatives of ``p(c|x)`` with respect to every input element.

    Analytic for differentiable handles; otherwise central differences with
    step ``1e-3 * (hi - lo)`` unless ``step`` is given.
    """
    tap = LayerTap.probability(c)
    if handle.differentiable:
        grad = handle.input_gradient(image.data[None], tap)[0]
        method = "analytic"
    else:
        grad = finite_difference_gradient(handle, image, c, step, batch_size)
        method = "central_difference"
    meta = {"method": method, "classifier": handle.fingerprint()}
    return RelevanceMap(np.abs(grad), np.ones(image.shape, dtype=np.int64), "sensitivity",
                        tap.describe(), meta)


def finite_difference_gradient(handle: Classifier, image: ImageTensor, c: int,
                               step: float | None = None, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    lo, hi = image.value_range
    if step is None:
        span = hi - lo if np.isfinite(hi - lo) and hi > lo else 1.0
        step = 1e-3 * span
    x = image.data.ravel()
    m = x.size
    grad = np.empty(m)
    for start in range(0, m, max(1, batch_size // 2)):
        idx = np.arange(start, min(m, start + max(1, batch_size // 2)))
        batch = np.repeat(x[None], 2 * len(idx), axis=0)
        batch[np.arange(len(idx)), idx] += step
        batch[len(idx) + np.arange(len(idx)), idx] -= step
        p = handle.predict_proba(batch.reshape((-1,) + image.shape))[:, c]
        grad[idx] = (p[: len(idx)] - p[len(idx) :]) / (2 * step)
    return grad.reshape(image.shape)


def top_k_targets(handle: Classifier, image: ImageTensor, k: int) -> list[tuple[int, float]]:
    """The ``k`` most probable classes, ties broken by ascending class index."""
    probs = handle.predict_proba(image.data[None])[0]
    order = sorted(range(len(probs)), key=lambda c: (-probs[c], c))
    return [(c, float(probs[c])) for c in order[:k]]
