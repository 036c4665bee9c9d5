"""Localization benchmark on planted-evidence tasks.

For each seed a synthetic task is generated, a logistic regression is
trained on most of it, and one held-out image is explained with marginal
sampling, conditional sampling and the sensitivity baseline. Each map is
scored by the share of its mass that lands on the planted evidence.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .classifiers import LayerTap, accuracy, train_logreg
from .engine import ExplainRequest, explain, sensitivity_map
from .samplers import ConditionalSampler, MarginalSampler, ReferenceDataset, SamplingConfig, fit_gaussian
from .seeding import derive_seed
from .synthetic import SyntheticSpec, localization_score, make_synthetic_task
from .tensor import PatchGeometry

METHODS = ("marginal", "conditional", "sensitivity")


@dataclass(frozen=True)
class BenchConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    shape: tuple[int, ...] = (20, 20)
    mask_fraction: float = 0.05
    mask_pixels: int | None = None
    noise: float = 0.1
    train_images: int = 4000
    test_images: int = 1000
    l2: float = 1e-4
    epochs: int = 300
    solver: str = "gd"  # 300 full-batch steps act as early stopping
    inner: int = 1
    outer: int = 5
    samples: int = 10

    @classmethod
    def quick(cls, **overrides) -> "BenchConfig":
        """Three seeds and a smaller training set; finishes well under a minute."""
        base = dict(seeds=(0, 1, 2), train_images=2000, test_images=500)
        base.update(overrides)
        return cls(**base)


@dataclass
class SeedResult:
    seed: int
    accuracy: float
    target_class: int
    scores: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


def run_seed(config: BenchConfig, seed: int) -> SeedResult:
    spec = SyntheticSpec(
        shape=config.shape, mask_pixels=config.mask_pixels, mask_fraction=config.mask_fraction,
        noise=config.noise, num_images=config.train_images + config.test_images, seed=seed,
    )
    data, labels, task = make_synthetic_task(spec)
    n = config.train_images
    train = ReferenceDataset(data.images[:n], data.spatial_ndim, data.value_range, source=data.source)
    net = train_logreg(train.images, labels[:n], l2=config.l2, epochs=config.epochs, num_classes=2,
                       solver=config.solver)
    acc = accuracy(net, data.images[n:], labels[n:])
    image = data.tensor(n)
    c = int(net.predict_proba(image.data[None])[0].argmax())
    result = SeedResult(seed, acc, c)

    geometry = PatchGeometry.cubic(config.inner, config.outer, len(config.shape))
    sampling = SamplingConfig(config.samples, derive_seed(seed, "sampling"))
    model = fit_gaussian(train, config.outer, rng_seed=derive_seed(seed, "sampler"))
    samplers = {"marginal": MarginalSampler(train), "conditional": ConditionalSampler(model)}
    for name, sampler in samplers.items():
        t0 = time.perf_counter()
        rmap = explain(ExplainRequest(image, net, sampler, LayerTap.probability(c), geometry, sampling))
        result.seconds[name] = time.perf_counter() - t0
        result.scores[name] = localization_score(rmap, task.evidence_mask)
    t0 = time.perf_counter()
    rmap = sensitivity_map(net, image, c)
    result.seconds["sensitivity"] = time.perf_counter() - t0
    result.scores["sensitivity"] = localization_score(rmap, task.evidence_mask)
    return result


def run_benchmark(config: BenchConfig) -> dict:
    """Per-seed results plus a per-method summary, as plain JSON-ready data."""
    t0 = time.perf_counter()
    rows = [run_seed(config, s) for s in config.seeds]
    settings = {"S": config.samples, "k": config.inner, "l": config.outer, "seeds": list(config.seeds)}
    methods = {}
    for m in METHODS:
        scores = [r.scores[m] for r in rows]
        methods[m] = dict(
            settings,
            mean_score=sum(scores) / len(scores),
            min_score=min(scores),
            seconds=sum(r.seconds[m] for r in rows),
        )
    return {
        "config": asdict(config),
        "methods": methods,
        "seeds": [asdict(r) for r in rows],
        "conditional_beats_marginal": sum(r.scores["conditional"] > r.scores["marginal"] for r in rows),
        "min_accuracy": min(r.accuracy for r in rows),
        "seconds": time.perf_counter() - t0,
    }


def format_table(report: dict) -> str:
    lines = [f"{'seed':>4}  {'acc':>6}  " + "  ".join(f"{m:>11}" for m in METHODS)]
    for row in report["seeds"]:
        lines.append(f"{row['seed']:>4}  {row['accuracy']:6.3f}  "
                     + "  ".join(f"{row['scores'][m]:11.3f}" for m in METHODS))
    lines.append(f"{'mean':>4}  {'':>6}  "
                 + "  ".join(f"{report['methods'][m]['mean_score']:11.3f}" for m in METHODS))
    lines.append(f"conditional > marginal on {report['conditional_beats_marginal']} of "
                 f"{len(report['seeds'])} seeds; {report['seconds']:.1f} s")
    return "\n".join(lines)
