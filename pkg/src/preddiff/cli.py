"""Command-line interface.

Every command writes a run manifest (JSON) next to its outputs recording the
argument vector, resolved configuration, derived seeds, content hashes of
inputs and outputs, the tool version and timing. ``preddiff replay`` reruns
a manifest and checks that the outputs come out byte-identical.

Exit codes: 0 ok, 2 configuration, 3 data, 4 classifier or sampler failure,
5 training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, pdt1
from .benchmark import BenchConfig, format_table, run_benchmark
from .classifiers import ClassifierError, ExternalClassifier, LayerTap, TrainingError, load_model, save_model
from .classifiers import serve as serve_protocol
from .classifiers import train_logreg, train_small_net
from .engine import (
    ExplainError,
    ExplainRequest,
    LaplaceParams,
    default_geometry,
    explain,
    feature_map_relevance,
    sensitivity_map,
    top_k_targets,
)
from .images import (
    ImageReadError,
    ShapeMismatchError,
    load_dataset,
    load_image,
    load_relevance,
    save_relevance,
)
from .render import HeatmapStyle, render_heatmap, render_volume
from .samplers import (
    ConditionalSampler,
    MarginalSampler,
    SamplerError,
    SamplingConfig,
    fit_location_grid,
    load_sampler,
    save_sampler,
)
from .seeding import derive_seed
from .synthetic import SyntheticSpec, make_synthetic_task
from .tensor import PatchGeometry

log = logging.getLogger("preddiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, EXIT_TRAINING = 0, 2, 3, 4, 5
JOBS_ENV = "PREDDIFF_JOBS"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# manifests -------------------------------------------------------------------


def file_digest(path) -> str:
    """sha256 of a file, or of the sorted (name, digest) list of a directory's files."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(f"{p.relative_to(path).as_posix()}\0{file_digest(p)}\n".encode())
        return h.hexdigest()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.resolved: dict = {}
        self.handles: list = []
        self.started = time.time()

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such file or directory")
        self.inputs[str(path)] = file_digest(path)
        return path

    def wrote(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def write_manifest(self, path) -> Path:
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "tool": "preddiff",
            "version": __version__,
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": config,
            "resolved": self.resolved,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {str(p): file_digest(p) for p in self.outputs if p.exists()},
            "timing": {
                "started": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "seconds": round(time.time() - self.started, 6),
            },
        }
        path = Path(path)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# shared helpers --------------------------------------------------------------


def resolve_jobs(value: int | None) -> int:
    if value is None:
        raw = os.environ.get(JOBS_ENV, "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{JOBS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise ConfigError(f"--jobs must be >= 1, got {value}")
    return value


def _spatial_ndim_for(path: Path, channels_last: bool) -> int | None:
    if path.suffix.lower() not in (".pdt1", ".pdt"):
        return None
    return pdt1.read(path).ndim - 1 if channels_last else None


def read_image(run: Run, path, channels_last: bool):
    path = run.read(path)
    return load_image(path, spatial_ndim=_spatial_ndim_for(path, channels_last))


def open_classifier(run: Run, args):
    if args.model:
        return load_model(run.read(args.model))
    handle = ExternalClassifier(args.exec, timeout=args.timeout)
    run.handles.append(handle)
    return handle


def open_sampler(run: Run, spec: str, image):
    kind, _, where = spec.partition(":")
    if not where or kind not in ("marginal", "cond"):
        raise ConfigError(f"--sampler must be marginal:DIR or cond:FILE, got {spec!r}")
    path = run.read(where)
    if kind == "marginal":
        data = load_dataset(path, spatial_ndim=image.spatial_ndim, value_range=image.value_range)
        return MarginalSampler(data), {"kind": "marginal", "path": where, "images": len(data)}
    model, header = load_sampler(path)
    refs = header.get("reference_images")
    sampler = ConditionalSampler(model, reference_size=refs)
    return sampler, {"kind": "conditional", "path": where, "grid_dims": header.get("grid_dims"),
                     "reference_images": refs}


def make_geometry(args, image) -> PatchGeometry:
    nd = image.spatial_ndim
    base = default_geometry(nd)
    k = args.k if args.k is not None else base.inner[0]
    l = args.l if args.l is not None else max(base.outer[0], k)
    try:
        return PatchGeometry.cubic(k, l, nd, args.stride, spans_channels=not args.per_channel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_target(spec: str, c: int) -> LayerTap:
    if spec == "softmax":
        return LayerTap.probability(c)
    if spec == "presoftmax":
        return LayerTap("logit", c)
    parts = spec.split(":")
    if len(parts) == 4 and parts[0] == "layer" and parts[2] in ("unit", "map"):
        try:
            return LayerTap(parts[2], int(parts[3]), parts[1])
        except ValueError as exc:
            raise ConfigError(f"bad --target {spec!r}: {exc}") from exc
    raise ConfigError(f"--target must be softmax, presoftmax or layer:NAME:unit:IDX, got {spec!r}")


def pick_classes(args, classifier, image) -> list[int]:
    if args.cls is not None:
        if not 0 <= args.cls < classifier.num_classes:
            raise ConfigError(f"--class {args.cls} out of range for {classifier.num_classes} classes")
        return [args.cls]
    top = args.top or 1
    if top > classifier.num_classes:
        raise ConfigError(f"--top {top} exceeds the {classifier.num_classes} classes")
    return [c for c, _ in top_k_targets(classifier, image, top)]


def output_for(out: Path, tag: str | None) -> Path:
    if tag is None:
        return out
    return out.with_name(f"{out.stem}.{tag}{out.suffix}")


def render_output(run: Run, rmap, image, archive: Path, style: HeatmapStyle):
    if image.spatial_ndim == 3:
        for p in render_volume(rmap, image, style, archive.with_name(archive.name + "_slices")):
            run.wrote(p)
    else:
        run.wrote(archive.with_name(archive.name + ".png"))
        render_heatmap(rmap, image, style, archive.with_name(archive.name + ".png"))


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# commands --------------------------------------------------------------------


def cmd_synthetic(args, run: Run) -> int:
    spec = SyntheticSpec(shape=tuple(args.shape), mask_pixels=args.mask_pixels, mask_fraction=args.mask_fraction,
                         noise=args.noise, num_images=args.images, seed=args.seed)
    data, labels, task = make_synthetic_task(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pdt1.save(run.wrote(out / "images.pdt1"), data.images)
    np.savetxt(run.wrote(out / "labels.txt"), labels, fmt="%d")
    pdt1.save(run.wrote(out / "mask.pdt1"), task.evidence_mask.astype(np.int64), dtype=np.int64)
    run.resolved = {"synthetic": asdict(spec)}
    run.seeds = {"seed": args.seed}
    print(f"wrote {len(labels)} images of shape {data.image_shape} to {out}")
    run.write_manifest(out / "manifest.json")
    return EXIT_OK


def read_labels(path: Path, n: int) -> np.ndarray:
    try:
        if path.suffix.lower() in (".pdt1", ".pdt"):
            labels = pdt1.read(path)
        elif path.suffix.lower() == ".json":
            labels = np.asarray(json.loads(path.read_text()))
        else:
            labels = np.loadtxt(path, dtype=np.float64, ndmin=1)
    except (OSError, ValueError, pdt1.FormatError) as exc:
        raise DataError(f"{path}: cannot read labels ({exc})") from exc
    labels = np.asarray(labels).ravel()
    if labels.shape != (n,) or not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise DataError(f"{path}: need {n} nonnegative integer labels, got {labels.shape[0]}")
    return labels.astype(np.int64)


def cmd_train(args, run: Run) -> int:
    data_path = run.read(args.data)
    nd = None
    if data_path.is_file() and args.channels_last:
        nd = pdt1.read(data_path).ndim - 2
    data = load_dataset(data_path, spatial_ndim=nd)
    labels = read_labels(run.read(args.labels), len(data))
    seed = derive_seed(args.seed, "train")
    run.seeds = {"seed": args.seed, "train": seed}
    if args.arch == "logreg":
        net = train_logreg(data.images, labels, l2=args.l2, epochs=args.epochs, lr=args.lr, seed=seed,
                           num_classes=args.classes, solver=args.solver)
    else:
        skeleton = args.skeleton
        try:
            skeleton = json.loads(Path(skeleton).read_text() if Path(skeleton).is_file() else skeleton)
        except (json.JSONDecodeError, OSError) as exc:
            raise ConfigError(f"--skeleton is not valid JSON: {exc}") from exc
        try:
            net = train_small_net(skeleton, data.images, labels, epochs=args.epochs, lr=args.lr or 0.01,
                                  l2=args.l2, seed=seed, num_classes=args.classes, batch_size=args.batch_size)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad --skeleton entry: {exc}") from exc
    out = _mkparent(Path(args.out))
    save_model(run.wrote(out), net)
    history = net.training["loss_history"]
    run.resolved = {"images": len(data), "classes": net.num_classes, "final_loss": history[-1] if history else None}
    print(f"trained {args.arch} on {len(data)} images; final loss {history[-1]:.6f}" if history
          else f"initialised {args.arch}")
    run.write_manifest(manifest_path(out))
    return EXIT_OK


def _parse_grid(spec: str, nd: int) -> tuple[int, ...]:
    try:
        dims = tuple(int(g) for g in spec.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid must look like 4 or 4x4, got {spec!r}") from None
    if len(dims) == 1:
        dims = dims * nd
    if len(dims) != nd or min(dims) < 1:
        raise ConfigError(f"--grid {spec!r} does not fit {nd}-d data")
    return dims


def cmd_fit_sampler(args, run: Run) -> int:
    path = run.read(args.data)
    nd = None
    if path.is_file():
        nd = pdt1.read(path).ndim - (2 if args.channels_last else 1)
    data = load_dataset(path, spatial_ndim=nd)
    outer = args.outer if args.outer is not None else default_geometry(data.spatial_ndim).outer[0]
    grid = _parse_grid(args.grid, data.spatial_ndim)
    seed = derive_seed(args.seed, "sampler")
    run.seeds = {"seed": args.seed, "sampler": seed}
    try:
        model = fit_location_grid(data, outer, grid, args.epsilon, seed, args.max_patches,
                                  spans_channels=not args.per_channel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _mkparent(Path(args.out))
    save_sampler(run.wrote(out), model, args.seed, reference_images=len(data),
                 spans_channels=not args.per_channel)
    p = model.global_model.size
    run.resolved = {"outer": outer, "grid": list(grid), "patch_size": p, "cells_fitted": len(model.cells),
                    "reference_images": len(data)}
    print(f"fitted {p}-dim Gaussian on {model.global_model.fitted_from} patches; "
          f"{len(model.cells)} of {model.num_cells} grid cells fitted")
    run.write_manifest(manifest_path(out))
    return EXIT_OK


def _request_parts(args, run: Run):
    image = read_image(run, args.image, args.channels_last)
    classifier = open_classifier(run, args)
    sampler, sampler_info = open_sampler(run, args.sampler, image)
    geometry = make_geometry(args, image)
    seed = derive_seed(args.seed, "sampling")
    run.seeds = {"seed": args.seed, "sampling": seed}
    sampling = SamplingConfig(args.samples, seed)
    laplace = None
    if args.laplace_n is not None:
        laplace = LaplaceParams(args.laplace_n, classifier.num_classes)
    elif not (classifier.training_size or getattr(sampler, "reference_size", None)):
        raise ConfigError("training set size unknown for this classifier and sampler; pass --laplace-n")
    run.resolved = {
        "k": list(geometry.inner), "l": list(geometry.outer), "stride": list(geometry.stride),
        "S": args.samples, "sampler": sampler_info, "spatial_ndim": image.spatial_ndim,
        "per_channel": args.per_channel, "jobs": resolve_jobs(args.jobs),
    }
    return image, classifier, sampler, geometry, sampling, laplace


def cmd_explain(args, run: Run) -> int:
    image, classifier, sampler, geometry, sampling, laplace = _request_parts(args, run)
    jobs = run.resolved["jobs"]
    if args.target.startswith("layer:"):
        targets = [(None, parse_target(args.target, 0))]
    else:
        classes = pick_classes(args, classifier, image)
        tagged = len(classes) > 1
        targets = [(f"class{c}" if tagged else None, parse_target(args.target, c)) for c in classes]
    out = _mkparent(Path(args.out))
    style = HeatmapStyle(args.alpha, args.threshold)
    written = []
    for tag, tap in targets:
        request = ExplainRequest(image, classifier, sampler, tap, geometry, sampling, laplace,
                                 args.batch_size, jobs)
        rmap = explain(request)
        path = run.wrote(output_for(out, tag))
        save_relevance(path, rmap)
        if args.render:
            render_output(run, rmap, image, path, style)
        written.append(f"{path} ({tap.selector} {tap.index}, max |r| {np.max(np.abs(rmap.values)):.4g})")
    run.resolved["targets"] = [t.describe() for _, t in targets]
    print("\n".join(written))
    run.write_manifest(manifest_path(out))
    return EXIT_OK


def _parse_maps(spec: str, available: int) -> list[int]:
    if spec == "all":
        return list(range(available))
    try:
        maps = sorted({int(m) for m in spec.split(",")})
    except ValueError:
        raise ConfigError(f"--maps must be 'all' or a comma list, got {spec!r}") from None
    bad = [m for m in maps if not 0 <= m < available]
    if bad:
        raise ConfigError(f"feature maps {bad} out of range; the layer has {available}")
    return maps


def layer_listing(net) -> str:
    return "\n".join(f"{name}\t{'x'.join(map(str, net.layer_shape(name)))}" for name in net.layer_names)


def cmd_deepvis(args, run: Run) -> int:
    net = load_model(run.read(args.model))
    if args.list_layers:
        print(layer_listing(net))
        return EXIT_OK
    if not args.layer or not args.image or not args.sampler or not args.out:
        raise ConfigError("deepvis needs --image, --sampler, --layer and --out (or --list-layers)")
    if args.layer not in net.layer_names:
        raise ConfigError(f"unknown layer {args.layer!r}; available layers:\n{layer_listing(net)}")
    shape = net.layer_shape(args.layer)
    if len(shape) != 3:
        raise ConfigError(f"layer {args.layer!r} has shape {shape}; feature maps need a conv-shaped layer")
    maps = _parse_maps(args.maps, shape[-1])
    args.exec = None
    image, classifier, sampler, geometry, sampling, laplace = _request_parts(args, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    style = HeatmapStyle(args.alpha, args.threshold)
    request = ExplainRequest(image, classifier, sampler, None, geometry, sampling, laplace, args.batch_size,
                             run.resolved["jobs"])
    for m in maps:
        rmap = feature_map_relevance(request, args.layer, m)
        path = run.wrote(out / f"{args.layer}_map{m:03d}.rel")
        save_relevance(path, rmap)
        if args.render:
            render_output(run, rmap, image, path, style)
        print(path)
    run.resolved.update(layer=args.layer, maps=maps)
    run.write_manifest(out / "manifest.json")
    return EXIT_OK


def cmd_sensitivity(args, run: Run) -> int:
    image = read_image(run, args.image, args.channels_last)
    classifier = open_classifier(run, args)
    classes = pick_classes(args, classifier, image)
    out = _mkparent(Path(args.out))
    style = HeatmapStyle(args.alpha, args.threshold)
    for c in classes:
        rmap = sensitivity_map(classifier, image, c, args.step, args.batch_size)
        path = run.wrote(output_for(out, f"class{c}" if len(classes) > 1 else None))
        save_relevance(path, rmap)
        if args.render:
            render_output(run, rmap, image, path, style)
        print(f"{path} ({rmap.meta['method']})")
    run.resolved = {"classes": classes}
    run.write_manifest(manifest_path(out))
    return EXIT_OK


def cmd_render(args, run: Run) -> int:
    rmap = load_relevance(run.read(args.relevance))
    nd = int(rmap.meta.get("spatial_ndim", min(rmap.sums.ndim, 3)))
    base = None
    if args.base:
        path = run.read(args.base)
        base = load_image(path, spatial_ndim=nd if path.suffix.lower() in (".pdt1", ".pdt") else None)
        if base.shape != rmap.shape:
            raise DataError(f"base image shape {base.shape} does not match map {rmap.shape}")
    style = HeatmapStyle(args.alpha, args.threshold, args.reduce)
    out = Path(args.out)
    if nd == 3 and args.slice is None:
        for p in render_volume(rmap, base, style, out, args.axis):
            run.wrote(p)
        mpath = out / "manifest.json"
    else:
        render_heatmap(rmap, base, style, run.wrote(_mkparent(out)), args.slice, args.axis)
        mpath = manifest_path(out)
    run.resolved = {"style": asdict(style)}
    print(out)
    run.write_manifest(mpath)
    return EXIT_OK


def _parse_seeds(spec: str) -> tuple[int, ...]:
    seeds = []
    try:
        for part in spec.split(","):
            lo, _, hi = part.partition("-")
            seeds.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    except ValueError:
        raise ConfigError(f"--seeds must look like 0-9 or 1,4,7, got {spec!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return tuple(seeds)


def cmd_bench(args, run: Run) -> int:
    overrides = {k: v for k, v in {
        "noise": args.noise, "mask_pixels": args.mask_pixels, "mask_fraction": args.mask_fraction,
        "train_images": args.train_images, "epochs": args.epochs, "l2": args.l2, "solver": args.solver,
        "inner": args.k, "outer": args.l, "samples": args.samples,
    }.items() if v is not None}
    if args.seeds:
        overrides["seeds"] = _parse_seeds(args.seeds)
    try:
        config = BenchConfig.quick(**overrides) if args.quick else BenchConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    report = run_benchmark(config)
    print(format_table(report))
    run.seeds = {"seeds": list(config.seeds)}
    run.resolved = {"bench": asdict(config)}
    if args.out:
        out = _mkparent(Path(args.out))
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        run.wrote(out)
        run.write_manifest(manifest_path(out))
    return EXIT_OK


def cmd_serve(args, run: Run) -> int:
    serve_protocol(load_model(run.read(args.model)))
    return EXIT_OK


def cmd_replay(args, run: Run) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv, cwd = manifest["argv"], manifest["cwd"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{args.manifest}: not a run manifest ({exc})") from exc
    here = os.getcwd()
    os.chdir(cwd)
    try:
        for path, digest in manifest["inputs"].items():
            if not Path(path).exists() or file_digest(path) != digest:
                raise DataError(f"input {path} changed since the recorded run")
        code = main(argv)
        if code != EXIT_OK:
            return code
        differ = [p for p, d in manifest["outputs"].items() if not Path(p).exists() or file_digest(p) != d]
    finally:
        os.chdir(here)
    for p in differ:
        print(f"differs: {p}", file=sys.stderr)
    print(f"replayed {manifest['command']}: {len(manifest['outputs']) - len(differ)} of "
          f"{len(manifest['outputs'])} outputs identical")
    return EXIT_RUNTIME if differ else EXIT_OK


# argument parsing ------------------------------------------------------------


def _add_classifier(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--model", help="model file written by 'preddiff train'")
    g.add_argument("--exec", help="command serving a model over the line-JSON protocol")
    p.add_argument("--timeout", type=float, default=60.0, help="seconds to wait per external reply")


def _add_style(p):
    p.add_argument("--render", action="store_true", help="also write a PNG heatmap next to each archive")
    p.add_argument("--alpha", type=float, default=1.0, help="overlay opacity at the strongest relevance")
    p.add_argument("--threshold", type=float, default=0.15, help="leave |r| below this fraction of max unpainted")


def _add_analysis(p, required=True):
    p.add_argument("--image", required=required, help="input image (png, pgm or pdt1)")
    p.add_argument("--sampler", required=required, help="marginal:DIR_OR_STACK or cond:SAMPLER_FILE")
    p.add_argument("--k", type=int, help="window side (default 10 for images, 3 for volumes)")
    p.add_argument("--l", type=int, help="conditioning patch side (default 14 for images, 7 for volumes)")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--samples", type=int, default=10, help="samples per window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laplace-n", type=int, help="training set size for the Laplace correction")
    p.add_argument("--per-channel", action="store_true", help="remove one channel at a time")
    p.add_argument("--channels-last", action="store_true", help="pdt1 input has a trailing channel axis")
    p.add_argument("--batch-size", type=int, default=128, help="sample images per classifier call")
    p.add_argument("--jobs", type=int, help=f"worker threads (default ${JOBS_ENV} or 1)")


def _add_class_choice(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--class", dest="cls", type=int, help="class to explain")
    g.add_argument("--top", type=int, help="explain the N most probable classes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preddiff", description="Prediction difference analysis.")
    parser.add_argument("--version", action="version", version=f"preddiff {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a built-in classifier")
    p.add_argument("--data", required=True, help="image directory or stacked pdt1 file")
    p.add_argument("--labels", required=True, help="labels: text (one per line), json list or pdt1")
    p.add_argument("--arch", choices=("logreg", "net"), default="logreg")
    p.add_argument("--skeleton", default='[{"type": "affine", "units": 32}, {"type": "relu"}]',
                   help="hidden layers for --arch net, as JSON or a JSON file")
    p.add_argument("--classes", type=int, help="number of classes (default: max label + 1)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, help="step size (logreg: implies --solver gd; net default 0.01)")
    p.add_argument("--solver", choices=("gd", "lbfgs"), help="logreg solver (default lbfgs, or gd with --lr)")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, help="minibatch size for --arch net (default full batch)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels-last", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-sampler", help="fit a Gaussian patch model for conditional sampling")
    p.add_argument("--data", required=True, help="image directory or stacked pdt1 file")
    p.add_argument("--outer", type=int, help="patch side (default 14 for images, 7 for volumes)")
    p.add_argument("--grid", default="1", help="location grid, e.g. 4x4 (default: one global model)")
    p.add_argument("--epsilon", type=float, help="diagonal regulariser (default 1e-5 x mean variance)")
    p.add_argument("--max-patches", type=int, default=20000)
    p.add_argument("--per-channel", action="store_true", help="model one channel at a time")
    p.add_argument("--channels-last", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_sampler)

    p = sub.add_parser("explain", help="relevance map for one input")
    _add_analysis(p)
    _add_classifier(p)
    _add_class_choice(p)
    p.add_argument("--target", default="softmax", help="softmax, presoftmax or layer:NAME:unit:IDX")
    _add_style(p)
    p.add_argument("--out", required=True, help="relevance archive path")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("deepvis", help="input relevance of hidden feature maps")
    _add_analysis(p, required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--layer")
    p.add_argument("--maps", default="all", help="'all' or a comma list of map indices")
    p.add_argument("--list-layers", action="store_true")
    _add_style(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_deepvis)

    p = sub.add_parser("sensitivity", help="gradient-magnitude baseline map")
    p.add_argument("--image", required=True)
    _add_classifier(p)
    _add_class_choice(p)
    p.add_argument("--step", type=float, help="finite-difference step for external models")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--channels-last", action="store_true")
    _add_style(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("render", help="draw a relevance archive as a PNG heatmap")
    p.add_argument("--relevance", required=True)
    p.add_argument("--base", help="image to draw under the map")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--reduce", choices=("mean", "max"), default="mean", help="channel reduction")
    p.add_argument("--slice", type=int, help="volume slice (default: all slices plus a grid)")
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--out", required=True, help="PNG path, or a directory for volumes")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="localization benchmark on planted-evidence tasks")
    p.add_argument("--quick", action="store_true", help="3 seeds, smaller training set")
    p.add_argument("--seeds", help="e.g. 0-9 or 1,4,7")
    p.add_argument("--noise", type=float)
    p.add_argument("--mask-pixels", type=int)
    p.add_argument("--mask-fraction", type=float)
    p.add_argument("--train-images", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--solver", choices=("gd", "lbfgs"), help="logreg solver (default gd)")
    p.add_argument("--k", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synthetic", help="write a planted-evidence dataset")
    p.add_argument("--shape", type=int, nargs="+", default=[20, 20])
    p.add_argument("--images", type=int, default=2000)
    p.add_argument("--mask-pixels", type=int)
    p.add_argument("--mask-fraction", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("serve", help="serve a model over the line-JSON protocol on stdin/stdout")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="rerun a recorded command and compare outputs")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


ERRORS = (
    (ConfigError, EXIT_CONFIG),
    (TrainingError, EXIT_TRAINING),
    (ExplainError, EXIT_RUNTIME),
    (ClassifierError, EXIT_RUNTIME),
    (SamplerError, EXIT_RUNTIME),
    ((DataError, ImageReadError, ShapeMismatchError, pdt1.FormatError, FileNotFoundError), EXIT_DATA),
    (ValueError, EXIT_CONFIG),
)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, argv)
    try:
        if hasattr(args, "jobs"):
            resolve_jobs(args.jobs)
        return args.func(args, run)
    except Exception as exc:
        for kinds, code in ERRORS:
            if isinstance(exc, kinds):
                print(f"preddiff {args.command}: error: {exc}", file=sys.stderr)
                return code
        raise
    finally:
        for handle in run.handles:
            handle.close()


if __name__ == "__main__":
    sys.exit(main())
