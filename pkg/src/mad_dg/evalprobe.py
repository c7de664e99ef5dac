"""Evaluation, residual domain probes, divergence proxies, view reports and sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MADNet, pool_image_feature, pool_instance_features
from .spectral import ScgConfig, scg_augment
from .synthgen import DatasetManifest, Sample, iter_batches, load_split, read_manifest
from .tensor import ParamGroup, Tensor, no_grad, ops, reset_tape, sgd_update, tensor_new
from .trainer import TrainConfig, accuracy_by_domain, component_config, load_model, prepare_images, train

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------- accuracy


def evaluate_accuracy(checkpoint, manifest: DatasetManifest, split: str = "test") -> dict:
    model = load_model(checkpoint)
    if model.cfg.n_classes != manifest.n_classes:
        raise ProbeError(f"checkpoint has {model.cfg.n_classes} classes, dataset has {manifest.n_classes}")
    samples = load_split(manifest, split)
    if not samples:
        raise ProbeError(f"split {split!r} is empty")
    return accuracy_by_domain(model, samples)


# ---------------------------------------------------------------- features


def extract_pooled(model: MADNet, samples: Sequence[Sample], level: str = "image",
                   batch_size: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Frozen features: global-pooled maps per image or box-pooled features per instance, with domain ids."""
    if level not in ("image", "instance"):
        raise ProbeError(f"unknown feature level {level!r}")
    feats, doms = [], []
    with no_grad():
        for batch in iter_batches(samples, batch_size):
            fmap = model.extract_features(prepare_images(batch.images))
            if level == "image":
                feats.append(pool_image_feature(fmap).data)
                doms.append(batch.domains)
            else:
                feats.append(pool_instance_features(fmap, batch.boxes, batch.images.shape[-1]).data)
                doms.append(np.concatenate([np.full(len(c), d) for c, d in zip(batch.classes, batch.domains)]))
    return np.concatenate(feats), np.concatenate(doms)


def branch_latents(model: MADNet, samples: Sequence[Sample], level: str = "instance",
                   batch_size: int = 100) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-view encoder outputs, flattened per row, and the row domain ids."""
    branches = model.img_branches if level == "image" else model.ins_branches
    lat: list[list[np.ndarray]] = [[] for _ in branches]
    doms = []
    with no_grad():
        for batch in iter_batches(samples, batch_size):
            fmap = model.extract_features(prepare_images(batch.images))
            if level == "image":
                feat = fmap
                doms.append(batch.domains)
            else:
                feat = pool_instance_features(fmap, batch.boxes, batch.images.shape[-1])
                doms.append(np.concatenate([np.full(len(c), d) for c, d in zip(batch.classes, batch.domains)]))
            for m, br in enumerate(branches):
                e = br.encode(feat).data
                lat[m].append(e.reshape(len(e), -1))
    return [np.concatenate(v) for v in lat], (np.concatenate(doms) if doms else np.zeros(0, dtype=int))


def _standardize(train_x: np.ndarray, *others: np.ndarray):
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train_x,) + others]


# ---------------------------------------------------------------- residual probe


@dataclass
class ProbeResult:
    phase1_accuracy: float  # shallow classifier, held-out
    phase2_accuracy: float  # deepened classifier, held-out
    phase1_curve: list[float]  # per-epoch mean training loss
    phase2_curve: list[float]
    n_domains: int
    level: str = "image"

    def __post_init__(self):
        for a in (self.phase1_accuracy, self.phase2_accuracy):
            if not 0.0 <= a <= 1.0:
                raise ProbeError(f"accuracy {a} outside [0, 1]")

    @property
    def gain(self) -> float:
        return self.phase2_accuracy - self.phase1_accuracy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain"] = self.gain
        return d


class _Probe:
    """Linear head, optionally preceded by a residual block h = x + W2 relu(W1 x + b1) + b2."""

    def __init__(self, dim: int, k: int, rng, width: int = 64):
        self.head = ParamGroup("domain_classifier")
        self.block = ParamGroup("domain_classifier")
        self.w = self.head.add("probe.w", tensor_new((dim, k), ("kaiming", dim), rng))
        self.b = self.head.add("probe.b", tensor_new((k,)))
        self.w1 = self.block.add("probe.res.w1", tensor_new((dim, width), ("kaiming", dim), rng))
        self.b1 = self.block.add("probe.res.b1", tensor_new((width,)))
        # zero second layer: the deepened probe starts exactly at the shallow solution
        self.w2 = self.block.add("probe.res.w2", tensor_new((width, dim)))
        self.b2 = self.block.add("probe.res.b2", tensor_new((dim,)))
        self.deep = False

    def groups(self) -> list[ParamGroup]:
        return [self.head, self.block] if self.deep else [self.head]

    def __call__(self, x: Tensor) -> Tensor:
        if self.deep:
            x = x + ops.linear(ops.relu(ops.linear(x, self.w1, self.b1)), self.w2, self.b2)
        return ops.linear(x, self.w, self.b)


def _fit(probe: _Probe, x: np.ndarray, y: np.ndarray, epochs: int, lr: float, batch_size: int,
         rng: np.random.Generator) -> list[float]:
    """SGD with a cosine decay to zero over the phase, so each phase ends at a settled iterate."""
    curve = []
    steps_per_epoch = -(-len(x) // batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total, n = 0.0, 0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            reset_tape()
            loss = ops.softmax_cross_entropy(probe(Tensor(x[idx])), y[idx])
            loss.backward()
            rate = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            step += 1
            for g in probe.groups():
                sgd_update(g, rate, 0.9)
            total += loss.item() * len(idx)
            n += len(idx)
        curve.append(total / n)
    return curve


def _accuracy(probe: _Probe, x: np.ndarray, y: np.ndarray) -> float:
    with no_grad():
        pred = probe(Tensor(x)).data.argmax(axis=1)
    return float((pred == y).mean())


def probe_features(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                   epochs: int = 20, lr: float = 0.05, batch_size: int = 64, width: int = 64,
                   seed: int = 0, level: str = "image") -> ProbeResult:
    """Two-phase domain probe on frozen features (labels 0..K-1)."""
    k = int(max(train_y.max(), test_y.max())) + 1
    if len(np.unique(train_y)) < 2:
        raise ProbeError("domain probe needs K >= 2 domains")
    train_x, test_x = _standardize(np.asarray(train_x, float), np.asarray(test_x, float))
    rng = np.random.default_rng([seed, 7])
    probe = _Probe(train_x.shape[1], k, rng, width)
    c1 = _fit(probe, train_x, train_y, epochs, lr, batch_size, rng)
    a1 = _accuracy(probe, test_x, test_y)
    probe.deep = True
    for _, t in probe.head:
        t.grad = None
    probe.head.momentum_buf = {}
    c2 = _fit(probe, train_x, train_y, epochs, lr, batch_size, rng)
    a2 = _accuracy(probe, test_x, test_y)
    return ProbeResult(a1, a2, c1, c2, n_domains=k, level=level)


def _domain_labels(model: MADNet, manifest: DatasetManifest, split: str, level: str, seed: int,
                   max_samples: int | None):
    sources = manifest.source_ids
    samples = load_split(manifest, split, sources)
    if max_samples:
        samples = samples[:max_samples] if len(sources) < 2 else _balanced(samples, max_samples)
    if len(sources) >= 2:
        x, d = extract_pooled(model, samples, level)
        index = {s: i for i, s in enumerate(sources)}
        return x, np.asarray([index[int(v)] for v in d])
    # single source: the augmentation defines the second domain
    rng = np.random.default_rng([seed, 11])
    aug = [Sample(scg_augment(s.image, ScgConfig(), rng), s.boxes, s.classes, 1) for s in samples]
    plain = [Sample(s.image, s.boxes, s.classes, 0) for s in samples]
    x, d = extract_pooled(model, plain + aug, level)
    return x, d.astype(int)


def _balanced(samples: Sequence[Sample], n: int) -> list[Sample]:
    groups: dict[int, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.domain_id, []).append(s)
    per = max(1, n // len(groups))
    return [s for d in sorted(groups) for s in groups[d][:per]]


def residual_probe(checkpoint, manifest: DatasetManifest, level: str = "image", epochs: int = 20,
                   seed: int = 0, max_samples: int | None = None, model: MADNet | None = None) -> ProbeResult:
    """Train a shallow then a residually deepened domain classifier on frozen extractor features.

    Trains on the source train split and reports held-out accuracy on the source test split.
    """
    model = model if model is not None else load_model(checkpoint)
    if len(manifest.source_ids) < 1:
        raise ProbeError("dataset has no source domains")
    tx, ty = _domain_labels(model, manifest, "train", level, seed, max_samples)
    vx, vy = _domain_labels(model, manifest, "test", level, seed + 1, max_samples)
    if len(np.unique(ty)) < 2:
        raise ProbeError("residual probe needs K >= 2 domains")
    return probe_features(tx, ty, vx, vy, epochs=epochs, seed=seed, level=level)


# ---------------------------------------------------------------- divergence


def a_distance_proxy(group_a: np.ndarray, group_b: np.ndarray, seed: int = 0, steps: int = 300,
                     lr: float = 0.5) -> float:
    """2 (1 - 2 err) of a linear domain classifier trained on half of each group, clamped to [0, 2].

    Logistic regression by full-batch gradient descent from zero, with the two
    groups' gradient contributions summed separately; swapping the groups negates
    the weights exactly, so the value is exactly symmetric.
    """
    groups = [np.asarray(group_a, dtype=np.float64), np.asarray(group_b, dtype=np.float64)]
    for g in groups:
        if g.ndim != 2 or len(g) < 50:
            raise ProbeError("a_distance_proxy needs two groups of >= 50 feature rows")
    if groups[0].shape[1] != groups[1].shape[1]:
        raise ProbeError("feature widths differ between groups")
    halves = []
    for g in groups:
        perm = np.random.default_rng(seed).permutation(len(g))
        cut = len(g) // 2
        halves.append((g[perm[:cut]], g[perm[cut:]]))
    (a_tr, a_te), (b_tr, b_te) = halves
    n = len(a_tr) + len(b_tr)
    mu = (a_tr.sum(axis=0) + b_tr.sum(axis=0)) / n
    var = (((a_tr - mu) ** 2).sum(axis=0) + ((b_tr - mu) ** 2).sum(axis=0)) / n
    sd = np.where(var > 1e-24, np.sqrt(var), 1.0)
    a_tr, a_te, b_tr, b_te = [(x - mu) / sd for x in (a_tr, a_te, b_tr, b_te)]
    w = np.zeros(a_tr.shape[1])
    b = 0.0
    for _ in range(steps):
        # group a has label +1, group b label -1; logistic loss log(1 + exp(-s f))
        ca = -_sigmoid(-(a_tr @ w + b))
        cb = _sigmoid(b_tr @ w + b)
        gw = (ca @ a_tr + cb @ b_tr) / n
        gb = (ca.sum() + cb.sum()) / n
        w = w - lr * gw
        b = b - lr * gb
    errors = int((a_te @ w + b <= 0).sum()) + int((b_te @ w + b >= 0).sum())
    err = errors / (len(a_te) + len(b_te))
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- view divergence


@dataclass
class ViewReport:
    levels: dict = field(default_factory=dict)  # level -> {"distances": MxM, "projection": [...], "view": [...]}
    notice: str | None = None

    def to_dict(self) -> dict:
        return {"levels": self.levels, "notice": self.notice}


def pairwise_view_distances(latents: Sequence[np.ndarray]) -> np.ndarray:
    """M x M mean over rows of the squared L2 distance between views; diagonal exactly 0."""
    m = len(latents)
    d = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if i != j:
                diff = latents[i] - latents[j]
                d[i, j] = float(np.mean(np.sum(diff * diff, axis=1)))
    return d


def pca_projection(latents: Sequence[np.ndarray], k: int = 2) -> np.ndarray:
    """Project the stacked latents of every view onto their top-k principal directions."""
    x = np.concatenate(latents)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:k]
    # fix the sign of each direction for reproducible plots
    signs = np.sign(basis[np.arange(len(basis)), np.abs(basis).argmax(axis=1)])
    return x @ (basis * signs[:, None]).T


def view_divergence_report(checkpoint, samples: Sequence[Sample], model: MADNet | None = None,
                           project: bool = True) -> ViewReport:
    model = model if model is not None else load_model(checkpoint)
    report = ViewReport()
    for level in ("image", "instance"):
        lat, dom = branch_latents(model, samples, level)
        if len(lat) < 2:
            continue
        entry = {"distances": pairwise_view_distances(lat).tolist(), "n_rows": int(len(dom))}
        if project:
            proj = pca_projection(lat)
            entry["projection"] = proj.tolist()
            entry["view"] = [m for m in range(len(lat)) for _ in range(len(dom))]
            entry["domain"] = [int(d) for _ in range(len(lat)) for d in dom]
        report.levels[level] = entry
    if not report.levels:
        report.notice = "fewer than two views per level: no divergence to report"
        log.warning(report.notice)
    return report


def mean_off_diagonal(d) -> float:
    d = np.asarray(d, dtype=np.float64)
    m = len(d)
    if m < 2:
        return 0.0
    return float(d[~np.eye(m, dtype=bool)].mean())


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepCell:
    params: dict
    seeds: list[int]
    target_acc: list[float | None]
    source_acc: list[float | None]
    errors: list[str | None]

    @property
    def ok(self) -> list[float]:
        return [a for a in self.target_acc if a is not None]

    @property
    def mean(self) -> float:
        v = self.ok
        return float(np.mean(v)) if v else float("nan")

    @property
    def std(self) -> float:
        """Sample standard deviation over the successful seeds (ddof = 1)."""
        v = self.ok
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, std=self.std)
        return d


@dataclass
class SweepTable:
    axes: dict  # axis name -> list of values
    cells: list[SweepCell]

    def cell(self, **params) -> SweepCell:
        for c in self.cells:
            if all(c.params.get(k) == v for k, v in params.items()):
                return c
        raise KeyError(params)

    def to_dict(self) -> dict:
        return {"axes": self.axes, "cells": [c.to_dict() for c in self.cells]}


SWEEP_AXES = ("n_views", "lam", "components")
CSV_FIELDS = ["cell", "n_views", "lam", "components", "seeds", "n_ok", "mean_target_acc", "std_target_acc",
              "mean_source_acc", "errors"]


def _cell_config(base: TrainConfig, params: dict, seed: int) -> TrainConfig:
    overrides = {k: v for k, v in params.items() if k != "components"}
    if "components" in params:
        keep = {k: getattr(base, k) for k in ("epochs", "lr", "lr_drop", "drop_epoch", "lr_scale", "momentum",
                                             "batch_size", "mu", "scg_mode", "scg_sigma", "scg_r_low",
                                             "scg_r_high", "mv_variant", "mv_tau", "widths", "latent",
                                             "use_mv", "paired_only")}
        cfg = component_config(params["components"], **keep)
        if cfg.n_views:
            cfg = replace(cfg, n_views=base.n_views, lam=base.lam)
        return replace(cfg, seed=seed, **overrides)
    return replace(base, seed=seed, **overrides)


def _run_cell(args) -> dict:
    cfg_dict, data_path, run_dir = args
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
        manifest = read_manifest(data_path)
        report, _ = train(cfg, manifest, out_dir=run_dir)
        return {"target": report.target_accuracy, "source": report.source_accuracy, "error": None}
    except Exception as exc:  # recorded per cell; the sweep continues
        return {"target": None, "source": None, "error": f"{type(exc).__name__}: {exc}"}


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        raise ProbeError("sweep grid is empty")
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ProbeError(f"unknown sweep axes {sorted(unknown)}; expected {SWEEP_AXES}")
    names = [a for a in SWEEP_AXES if a in grid]
    values = [list(grid[a]) for a in names]
    if any(not v for v in values):
        raise ProbeError("every sweep axis needs at least one value")
    cells = []
    for combo in itertools.product(*values):
        p = dict(zip(names, combo))
        if "components" in p:
            p["components"] = sorted({c.upper() for c in p["components"]})
        cells.append(p)
    return cells


def ablation_sweep(base: TrainConfig, grid: dict, seeds: Sequence[int], data_path, out_dir,
                   workers: int = 1) -> SweepTable:
    """Train and evaluate every (cell, seed); each run is an independent child process.

    ``workers=0`` runs in-process (sequentially), which is convenient for debugging.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ProbeError("a sweep needs at least 3 seeds")
    cells = expand_grid(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for ci, params in enumerate(cells):
        for seed in seeds:
            cfg = _cell_config(base, params, seed)
            jobs.append((cfg.to_dict(), str(data_path), str(out / f"cell{ci:02d}" / f"seed{seed}")))
    if workers == 0:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    table_cells = []
    for ci, params in enumerate(cells):
        res = results[ci * len(seeds):(ci + 1) * len(seeds)]
        table_cells.append(SweepCell(params=params, seeds=list(seeds), target_acc=[r["target"] for r in res],
                                     source_acc=[r["source"] for r in res], errors=[r["error"] for r in res]))
        for seed, r in zip(seeds, res):
            if r["error"]:
                log.error("cell %s seed %d failed: %s", params, seed, r["error"])
    axes = {a: [list(v) if isinstance(v, (list, tuple)) else v for v in grid[a]] for a in SWEEP_AXES if a in grid}
    table = SweepTable(axes=axes, cells=table_cells)
    write_sweep(table, out)
    return table


def write_sweep(table: SweepTable, out_dir) -> None:
    out = Path(out_dir)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for i, c in enumerate(table.cells):
            src = [a for a in c.source_acc if a is not None]
            w.writerow({"cell": i, "n_views": c.params.get("n_views", ""), "lam": c.params.get("lam", ""),
                        "components": "+".join(c.params["components"]) if "components" in c.params else "",
                        "seeds": " ".join(map(str, c.seeds)), "n_ok": len(c.ok),
                        "mean_target_acc": repr(c.mean), "std_target_acc": repr(c.std),
                        "mean_source_acc": repr(float(np.mean(src))) if src else "nan",
                        "errors": json.dumps([e for e in c.errors if e])})
    (out / "sweep.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    from .plots import sweep_plot

    sweep_plot(table, out / "sweep.svg")


def read_sweep(path) -> SweepTable:
    d = json.loads(Path(path).read_text())
    cells = [SweepCell(params=c["params"], seeds=c["seeds"], target_acc=c["target_acc"],
                       source_acc=c["source_acc"], errors=c["errors"]) for c in d["cells"]]
    return SweepTable(axes=d["axes"], cells=cells)


def pooled_std(cells: Sequence[SweepCell]) -> float:
    """sqrt of the dof-weighted mean of per-cell sample variances."""
    num = sum((len(c.ok) - 1) * c.std ** 2 for c in cells if len(c.ok) > 1)
    den = sum(len(c.ok) - 1 for c in cells if len(c.ok) > 1)
    return math.sqrt(num / den) if den else 0.0
