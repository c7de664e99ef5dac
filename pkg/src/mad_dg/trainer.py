"""Deterministic minimax training: augmentation, forward, routed backward, SGD."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .losses import LossBreakdown
from .model import MADNet, ModelConfig, pool_instance_features
from .spectral import ScgConfig, scg_augment
from .synthgen import BACKGROUND, Batch, DatasetManifest, Sample, iter_batches, load_split
from .tensor import NonFiniteError, Tensor, kernels, no_grad, ops, reset_tape, save_checkpoint, sgd_update

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.002
    lr_drop: float = 0.0002
    drop_epoch: int = 7
    lr_scale: float = 1.0
    momentum: float = 0.9
    batch_size: int = 16
    lam: float = 0.1
    n_views: int = 3
    mu: float = 1.0
    use_img: bool = True
    use_ins: bool = True
    use_cst: bool = True
    paired_only: bool = False
    scg: bool = True
    scg_mode: str = "intent"
    scg_sigma: float = 1.0
    scg_r_low: float = 2.0
    scg_r_high: float | None = None
    scg_fraction: float = 0.5
    use_mv: bool = True
    mv_variant: str = "hinge"
    mv_tau: float = 4.0
    widths: tuple[int, int, int] = (16, 32, 32)
    latent: int = 16
    same_dilation: bool = False
    shared_init: bool = False
    seed: int = 0
    eval_split: str = "test"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def scg_config(self) -> ScgConfig:
        return ScgConfig(r_low=self.scg_r_low, r_high=self.scg_r_high, mode=self.scg_mode,
                         sigma=self.scg_sigma, seed=self.seed)

    @property
    def has_branches(self) -> bool:
        return self.n_views > 0 and (self.use_img or self.use_ins)


METHODS = {
    "erm": dict(lam=0.0, n_views=0, scg=False, use_cst=False),
    "dann": dict(n_views=1, scg=False, use_cst=False),
    "mad": dict(),
}

COMPONENTS = ("SCG", "IMG", "INS", "CST")


def method_config(name: str, **overrides) -> TrainConfig:
    """ERM baseline, single-view DANN, or full MAD."""
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {sorted(METHODS)}")
    return replace(TrainConfig(), **{**METHODS[name], **overrides})


def component_config(components: Sequence[str], **overrides) -> TrainConfig:
    """Ablation cell: enable a subset of {SCG, IMG, INS, CST} on top of the task baseline."""
    comps = {c.upper() for c in components}
    unknown = comps - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    use_img, use_ins = "IMG" in comps, "INS" in comps
    base = dict(scg="SCG" in comps, use_img=use_img, use_ins=use_ins,
                use_cst="CST" in comps and use_img and use_ins)
    if not (use_img or use_ins):
        base.update(n_views=0, lam=0.0)
    return replace(TrainConfig(), **{**base, **overrides})


def lr_schedule(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Step schedule: base rate before the drop epoch, the dropped rate from it on."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = cfg.lr if epoch < cfg.drop_epoch else cfg.lr_drop
    return lr * cfg.lr_scale


def prepare_images(images: np.ndarray) -> Tensor:
    return Tensor(images - BACKGROUND)


def build_model(cfg: TrainConfig, n_domains: int, n_classes: int) -> MADNet:
    return MADNet(ModelConfig(widths=cfg.widths, latent=cfg.latent, n_classes=n_classes,
                              n_domains=max(1, n_domains), n_views=cfg.n_views if cfg.has_branches else 0,
                              use_img=cfg.use_img, use_ins=cfg.use_ins, same_dilation=cfg.same_dilation,
                              shared_init=cfg.shared_init, seed=cfg.seed))


@dataclass
class StepTensors:
    objective: Tensor
    breakdown: LossBreakdown


def compose_losses(model: MADNet, images: np.ndarray, boxes: Sequence[np.ndarray], classes: np.ndarray,
                   domain_labels: np.ndarray, n_domains: int, cfg: TrainConfig,
                   routing: str = "adversarial") -> StepTensors:
    """Forward pass and all loss terms.

    routing="adversarial": branch paths see grad_reverse(s, mu * lam) for the
    domain losses and detached features elsewhere; the objective is
    l_det + l_mvdc_img + l_mvdc_ins + l_cst, so branches minimize their
    losses at full strength while the extractor receives -mu * lam * dL_DC.
    routing="plain": no reversal or detaching; the objective is L_MAD itself.
    """
    if routing not in ("adversarial", "plain"):
        raise ValueError(f"unknown routing {routing!r}")
    plain = routing == "plain"
    x = prepare_images(images)
    fmap = model.extract_features(x)
    inst = pool_instance_features(fmap, boxes, images.shape[-1])
    l_det = ops.softmax_cross_entropy(model.task_forward(inst), classes)

    domain_on = n_domains >= 2
    mu_eff = cfg.mu * cfg.lam
    inst_image = np.concatenate([np.full(len(b), i) for i, b in enumerate(boxes)])
    inst_domains = domain_labels[inst_image]
    zero = Tensor(0.0)
    terms = {}
    probs = {}
    for level, feat, branches, labels in (("image", fmap, model.img_branches, domain_labels),
                                           ("instance", inst, model.ins_branches, inst_domains)):
        if not branches:
            terms[level] = (zero, zero, zero)
            probs[level] = []
            continue
        outs = [model.branch_forward(level, feat, m, mu_eff, with_probs=domain_on and cfg.use_cst,
                                     detach_rc=not plain) for m in range(len(branches))]
        rc = losses.loss_rc(feat, [o.recon for o in outs]) if not plain else _plain_rc(feat, outs)
        dc = losses.loss_dc([o.logits for o in outs], labels, n_domains) if domain_on else zero
        mv = losses.loss_mv([o.latent for o in outs], cfg.mv_variant, cfg.mv_tau) if cfg.use_mv else zero
        terms[level] = (rc, dc, mv)
        probs[level] = [o.probs for o in outs if o.probs is not None]
    cst = zero
    if domain_on and cfg.use_cst and probs["image"] and probs["instance"]:
        cst = losses.loss_cst(probs["image"], probs["instance"], inst_image, len(images), cfg.paired_only)
    mvdc_img = losses.loss_mvdc(*terms["image"])
    mvdc_ins = losses.loss_mvdc(*terms["instance"])
    if plain:
        objective = losses.loss_mad(l_det, mvdc_img, mvdc_ins, cst, cfg.lam)
    elif model.img_branches or model.ins_branches:
        objective = l_det + (mvdc_img + mvdc_ins + cst)
    else:
        objective = l_det
    (rc_i, dc_i, mv_i), (rc_n, dc_n, mv_n) = terms["image"], terms["instance"]
    bd = LossBreakdown.compose(cfg.lam, l_det.item(), rc_i.item(), dc_i.item(), mv_i.item(),
                               rc_n.item(), dc_n.item(), mv_n.item(), cst.item())
    return StepTensors(objective=objective, breakdown=bd)


def _plain_rc(feat: Tensor, outs) -> Tensor:
    total = None
    for o in outs:
        term = ops.mse(o.recon, feat)
        total = term if total is None else total + term
    return total / len(outs)


def apply_scg(batch: Batch, cfg: TrainConfig, rng: np.random.Generator, single_source: bool):
    """Augment a random half of the batch; returns (images, domain labels override or None)."""
    images = batch.images.copy()
    b = len(images)
    n_aug = int(round(cfg.scg_fraction * b))
    chosen = np.sort(rng.permutation(b)[:n_aug])
    if n_aug:
        images[chosen] = scg_augment(images[chosen], cfg.scg_config(), rng)
    if single_source:
        labels = np.zeros(b, dtype=np.int64)
        labels[chosen] = 1
        return images, labels
    return images, None


def adversarial_step(batch: Batch, model: MADNet, cfg: TrainConfig, lr: float, domain_index: dict[int, int],
                     rng: np.random.Generator, single_source: bool = False) -> LossBreakdown:
    images = batch.images
    labels = np.asarray([domain_index[d] for d in batch.domains], dtype=np.int64)
    n_domains = len(domain_index)
    if cfg.scg:
        images, override = apply_scg(batch, cfg, rng, single_source)
        if override is not None:
            labels, n_domains = override, 2
    classes = np.concatenate(batch.classes)
    reset_tape()
    try:
        st = compose_losses(model, images, batch.boxes, classes, labels, n_domains, cfg)
        st.objective.backward()
        for group in model.param_groups():
            sgd_update(group, lr, cfg.momentum, allow_missing=True)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite loss: first non-finite tensor from {exc}") from exc
    return st.breakdown


def accuracy_by_domain(model: MADNet, samples: Sequence[Sample], batch_size: int = 100) -> dict:
    """Instance classification accuracy per domain id and overall."""
    if not samples:
        raise ValueError("empty split")
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    with no_grad():
        for batch in iter_batches(samples, batch_size):
            fmap = model.extract_features(prepare_images(batch.images))
            inst = pool_instance_features(fmap, batch.boxes, batch.images.shape[-1])
            pred = model.task_forward(inst).data.argmax(axis=1)
            truth = np.concatenate(batch.classes)
            dom = np.concatenate([np.full(len(c), d) for c, d in zip(batch.classes, batch.domains)])
            for d in np.unique(dom):
                sel = dom == d
                correct[int(d)] = correct.get(int(d), 0) + int((pred[sel] == truth[sel]).sum())
                total[int(d)] = total.get(int(d), 0) + int(sel.sum())
    per = {str(d): correct[d] / total[d] for d in sorted(total)}
    return {"per_domain": per, "counts": {str(d): total[d] for d in sorted(total)},
            "overall": sum(correct.values()) / sum(total.values())}


@dataclass
class RunReport:
    config: dict
    dataset_hash: str
    kernel_backend: str
    source_domains: list[int]
    target_domains: list[int]
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoint: str | None = None
    wall_time: float = 0.0
    log_rows: list[dict] = field(default_factory=list, repr=False)

    @property
    def target_accuracy(self) -> float:
        per = self.final["per_domain"]
        return float(np.mean([per[str(d)] for d in self.target_domains]))

    @property
    def source_accuracy(self) -> float:
        per = self.final["per_domain"]
        return float(np.mean([per[str(d)] for d in self.source_domains]))

    def to_json_dict(self) -> dict:
        """Deterministic content only (wall time goes to run_meta.json)."""
        return {"config": self.config, "dataset_hash": self.dataset_hash, "kernel_backend": self.kernel_backend,
                "source_domains": self.source_domains, "target_domains": self.target_domains,
                "epochs": self.epochs, "final": self.final, "checkpoint": self.checkpoint,
                "target_accuracy": self.target_accuracy, "source_accuracy": self.source_accuracy}


LOG_FIELDS = ["step", "epoch"] + LossBreakdown.field_names() + ["lr", "seed"]


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir=None, train_samples=None,
          eval_samples=None) -> tuple[RunReport, MADNet]:
    """Run cfg.epochs epochs over the source domains' train split, evaluating after each epoch."""
    t0 = time.perf_counter()
    sources = manifest.source_ids
    if not sources:
        raise TrainingError("dataset has no source domains")
    train_samples = train_samples if train_samples is not None else load_split(manifest, "train", sources)
    if eval_samples is None:
        eval_samples = load_split(manifest, cfg.eval_split)
    for s in train_samples:
        if s.domain_id not in sources:
            raise TrainingError(f"training sample from non-source domain {s.domain_id}")
        if s.image.shape[-1] != manifest.image_size or (s.classes >= manifest.n_classes).any():
            raise TrainingError("dataset samples do not match the manifest")
    domain_index = {d: i for i, d in enumerate(sources)}
    single_source = len(sources) == 1
    n_domains = 2 if (single_source and cfg.scg) else len(sources)
    if n_domains < 2 and cfg.has_branches:
        log.info("single domain without SCG: domain losses skipped")
    model = build_model(cfg, n_domains, manifest.n_classes)
    rng = np.random.default_rng([cfg.seed, 1])
    report = RunReport(config=cfg.to_dict(), dataset_hash=manifest.content_hash(), kernel_backend=kernels.BACKEND,
                       source_domains=list(sources), target_domains=list(manifest.target_ids))
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        rows = []
        for batch in iter_batches(train_samples, cfg.batch_size, shuffle_seed=cfg.seed * 1000 + epoch):
            bd = adversarial_step(batch, model, cfg, lr, domain_index, rng, single_source)
            if not bd.check(cfg.lam):
                raise TrainingError(f"loss composition identity violated at step {step}")
            rows.append(bd)
            report.log_rows.append({"step": step, "epoch": epoch, **bd.to_dict(), "lr": lr, "seed": cfg.seed})
            step += 1
        acc = accuracy_by_domain(model, eval_samples)
        report.epochs.append({"epoch": epoch, "lr": lr, "losses": LossBreakdown.mean(rows).to_dict(),
                              "accuracy": acc})
        log.info("epoch %d lr %.4g l_det %.4f acc %s", epoch, lr, report.epochs[-1]["losses"]["l_det"],
                 {k: round(v, 3) for k, v in acc["per_domain"].items()})
    report.final = report.epochs[-1]["accuracy"] if report.epochs else accuracy_by_domain(model, eval_samples)
    report.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        write_run(report, model, out_dir)
    return report, model


def write_run(report: RunReport, model: MADNet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.checkpoint = "model.ckpt"
    save_checkpoint(out / "model.ckpt", model.param_groups(),
                    meta={**model.state_meta(), "train": report.config})
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in report.log_rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path) -> MADNet:
    from .tensor import load_into, read_checkpoint

    header, _ = read_checkpoint(path)
    model = MADNet(ModelConfig.from_dict(header["meta"]["model"]))
    load_into(path, model.param_groups())
    return model
