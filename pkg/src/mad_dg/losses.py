"""Reconstruction, domain, view-spread and consistency losses and their composition.

All terms are batch means. Composition is done on plain floats in a fixed
association order so the logged identities hold bitwise.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import Tensor, TensorError, ops

log = logging.getLogger(__name__)

MV_VARIANTS = ("raw", "hinge")


def _zero() -> Tensor:
    return Tensor(0.0)


def loss_rc(features: Tensor, recons: Sequence[Tensor]) -> Tensor:
    """(1/M) sum_m MSE(s, g_m(e_m(s))); the feature is a fixed target."""
    if not recons:
        return _zero()
    target = features.detach()
    total = None
    for r in recons:
        term = ops.mse(r, target)
        total = term if total is None else total + term
    return total / len(recons)


def loss_dc(logits: Sequence[Tensor], labels, n_domains: int) -> Tensor:
    """Mean over branches of the batch-mean cross-entropy.

    Image-level logits [B, K, h, w] are scored per pixel.
    """
    if not logits:
        return _zero()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_domains):
        raise TensorError(f"domain label out of range for {n_domains} domains")
    total = None
    for lg in logits:
        if lg.data.ndim == 4:
            b, k, h, w = lg.shape
            flat = ops.reshape(ops.transpose(lg, (0, 2, 3, 1)), (b * h * w, k))
            term = ops.softmax_cross_entropy(flat, np.repeat(labels, h * w))
        else:
            term = ops.softmax_cross_entropy(lg, labels)
        total = term if total is None else total + term
    return total / len(logits)


def _flat(e: Tensor) -> Tensor:
    return e if e.data.ndim == 2 else ops.reshape(e, (e.shape[0], -1))


def loss_mv(latents: Sequence[Tensor], variant: str = "hinge", tau: float = 4.0) -> Tensor:
    """View-spread over ordered branch pairs i != j, divided by M^2 - M.

    raw:   -||e_i - e_j||^2 (unbounded below)
    hinge: max(0, tau - ||e_i - e_j||^2), in [0, tau]
    """
    if variant not in MV_VARIANTS:
        raise TensorError(f"unknown view-spread variant {variant!r}")
    m = len(latents)
    if m < 2:
        if m == 1:
            log.debug("view-spread loss is 0 for a single view")
        return _zero()
    shape = latents[0].shape
    if any(e.shape != shape for e in latents):
        raise TensorError("latent shapes differ across branches")
    flat = [_flat(e) for e in latents]
    total = None
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            d2 = ops.sum(ops.square(flat[i] - flat[j]), axis=1)
            term = ops.mean(ops.relu(tau - d2)) if variant == "hinge" else ops.neg(ops.mean(d2))
            total = term if total is None else total + term
    return total / (m * m - m)


def loss_cst(img_probs: Sequence[Tensor], ins_probs: Sequence[Tensor], instance_image: Sequence[int],
             batch_size: int, paired_only: bool = False) -> Tensor:
    """sum_{i,j} sum_n || mean_uv p_i^(u,v) - p_{j,n} ||_2, averaged over images.

    img_probs[i] is [B, K] (pixel-averaged probabilities), ins_probs[j] is [N, K],
    instance_image[n] is the image index of instance n.
    """
    if not img_probs or not ins_probs:
        return _zero()
    if batch_size < 1:
        raise TensorError("consistency loss needs a non-empty batch (|I| = 0)")
    idx = np.asarray(instance_image, dtype=np.int64)
    total = None
    for i, pi in enumerate(img_probs):
        gathered = ops.take_rows(pi, idx)
        for j, pj in enumerate(ins_probs):
            if paired_only and i != j:
                continue
            term = ops.sum(ops.row_norm(gathered - pj))
            total = term if total is None else total + term
    return total / batch_size


def loss_mvdc(rc, dc, mv):
    """L_RC + L_DC + L_MV (tensors or floats)."""
    return rc + dc + mv


def loss_mad(l_det, l_mvdc_img, l_mvdc_ins, l_cst, lam: float):
    if lam < 0:
        raise TensorError(f"trade-off weight must be >= 0, got {lam}")
    return l_det + lam * (l_mvdc_img + l_mvdc_ins + l_cst)


@dataclass
class LossBreakdown:
    l_det: float = 0.0
    l_rc_img: float = 0.0
    l_rc_ins: float = 0.0
    l_dc_img: float = 0.0
    l_dc_ins: float = 0.0
    l_mv_img: float = 0.0
    l_mv_ins: float = 0.0
    l_cst: float = 0.0
    l_mvdc_img: float = 0.0
    l_mvdc_ins: float = 0.0
    l_mad: float = 0.0

    @classmethod
    def compose(cls, lam: float, l_det: float, rc_img: float, dc_img: float, mv_img: float,
                rc_ins: float, dc_ins: float, mv_ins: float, cst: float) -> "LossBreakdown":
        img = loss_mvdc(rc_img, dc_img, mv_img)
        ins = loss_mvdc(rc_ins, dc_ins, mv_ins)
        return cls(l_det=l_det, l_rc_img=rc_img, l_rc_ins=rc_ins, l_dc_img=dc_img, l_dc_ins=dc_ins,
                   l_mv_img=mv_img, l_mv_ins=mv_ins, l_cst=cst, l_mvdc_img=img, l_mvdc_ins=ins,
                   l_mad=loss_mad(l_det, img, ins, cst, lam))

    def check(self, lam: float) -> bool:
        """Composition identities, compared bitwise."""
        return (self.l_mvdc_img == loss_mvdc(self.l_rc_img, self.l_dc_img, self.l_mv_img)
                and self.l_mvdc_ins == loss_mvdc(self.l_rc_ins, self.l_dc_ins, self.l_mv_ins)
                and self.l_mad == loss_mad(self.l_det, self.l_mvdc_img, self.l_mvdc_ins, self.l_cst, lam))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, rows: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not rows:
            return cls()
        return cls(**{k: float(np.mean([getattr(r, k) for r in rows])) for k in cls.field_names()})
