"""Shared extractor, instance task head and multi-view domain-classifier branches."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ParamGroup, Tensor, TensorError, check_partition, no_grad, ops, tensor_new


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    widths: tuple[int, int, int] = (16, 32, 32)
    latent: int = 16
    n_classes: int = 4
    n_domains: int = 2
    n_views: int = 3  # M
    use_img: bool = True
    use_ins: bool = True
    same_dilation: bool = False  # every image branch uses dilation 1 (control)
    shared_init: bool = False  # every branch starts from branch 0's weights (control)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ModelError("widths needs three positive channel counts")
        if self.n_views < 0 or self.latent < 1 or self.n_classes < 1 or self.n_domains < 1:
            raise ModelError("invalid model sizes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Conv:
    def __init__(self, group: ParamGroup, name: str, c_in: int, c_out: int, k: int, rng,
                 stride: int = 1, dilation: int = 1, padding: int = 0):
        fan_in = c_in * k * k
        self.w = group.add(f"{name}.w", tensor_new((c_out, c_in, k, k), ("kaiming", fan_in), rng))
        self.b = group.add(f"{name}.b", tensor_new((c_out,)))
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, self.stride, self.dilation, self.padding)


class Dense:
    def __init__(self, group: ParamGroup, name: str, n_in: int, n_out: int, rng):
        self.w = group.add(f"{name}.w", tensor_new((n_in, n_out), ("kaiming", n_in), rng))
        self.b = group.add(f"{name}.b", tensor_new((n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class FeatureExtractor:
    """Three 3x3 conv blocks, each stride 2 with relu: [B, C, H, W] -> [B, widths[-1], H/8, W/8]."""

    def __init__(self, cfg: ModelConfig, rng):
        self.group = ParamGroup("extractor")
        chans = (cfg.in_channels,) + cfg.widths
        self.convs = [Conv(self.group, f"extractor.conv{i}", chans[i], chans[i + 1], 3, rng, stride=2, padding=1)
                      for i in range(3)]

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ModelError(f"image extents {h}x{w} must be divisible by 8")
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


class TaskHead:
    """Linear instance classifier on pooled box features."""

    def __init__(self, cfg: ModelConfig, rng):
        self.group = ParamGroup("task_head")
        self.fc = Dense(self.group, "task.fc", cfg.widths[-1], cfg.n_classes, rng)

    def __call__(self, inst: Tensor) -> Tensor:
        if inst.shape[0] < 1:
            raise ModelError("task head needs at least one instance")
        return self.fc(inst)


class ImageBranch:
    """1x1 conv -> relu -> dilated 3x3 conv (latent); mirrored decoder; pixelwise domain classifier."""

    def __init__(self, cfg: ModelConfig, m: int, rng):
        c, z = cfg.widths[-1], cfg.latent
        self.dilation = 1 if cfg.same_dilation else m + 1
        d = self.dilation
        self.encoder = ParamGroup("encoder")
        self.decoder = ParamGroup("decoder")
        self.classifier = ParamGroup("domain_classifier")
        p = f"img{m}"
        self.enc_in = Conv(self.encoder, f"{p}.enc.in", c, z, 1, rng)
        self.enc_dil = Conv(self.encoder, f"{p}.enc.dil", z, z, 3, rng, dilation=d, padding=d)
        self.dec_dil = Conv(self.decoder, f"{p}.dec.dil", z, z, 3, rng, dilation=d, padding=d)
        self.dec_out = Conv(self.decoder, f"{p}.dec.out", z, c, 1, rng)
        self.cls = Conv(self.classifier, f"{p}.cls", z, cfg.n_domains, 1, rng)

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.encoder, self.decoder, self.classifier]

    def encode(self, s: Tensor) -> Tensor:
        return self.enc_dil(ops.relu(self.enc_in(s)))

    def decode(self, e: Tensor) -> Tensor:
        return self.dec_out(ops.relu(self.dec_dil(ops.relu(e))))

    def classify(self, e: Tensor) -> Tensor:
        """Per-pixel domain logits [B, K, h, w]."""
        return self.cls(ops.relu(e))


class InstanceBranch:
    """Fully connected encoder 32 -> 16, decoder 16 -> 32, domain classifier 16 -> K."""

    def __init__(self, cfg: ModelConfig, m: int, rng):
        c, z = cfg.widths[-1], cfg.latent
        self.encoder = ParamGroup("encoder")
        self.decoder = ParamGroup("decoder")
        self.classifier = ParamGroup("domain_classifier")
        p = f"ins{m}"
        self.enc = Dense(self.encoder, f"{p}.enc", c, z, rng)
        self.dec = Dense(self.decoder, f"{p}.dec", z, c, rng)
        self.cls = Dense(self.classifier, f"{p}.cls", z, cfg.n_domains, rng)

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.encoder, self.decoder, self.classifier]

    def encode(self, s: Tensor) -> Tensor:
        return self.enc(s)

    def decode(self, e: Tensor) -> Tensor:
        return self.dec(ops.relu(e))

    def classify(self, e: Tensor) -> Tensor:
        return self.cls(ops.relu(e))


def box_cells(boxes_per_image: Sequence[np.ndarray], scale: int, map_h: int, map_w: int):
    """Project pixel boxes onto map cells (divide by scale, round outward)."""
    cells = []
    for bi, boxes in enumerate(boxes_per_image):
        for x0, y0, x1, y1 in np.asarray(boxes).reshape(-1, 4):
            r0, c0 = int(y0) // scale, int(x0) // scale
            r1 = min(map_h, -(-int(y1) // scale))
            c1 = min(map_w, -(-int(x1) // scale))
            if r1 <= r0 or c1 <= c0:
                raise ModelError(f"box {(x0, y0, x1, y1)} projects to zero map cells")
            cells.append((bi, r0, c0, r1, c1))
    return cells


def pool_image_feature(fmap: Tensor) -> Tensor:
    """Global average pool [B, C, h, w] -> [B, C]."""
    return ops.mean(fmap, axis=(2, 3))


def pool_instance_features(fmap: Tensor, boxes_per_image: Sequence[np.ndarray], image_size: int) -> Tensor:
    """Channelwise mean of the map cells each box covers, boxes in input order."""
    scale = image_size // fmap.shape[-1]
    return ops.box_pool(fmap, box_cells(boxes_per_image, scale, fmap.shape[2], fmap.shape[3]))


@dataclass
class BranchOutput:
    latent: Tensor  # encoder output on the detached feature (drives L_RC / L_MV)
    recon: Tensor
    logits: Tensor  # domain logits through the reversal path (drives L_DC)
    probs: Tensor | None = None  # domain probabilities from the detached latent (drives L_cst)


class MADNet:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.extractor = FeatureExtractor(cfg, rng)
        self.task_head = TaskHead(cfg, rng)
        m_img = cfg.n_views if cfg.use_img else 0
        m_ins = cfg.n_views if cfg.use_ins else 0
        self.img_branches = [ImageBranch(cfg, m, rng) for m in range(m_img)]
        self.ins_branches = [InstanceBranch(cfg, m, rng) for m in range(m_ins)]
        if cfg.shared_init:
            for branches in (self.img_branches, self.ins_branches):
                for br in branches[1:]:
                    for g_src, g_dst in zip(branches[0].groups, br.groups):
                        for (_, src), (_, dst) in zip(g_src, g_dst):
                            dst.data = src.data.copy()
        check_partition(self.param_groups())
        if len(self.img_branches) >= 2 and not cfg.same_dilation and not cfg.shared_init:
            self._assert_views_differ()

    def param_groups(self) -> list[ParamGroup]:
        groups = [self.extractor.group, self.task_head.group]
        for br in self.img_branches + self.ins_branches:
            groups.extend(br.groups)
        return groups

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [item for g in self.param_groups() for item in g]

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def _assert_views_differ(self) -> None:
        probe = np.random.default_rng(12345).standard_normal((1, self.cfg.widths[-1], 4, 4))
        with no_grad():
            lat = [br.encode(Tensor(probe)).data for br in self.img_branches]
        for i in range(len(lat)):
            for j in range(i + 1, len(lat)):
                if np.array_equal(lat[i], lat[j]):
                    raise ModelError(f"image branches {i} and {j} produce identical latents at init")

    # ---------------------------------------------------------- forward pieces

    def extract_features(self, images: Tensor) -> Tensor:
        return self.extractor(images)

    def task_forward(self, inst: Tensor) -> Tensor:
        return self.task_head(inst)

    def branch_forward(self, level: str, feature: Tensor, m: int, mu: float = 1.0,
                       with_probs: bool = False, detach_rc: bool = True) -> BranchOutput:
        """Run view m of a level.

        The reversal sits before the encoder on the domain-classification path;
        reconstruction and view-spread use the encoder applied to the detached
        feature (``detach_rc=False`` reuses one undetached path, for gradient checks).
        """
        branches = {"image": self.img_branches, "instance": self.ins_branches}.get(level)
        if branches is None:
            raise ModelError(f"unknown level {level!r}")
        if not 0 <= m < len(branches):
            raise ModelError(f"branch index {m} out of range for {len(branches)} {level} branches")
        want_ndim = 4 if level == "image" else 2
        if feature.data.ndim != want_ndim:
            raise ModelError(f"{level} branch expects a {want_ndim}-d feature, got shape {list(feature.shape)}")
        br = branches[m]
        if detach_rc:
            e_adv = br.encode(ops.grad_reverse(feature, mu))
            e_det = br.encode(feature.detach())
        else:
            e_adv = e_det = br.encode(feature)
        logits = br.classify(e_adv)
        recon = br.decode(e_det)
        probs = None
        if with_probs:
            src = e_adv.detach() if detach_rc else e_adv
            p_logits = br.classify(src)
            if level == "image":
                probs = ops.mean(ops.softmax(p_logits, axis=1), axis=(2, 3))
            else:
                probs = ops.softmax(p_logits, axis=1)
        return BranchOutput(latent=e_det, recon=recon, logits=logits, probs=probs)

    def state_meta(self) -> dict:
        return {"model": self.cfg.to_dict()}
