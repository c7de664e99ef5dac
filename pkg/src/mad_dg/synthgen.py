"""Synthetic multi-domain benchmark with known causal and style frequency bands.

Every instance is an oriented grating projected onto the DCT pass band
``R_L < sqrt(u^2+v^2) < R_H`` (the causal factor). Domain style lives
strictly outside it: a per-channel offset (DC), a half-cosine tilt
(index radius 1) and a high-frequency texture (radius > R_H).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .spectral import Spectrum, dct2, idct2, radial_index

FORMAT_VERSION = 1
MAGIC = b"MADS"
HEADER = struct.Struct("<4sIIIIi")  # magic, C, H, W, box count, domain id

IMAGE_SIZE = 32
CHANNELS = 3
N_CLASSES = 4
BACKGROUND = 0.5
CONTRAST = 0.35
# DFT cycles per image along (x, y) for each class; all pairs are orthogonal over the full grid
CLASS_WAVES = ((3, 0), (0, 3), (2, 2), (2, -2))


class DatasetError(ValueError):
    pass


class BoxPlacementError(DatasetError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str = ""
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tilt: float = 0.0
    tilt_angle: float = 0.0  # radians; 0 tilts along x
    texture: float = 0.0  # pixel std of the high-frequency texture
    texture_radius: float = 16.0  # DCT index radius the texture concentrates around
    jitter: float = 0.0  # optional per-sample Gaussian jitter (relative) of bias and tilt
    class_weights: tuple[float, ...] | None = None  # per-domain class frequencies (spurious label-style link)
    seed: int = 0

    def __post_init__(self):
        if self.tilt < 0 or self.texture < 0 or self.jitter < 0 or self.texture_radius <= 0:
            raise DatasetError(f"style amplitudes must be >= 0 (domain {self.domain_id})")
        if len(self.bias) != CHANNELS:
            raise DatasetError(f"bias needs {CHANNELS} channel offsets")
        if self.class_weights is not None and (min(self.class_weights) < 0 or sum(self.class_weights) <= 0):
            raise DatasetError(f"class weights must be >= 0 with a positive sum (domain {self.domain_id})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias"] = list(self.bias)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["bias"] = tuple(float(b) for b in d.get("bias", (0.0,) * CHANNELS))
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(float(c) for c in d["class_weights"])
        return cls(**d)


PRESETS = {
    "plain": {},
    "bright": {"bias": (0.3, 0.3, 0.3)},
    "dark": {"bias": (-0.3, -0.3, -0.3)},
    "tilted": {"tilt": 0.25},
    "noisy": {"texture": 0.1},
}


def make_domain_spec(domain_id: int, preset: str | None = None, seed: int = 0, **amplitudes) -> DomainSpec:
    """Spec from a preset name (plain, bright, dark, tilted, noisy) and/or explicit amplitudes."""
    if preset is not None and preset not in PRESETS:
        raise DatasetError(f"unknown style preset {preset!r}; expected one of {sorted(PRESETS)}")
    fields = dict(PRESETS.get(preset or "plain", {}))
    fields.update(amplitudes)
    if "bias" in fields and np.isscalar(fields["bias"]):
        fields["bias"] = (float(fields["bias"]),) * CHANNELS
    if "bias" in fields:
        fields["bias"] = tuple(float(b) for b in fields["bias"])
    return DomainSpec(domain_id=domain_id, name=fields.pop("name", preset or ""), seed=seed, **fields)


def benchmark_specs() -> tuple[list[DomainSpec], list[str]]:
    """Two style-shifted source domains plus one unseen target.

    The sources differ in brightness, tilt along x and texture strength. The
    target pushes brightness and texture past the sources, tilts along y and
    moves the texture ring to a radius neither source uses.
    """
    specs = [
        make_domain_spec(0, bias=0.15, name="light"),
        make_domain_spec(1, bias=-0.15, tilt=0.2, texture=0.06, name="shaded"),
        make_domain_spec(2, bias=-0.25, tilt=0.3, tilt_angle=math.pi / 2, texture=0.1, texture_radius=20.0,
                         name="target"),
    ]
    return specs, ["source", "source", "target"]


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W]
    boxes: np.ndarray  # [N, 4] int (x0, y0, x1, y1), end-exclusive
    classes: np.ndarray  # [N] int
    domain_id: int

    def __post_init__(self):
        c, h, w = self.image.shape
        if len(self.boxes) == 0 or len(self.boxes) != len(self.classes):
            raise DatasetError("a sample needs >= 1 box and one class per box")
        b = self.boxes
        if (b[:, 0] < 0).any() or (b[:, 1] < 0).any() or (b[:, 2] > w).any() or (b[:, 3] > h).any() \
                or (b[:, 2] <= b[:, 0]).any() or (b[:, 3] <= b[:, 1]).any():
            raise DatasetError(f"box out of image bounds: {b.tolist()}")


def class_grating(cls: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Full-image unit-amplitude plane wave for a class."""
    fx, fy = CLASS_WAVES[cls]
    yy, xx = np.mgrid[0:size, 0:size]
    return np.cos(2.0 * np.pi * (fx * xx + fy * yy) / size)


def _hard_band(h: int, w: int, r_low: float, r_high: float) -> np.ndarray:
    r = radial_index(h, w)
    return ((r > r_low) & (r < r_high)).astype(np.float64)


def place_boxes(n: int, size: int, rng: np.random.Generator, retries: int = 100) -> np.ndarray:
    """Non-overlapping boxes on the 8-pixel cell grid, each 8 or 16 pixels per side."""
    cells = size // 8
    taken = np.zeros((cells, cells), dtype=bool)
    boxes = []
    for _ in range(n):
        for _attempt in range(retries):
            bh = int(rng.integers(1, 3))
            bw = int(rng.integers(1, 3))
            r0 = int(rng.integers(0, cells - bh + 1))
            c0 = int(rng.integers(0, cells - bw + 1))
            if not taken[r0:r0 + bh, c0:c0 + bw].any():
                taken[r0:r0 + bh, c0:c0 + bw] = True
                boxes.append((8 * c0, 8 * r0, 8 * (c0 + bw), 8 * (r0 + bh)))
                break
        else:
            raise BoxPlacementError(f"could not place {n} non-overlapping boxes after {retries} retries")
    return np.asarray(boxes, dtype=np.int64)


def render_instance(cls: int, box, size: int, r_low: float, r_high: float, phase: float) -> np.ndarray:
    """Class grating inside a Hann window on the box, projected onto the pass band."""
    x0, y0, x1, y1 = (int(v) for v in box)
    fx, fy = CLASS_WAVES[cls]
    yy, xx = np.mgrid[0:size, 0:size]
    wave = np.cos(2.0 * np.pi * (fx * xx + fy * yy) / size + phase)
    win = np.zeros((size, size))
    win[y0:y1, x0:x1] = np.outer(np.hanning(y1 - y0 + 2)[1:-1], np.hanning(x1 - x0 + 2)[1:-1])
    spec = dct2(wave * win).coeffs * _hard_band(size, size, r_low, r_high)
    pattern = idct2(Spectrum(spec))
    peak = np.abs(pattern).max()
    return pattern / peak if peak > 0 else pattern


def render_style(spec: DomainSpec, size: int, r_high: float, rng: np.random.Generator) -> np.ndarray:
    """Domain style image [C, H, W] with energy only at radius < 2 (offset, tilt) or > R_H (texture)."""
    jit = (lambda: 1.0 + spec.jitter * rng.standard_normal()) if spec.jitter > 0 else (lambda: 1.0)
    style = np.zeros((CHANNELS, size, size))
    style += (np.asarray(spec.bias) * jit())[:, None, None]
    if spec.tilt > 0:
        half = np.cos(np.pi * (2 * np.arange(size) + 1) / (2 * size))
        ramp = math.cos(spec.tilt_angle) * half[None, :] + math.sin(spec.tilt_angle) * half[:, None]
        style += spec.tilt * jit() * ramp[None]
    if spec.texture > 0:
        r = radial_index(size, size)
        ring = np.exp(-((r - spec.texture_radius) ** 2) / (2.0 * 3.0 ** 2)) * (r > r_high)
        coeffs = rng.standard_normal((CHANNELS, size, size)) * ring
        tex = idct2(Spectrum(coeffs))
        tex *= spec.texture / tex.std()
        style += tex
    return style


def render_components(spec: DomainSpec, classes: Sequence[int], rng: np.random.Generator,
                      size: int = IMAGE_SIZE, r_low: float = 2.0, r_high: float = 8.0,
                      n_classes: int = N_CLASSES):
    """Return (boxes, class pattern image [H, W], style image [C, H, W]) before clipping."""
    if not 1 <= len(classes) <= 3:
        raise DatasetError(f"need 1-3 instances, got {len(classes)}")
    if any(c < 0 or c >= n_classes for c in classes):
        raise DatasetError(f"class ids must be < {n_classes}")
    boxes = place_boxes(len(classes), size, rng)
    pattern = np.zeros((size, size))
    for c, box in zip(classes, boxes):
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        pattern += render_instance(int(c), box, size, r_low, r_high, phase)
    style = render_style(spec, size, r_high, rng)
    return boxes, CONTRAST * pattern, style


def render_sample(spec: DomainSpec, classes: Sequence[int], rng: np.random.Generator,
                  size: int = IMAGE_SIZE, r_low: float = 2.0, r_high: float = 8.0,
                  n_classes: int = N_CLASSES) -> Sample:
    boxes, pattern, style = render_components(spec, classes, rng, size, r_low, r_high, n_classes)
    image = np.clip(BACKGROUND + pattern[None] + style, 0.0, 1.0)
    return Sample(image=image, boxes=boxes, classes=np.asarray(classes, dtype=np.int64),
                  domain_id=spec.domain_id)


# ---------------------------------------------------------------- files

def encode_sample(sample: Sample) -> bytes:
    img = np.ascontiguousarray(sample.image, dtype="<f4")
    c, h, w = img.shape
    body = HEADER.pack(MAGIC, c, h, w, len(sample.boxes), int(sample.domain_id)) + img.tobytes()
    ann = np.concatenate([sample.boxes, sample.classes[:, None]], axis=1).astype("<i4")
    body += ann.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_sample(raw: bytes, name: str = "<bytes>") -> Sample:
    if len(raw) < HEADER.size + 4:
        raise DatasetError(f"{name}: file truncated")
    magic, c, h, w, n, dom = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetError(f"{name}: bad magic")
    expect = HEADER.size + 4 * c * h * w + 20 * n + 4
    if len(raw) != expect:
        raise DatasetError(f"{name}: length mismatch ({len(raw)} bytes, expected {expect})")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise DatasetError(f"{name}: checksum mismatch")
    off = HEADER.size
    image = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).astype(np.float64).reshape(c, h, w)
    off += 4 * c * h * w
    ann = np.frombuffer(raw, dtype="<i4", count=5 * n, offset=off).astype(np.int64).reshape(n, 5)
    return Sample(image=image, boxes=ann[:, :4].copy(), classes=ann[:, 4].copy(), domain_id=int(dom))


@dataclass
class DomainEntry:
    spec: DomainSpec
    role: str  # "source" or "target"
    counts: dict[str, int] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    domains: list[DomainEntry]
    seed: int
    n_classes: int = N_CLASSES
    image_size: int = IMAGE_SIZE
    r_low: float = 2.0
    r_high: float = 8.0
    class_distribution: list[float] | None = None
    format_version: int = FORMAT_VERSION

    @property
    def source_ids(self) -> list[int]:
        return [d.spec.domain_id for d in self.domains if d.role == "source"]

    @property
    def target_ids(self) -> list[int]:
        return [d.spec.domain_id for d in self.domains if d.role == "target"]

    @property
    def n_domains(self) -> int:
        return len(self.source_ids)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "channels": CHANNELS,
            "r_low": self.r_low,
            "r_high": self.r_high,
            "class_distribution": self.class_distribution,
            "domains": [{"spec": d.spec.to_dict(), "role": d.role, "counts": d.counts} for d in self.domains],
            "layout": "{split}/d{domain_id}_{index:05d}.bin",
        }

    def sample_path(self, split: str, domain_id: int, index: int) -> Path:
        return self.root / split / f"d{domain_id}_{index:05d}.bin"

    def content_hash(self) -> str:
        """git blob hash of manifest.json."""
        data = (self.root / "manifest.json").read_bytes()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _sample_rng(seed: int, domain_id: int, split: str, index: int) -> np.random.Generator:
    split_code = {"train": 0, "test": 1}.get(split, zlib.crc32(split.encode()))
    return np.random.default_rng([seed, domain_id, split_code, index])


def _draw_classes(rng: np.random.Generator, n_classes: int, dist: Sequence[float] | None) -> list[int]:
    n = int(rng.integers(1, 4))
    if dist is None:
        return [int(c) for c in rng.integers(0, n_classes, size=n)]
    p = np.asarray(dist, dtype=np.float64)
    return [int(c) for c in rng.choice(n_classes, size=n, p=p / p.sum())]


def generate_dataset(specs: Sequence[DomainSpec], n_per_domain, out_path, seed: int = 0,
                     roles: Sequence[str] | None = None, class_distribution: Sequence[float] | None = None,
                     r_low: float = 2.0, r_high: float = 8.0, n_classes: int = N_CLASSES,
                     image_size: int = IMAGE_SIZE) -> DatasetManifest:
    """Write one file per sample plus manifest.json.

    ``n_per_domain`` is an int (all in a "train" split) or a dict of split -> count.
    """
    if not specs:
        raise DatasetError("need at least one domain spec")
    splits = {"train": int(n_per_domain)} if np.isscalar(n_per_domain) else dict(n_per_domain)
    if any(v < 1 for v in splits.values()):
        raise DatasetError("need at least one sample per domain and split")
    if len({s.domain_id for s in specs}) != len(specs):
        raise DatasetError("domain ids must be unique")
    if class_distribution is not None and len(class_distribution) != n_classes:
        raise DatasetError(f"class distribution needs {n_classes} entries")
    for spec in specs:
        if spec.class_weights is not None and len(spec.class_weights) != n_classes:
            raise DatasetError(f"domain {spec.domain_id}: class weights need {n_classes} entries")
    roles = list(roles) if roles is not None else ["source"] * len(specs)
    root = Path(out_path)
    try:
        for split in splits:
            (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc
    manifest = DatasetManifest(root=root, domains=[], seed=seed, n_classes=n_classes, image_size=image_size,
                               r_low=r_low, r_high=r_high,
                               class_distribution=None if class_distribution is None else list(class_distribution))
    for spec, role in zip(specs, roles):
        entry = DomainEntry(spec=spec, role=role, counts=dict(splits))
        for split, n in splits.items():
            for i in range(n):
                rng = _sample_rng(seed ^ spec.seed, spec.domain_id, split, i)
                dist = spec.class_weights if spec.class_weights is not None else class_distribution
                classes = _draw_classes(rng, n_classes, dist)
                sample = render_sample(spec, classes, rng, image_size, r_low, r_high, n_classes)
                manifest.sample_path(split, spec.domain_id, i).write_bytes(encode_sample(sample))
        manifest.domains.append(entry)
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> DatasetManifest:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    d = json.loads(mpath.read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: format version {d.get('format_version')} != {FORMAT_VERSION}")
    return DatasetManifest(
        root=root,
        domains=[DomainEntry(DomainSpec.from_dict(e["spec"]), e["role"], dict(e["counts"])) for e in d["domains"]],
        seed=d["seed"], n_classes=d["n_classes"], image_size=d["image_size"],
        r_low=d["r_low"], r_high=d["r_high"], class_distribution=d.get("class_distribution"),
        format_version=d["format_version"],
    )


def regenerate(manifest: DatasetManifest, out_path) -> DatasetManifest:
    counts = manifest.domains[0].counts
    return generate_dataset([d.spec for d in manifest.domains], counts, out_path, seed=manifest.seed,
                            roles=[d.role for d in manifest.domains],
                            class_distribution=manifest.class_distribution, r_low=manifest.r_low,
                            r_high=manifest.r_high, n_classes=manifest.n_classes,
                            image_size=manifest.image_size)


def load_split(manifest: DatasetManifest, split: str, domain_ids: Sequence[int] | None = None) -> list[Sample]:
    """All samples of a split, ordered by (domain, index)."""
    out = []
    for entry in manifest.domains:
        did = entry.spec.domain_id
        if domain_ids is not None and did not in domain_ids:
            continue
        n = entry.counts.get(split, 0)
        for i in range(n):
            p = manifest.sample_path(split, did, i)
            if not p.exists():
                raise DatasetError(f"{p}: missing sample file")
            out.append(decode_sample(p.read_bytes(), str(p)))
    return out


@dataclass
class Batch:
    images: np.ndarray  # [B, C, H, W]
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    domains: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_instances(self) -> int:
        return sum(len(c) for c in self.classes)


def collate(samples: Sequence[Sample]) -> Batch:
    return Batch(images=np.stack([s.image for s in samples]), boxes=[s.boxes for s in samples],
                 classes=[s.classes for s in samples],
                 domains=np.asarray([s.domain_id for s in samples], dtype=np.int64))


def interleaved_order(domains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each domain, then round-robin across domains so batches mix them."""
    groups = [rng.permutation(np.flatnonzero(domains == d)) for d in np.unique(domains)]
    order = []
    longest = max(len(g) for g in groups)
    for i in range(longest):
        for g in groups:
            if i < len(g):
                order.append(g[i])
    return np.asarray(order, dtype=np.int64)


def iter_batches(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None,
                 interleave: bool = True) -> Iterator[Batch]:
    """Deterministic mini-batches; the final partial batch is included."""
    if batch_size < 1:
        raise DatasetError("batch size must be >= 1")
    n = len(samples)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = np.random.default_rng(shuffle_seed)
        if interleave:
            order = interleaved_order(np.asarray([s.domain_id for s in samples]), rng)
        else:
            order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]])


def load_dataset(path, batch_size: int, shuffle_seed: int | None = None, split: str = "train",
                 domain_ids: Sequence[int] | None = None) -> Iterator[Batch]:
    manifest = read_manifest(path)
    return iter_batches(load_split(manifest, split, domain_ids), batch_size, shuffle_seed)
