"""Spurious-correlation generator: DCT-domain randomization of style frequencies.

The spectrum of each channel is split by a difference-of-Gaussians
band-pass weight ``M``. One of the two components is multiplied
coefficient-wise by ``1 + sigma * N(0, 1)`` and the image is recomposed.

``mode="literal"`` randomizes the band-pass part ``M * F(x)``.
``mode="intent"`` (default) randomizes the complement ``(1 - M) * F(x)``,
i.e. the lowest and highest frequencies that carry illumination and
texture, and keeps the band-pass part.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

MODES = ("intent", "literal")


class SpectralError(ValueError):
    pass


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D with D[k, j] = a_k cos(pi (2j + 1) k / 2n)."""
    if n < 1:
        raise SpectralError("DCT length must be >= 1")
    j = np.arange(n)
    k = np.arange(n)[:, None]
    d = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    d.setflags(write=False)
    return d


@dataclass(frozen=True)
class Spectrum:
    """DCT-II coefficients, shape [..., H, W] (one plane per channel)."""

    coeffs: np.ndarray

    @property
    def extents(self) -> tuple[int, int]:
        return self.coeffs.shape[-2], self.coeffs.shape[-1]


def dct2(image: np.ndarray) -> Spectrum:
    """Separable orthonormal 2-D DCT-II over the last two axes."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise SpectralError(f"dct2 needs an image with H, W >= 1, got shape {x.shape}")
    dh = dct_matrix(x.shape[-2])
    dw = dct_matrix(x.shape[-1])
    return Spectrum(dh @ x @ dw.T)


def idct2(spec: Spectrum) -> np.ndarray:
    c = spec.coeffs
    if c.ndim < 2:
        raise SpectralError("idct2 needs at least a 2-D coefficient array")
    dh = dct_matrix(c.shape[-2])
    dw = dct_matrix(c.shape[-1])
    return dh.T @ c @ dw


@dataclass(frozen=True)
class BandMask:
    r_low: float
    r_high: float
    weights: np.ndarray


def band_mask(h: int, w: int, r_low: float, r_high: float) -> BandMask:
    """weights[u, v] = exp(-(u^2+v^2) / (2 R_H^2)) - exp(-(u^2+v^2) / (2 R_L^2)) in DCT index units."""
    if r_low <= 0 or r_high <= 0:
        raise SpectralError(f"cut-offs must be positive, got R_L={r_low}, R_H={r_high}")
    if r_low >= r_high:
        raise SpectralError(f"need R_L < R_H, got R_L={r_low}, R_H={r_high}")
    u = np.arange(h, dtype=np.float64)[:, None]
    v = np.arange(w, dtype=np.float64)[None, :]
    r2 = u * u + v * v
    weights = np.exp(-r2 / (2.0 * r_high ** 2)) - np.exp(-r2 / (2.0 * r_low ** 2))
    weights.setflags(write=False)
    return BandMask(float(r_low), float(r_high), weights)


def radial_index(h: int, w: int) -> np.ndarray:
    """sqrt(u^2 + v^2) for every DCT coefficient position."""
    u = np.arange(h, dtype=np.float64)[:, None]
    v = np.arange(w, dtype=np.float64)[None, :]
    return np.sqrt(u * u + v * v)


def band_energy_fraction(image: np.ndarray, r_low: float, r_high: float) -> float:
    """Share of total DCT energy at coefficients with R_L < sqrt(u^2+v^2) < R_H."""
    c = dct2(image).coeffs
    r = radial_index(*c.shape[-2:])
    inside = (r > r_low) & (r < r_high)
    total = float((c * c).sum())
    if total == 0.0:
        return 0.0
    return float((c * c * inside).sum() / total)


def randomize_gaussian(component: Spectrum, sigma: float, rng: np.random.Generator) -> Spectrum:
    """Multiply every coefficient by 1 + sigma * n with n i.i.d. standard normal."""
    if sigma < 0:
        raise SpectralError(f"noise scale must be >= 0, got {sigma}")
    c = component.coeffs
    if sigma == 0:
        return Spectrum(c.copy())
    n = rng.standard_normal(c.shape)
    return Spectrum(c * (1.0 + sigma * n))


@dataclass(frozen=True)
class ScgConfig:
    r_low: float = 2.0
    r_high: float | None = None  # None: H / 4
    mode: str = "intent"
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise SpectralError(f"unknown SCG mode {self.mode!r}; expected one of {MODES}")
        if self.sigma < 0:
            raise SpectralError(f"noise scale must be >= 0, got {self.sigma}")
        if self.r_low <= 0 or (self.r_high is not None and self.r_high <= self.r_low):
            raise SpectralError(f"invalid cut-offs R_L={self.r_low}, R_H={self.r_high}")

    def cutoffs(self, h: int) -> tuple[float, float]:
        r_high = h / 4.0 if self.r_high is None else self.r_high
        return self.r_low, r_high

    def to_dict(self) -> dict:
        return asdict(self)


def scg_components(image: np.ndarray, cfg: ScgConfig, rng: np.random.Generator):
    """Return (output spectrum, kept component, randomized component) for an image [..., H, W]."""
    spec = dct2(image)
    h, w = spec.extents
    r_low, r_high = cfg.cutoffs(h)
    m = band_mask(h, w, r_low, r_high).weights
    band = m * spec.coeffs
    rest = (1.0 - m) * spec.coeffs
    if cfg.mode == "literal":
        kept, varied = rest, band
    else:
        kept, varied = band, rest
    randomized = randomize_gaussian(Spectrum(varied), cfg.sigma, rng).coeffs
    return Spectrum(randomized + kept), Spectrum(kept), Spectrum(randomized)


def scg_augment(image: np.ndarray, cfg: ScgConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Augment one image [C, H, W] (or a batch [B, C, H, W]); independent noise per channel and image."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out, _, _ = scg_components(image, cfg, rng)
    return idct2(out)
