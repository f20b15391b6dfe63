"""Baseline augmentations: pixel-level intensity transforms and token-level
occlusion / mixing transforms. Each is a pure function of (image, label, rng).

Images are ``C x H x W`` (or ``H x W``) floats in [0, 1]; labels are ``H x W``
integer grids.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from .errors import ConfigError

INTENSITY_KINDS = ("identity", "gaussian_noise", "gaussian_blur", "gamma",
                   "brightness_contrast", "bias_field")
OCCLUSION_KINDS = ("random_erasing", "cutout")
MIXING_KINDS = ("mixup", "cutmix")
KINDS = INTENSITY_KINDS + OCCLUSION_KINDS + MIXING_KINDS


def _range(name: str, value, lo_bound: float | None = None) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        value = (value, value)
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ConfigError(f"{name}: range ({lo}, {hi}) is reversed")
    if lo_bound is not None and lo < lo_bound:
        raise ConfigError(f"{name}: values must be >= {lo_bound}")
    return lo, hi


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "identity"
    noise_sigma: tuple[float, float] = (0.01, 0.1)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    blur_kernel: int = 5
    gamma: tuple[float, float] = (0.7, 1.4)
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (0.8, 1.2)
    bias_order: int = 3
    bias_amplitude: float = 0.3
    erase_area: tuple[float, float] = (0.02, 0.25)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_fill: str = "zero"
    cutout_size: int | None = None  # None -> a quarter of the smaller image side
    cutout_holes: int = 1
    alpha: float = 0.4
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "noise_sigma", _range("noise_sigma", self.noise_sigma, 0.0))
        object.__setattr__(self, "blur_sigma", _range("blur_sigma", self.blur_sigma, 0.0))
        object.__setattr__(self, "gamma", _range("gamma", self.gamma, 0.0))
        object.__setattr__(self, "brightness", _range("brightness", self.brightness))
        object.__setattr__(self, "contrast", _range("contrast", self.contrast, 0.0))
        object.__setattr__(self, "erase_area", _range("erase_area", self.erase_area, 0.0))
        object.__setattr__(self, "erase_aspect", _range("erase_aspect", self.erase_aspect, 0.0))
        if self.gamma[0] <= 0 or self.erase_aspect[0] <= 0:
            raise ConfigError("gamma and erase_aspect must be strictly positive")
        if self.erase_area[1] > 1:
            raise ConfigError("erase_area is a fraction of the image and must be <= 1")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be a positive odd integer")
        if self.erase_fill not in ("zero", "noise"):
            raise ConfigError("erase_fill must be 'zero' or 'noise'")
        if self.cutout_size is not None and self.cutout_size < 1:
            raise ConfigError("cutout_size must be >= 1")
        if self.cutout_holes < 1 or self.bias_order < 0 or self.bias_amplitude < 0:
            raise ConfigError("cutout_holes >= 1, bias_order >= 0, bias_amplitude >= 0 required")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p must be a probability")

    @property
    def needs_partner(self) -> bool:
        return self.kind in MIXING_KINDS

    @property
    def changes_labels(self) -> bool:
        return self.kind == "cutmix"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AugmentSpec:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown augment keys: {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def blur_kernel(sigma: float, k: int) -> np.ndarray:
    """Normalized ``k x k`` Gaussian kernel."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(k) - k // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    kern = np.outer(g, g)
    return kern / kern.sum()


def _blur(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    r = kern.shape[0] // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect" if min(h, w) > r else "edge")
    out = np.zeros_like(x)
    for i in range(kern.shape[0]):
        for j in range(kern.shape[1]):
            out += kern[i, j] * xp[:, i:i + h, j:j + w]
    return out


def bias_field(shape: tuple[int, int], order: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative field exp(poly(u, v)) with mean 1."""
    h, w = shape
    u = np.linspace(-1.0, 1.0, h)[:, None]
    v = np.linspace(-1.0, 1.0, w)[None, :]
    log_field = np.zeros((h, w))
    for i in range(order + 1):
        for j in range(order + 1 - i):
            log_field = log_field + rng.uniform(-amplitude, amplitude) * u ** i * v ** j
    field = np.exp(log_field)
    return field / field.mean()


def _box(h: int, w: int, bh: int, bw: int, rng: np.random.Generator) -> tuple[slice, slice]:
    """Box of at most bh x bw centered at a uniform random pixel, clipped to the image."""
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = max(cy - bh // 2, 0), min(cy - bh // 2 + bh, h)
    x0, x1 = max(cx - bw // 2, 0), min(cx - bw // 2 + bw, w)
    return slice(y0, y1), slice(x0, x1)


def apply(spec: AugmentSpec, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
          partner: tuple[np.ndarray, np.ndarray] | None = None):
    """Return ``(x_aug, y_aug, mix_weight)``.

    ``mix_weight`` is None except for mixing kinds, where it is the share of
    the primary sample: lambda for mixup, the unpasted area fraction for cutmix.
    For mixup ``y_aug`` is the primary label; blend targets with the partner's
    label using ``mix_weight``.
    """
    if spec.needs_partner and partner is None:
        raise ValueError(f"{spec.kind} requires a partner sample")
    if not spec.needs_partner and partner is not None:
        raise ValueError(f"{spec.kind} does not take a partner sample")
    squeeze = x.ndim == 2
    xa = np.asarray(x, dtype=np.float64)
    xa = xa[None] if squeeze else xa
    c, h, w = xa.shape
    y = np.asarray(y)

    def done(out, y_out=y, weight=None):
        out = np.clip(out, 0.0, 1.0)
        return (out[0] if squeeze else out), y_out, weight

    kind = spec.kind
    if kind == "identity":
        return (np.asarray(x), y, None)
    if spec.p < 1.0 and rng.random() >= spec.p:
        if spec.needs_partner:
            return np.asarray(x), y, 1.0
        return np.asarray(x), y, None

    if kind == "gaussian_noise":
        sigma = rng.uniform(*spec.noise_sigma)
        return done(xa + sigma * rng.standard_normal(xa.shape))
    if kind == "gaussian_blur":
        sigma = rng.uniform(*spec.blur_sigma)
        if sigma <= 0:
            return done(xa.copy())
        return done(_blur(xa, blur_kernel(sigma, spec.blur_kernel)))
    if kind == "gamma":
        return done(np.clip(xa, 0.0, 1.0) ** rng.uniform(*spec.gamma))
    if kind == "brightness_contrast":
        b = rng.uniform(*spec.brightness)
        cst = rng.uniform(*spec.contrast)
        return done(cst * (xa - 0.5) + 0.5 + b)
    if kind == "bias_field":
        return done(xa * bias_field((h, w), spec.bias_order, spec.bias_amplitude, rng)[None])
    if kind == "random_erasing":
        area = rng.uniform(*spec.erase_area) * h * w
        log_lo, log_hi = math.log(spec.erase_aspect[0]), math.log(spec.erase_aspect[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        bh = min(h, max(1, round(math.sqrt(area * aspect))))
        bw = min(w, max(1, round(math.sqrt(area / aspect))))
        y0 = int(rng.integers(h - bh + 1))
        x0 = int(rng.integers(w - bw + 1))
        out = xa.copy()
        if spec.erase_fill == "zero":
            out[:, y0:y0 + bh, x0:x0 + bw] = 0.0
        else:
            out[:, y0:y0 + bh, x0:x0 + bw] = rng.uniform(0.0, 1.0, (c, bh, bw))
        return done(out)
    if kind == "cutout":
        size = spec.cutout_size or max(1, min(h, w) // 4)
        out = xa.copy()
        for _ in range(spec.cutout_holes):
            rows, cols = _box(h, w, size, size, rng)
            out[:, rows, cols] = 0.0
        return done(out)

    x2, y2 = partner
    x2 = np.asarray(x2, dtype=np.float64)
    x2 = x2[None] if x2.ndim == 2 else x2
    if x2.shape != xa.shape or np.shape(y2) != y.shape:
        raise ValueError("partner sample shape differs from the primary sample")
    lam = float(rng.beta(spec.alpha, spec.alpha))
    if kind == "mixup":
        return done(lam * xa + (1.0 - lam) * x2, y, lam)
    # cutmix: paste a box covering a (1 - lam) share of the image
    cut = math.sqrt(1.0 - lam)
    rows, cols = _box(h, w, int(round(h * cut)), int(round(w * cut)), rng)
    out = xa.copy()
    out[:, rows, cols] = x2[:, rows, cols]
    y_out = y.copy()
    y_out[rows, cols] = np.asarray(y2)[rows, cols]
    pasted = (rows.stop - rows.start) * (cols.stop - cols.start)
    return done(out, y_out, 1.0 - pasted / (h * w))
