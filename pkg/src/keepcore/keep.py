"""Importance-guided augmentation: restore the most important tokens after a
standard augmentation, and optionally blank out a random share of the least
important ones.

Nothing here touches the oracle; only precomputed importance maps are read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import augment as aug_mod
from .augment import AugmentSpec
from .errors import ConfigError, ShapeError
from .ops import block_mean
from .sage import ImportanceMap


@dataclass(frozen=True)
class KeepConfig:
    tau_core: float = 0.6
    tau_low: float = 0.0  # 0 disables context masking
    rho_mask: float = 0.5
    fill: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_core <= 1.0:
            raise ConfigError("tau_core must lie in (0, 1]")
        if not 0.0 <= self.tau_low < 1.0:
            raise ConfigError("tau_low must lie in [0, 1)")
        if not 0.0 <= self.rho_mask <= 1.0:
            raise ConfigError("rho_mask must lie in [0, 1]")
        if not 0.0 <= self.fill <= 1.0:
            raise ConfigError("fill must lie in [0, 1]")


def pool_scores(W: ImportanceMap | np.ndarray, token_size: int | None = None) -> np.ndarray:
    """Token-level scores.

    An :class:`ImportanceMap` is already at token resolution and is returned
    as-is. A raw pixel-resolution array is block-mean pooled by ``token_size``.
    """
    if isinstance(W, ImportanceMap):
        return W.grid.copy()
    if token_size is None:
        raise ValueError("token_size is required to pool a pixel-resolution map")
    arr = np.asarray(W, dtype=np.float64)
    return block_mean(arr, token_size, token_size)


def num_core_tokens(tau_core: float, num_tokens: int) -> int:
    # guard against float noise such as 0.6 * 10 = 6.000000000000001
    return min(num_tokens, math.ceil(round(tau_core * num_tokens, 9)))


def topk_core_mask(S: np.ndarray, tau_core: float) -> np.ndarray:
    """Boolean grid marking the ``ceil(tau_core * n)`` highest-scoring tokens.

    Ties go to the lower row-major index.
    """
    if not 0.0 < tau_core <= 1.0:
        raise ValueError("tau_core must lie in (0, 1]")
    flat = np.asarray(S, dtype=np.float64).ravel()
    k = num_core_tokens(tau_core, flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(S))


def _pixel_mask(M: np.ndarray, token_size: int, image_shape: tuple[int, ...]) -> np.ndarray:
    up = np.repeat(np.repeat(np.asarray(M, dtype=bool), token_size, axis=0), token_size, axis=1)
    if up.shape != tuple(image_shape[-2:]):
        raise ShapeError(f"token grid {np.shape(M)} x {token_size} does not cover image {image_shape[-2:]}")
    return up


def restore_core(x_aug: np.ndarray, x: np.ndarray, M_core: np.ndarray, token_size: int) -> np.ndarray:
    """Copy original pixels back into every core token."""
    x_aug = np.asarray(x_aug)
    x = np.asarray(x)
    if x_aug.shape != x.shape:
        raise ShapeError(f"augmented image {x_aug.shape} and original {x.shape} differ in shape")
    return np.where(_pixel_mask(M_core, token_size, x.shape), x, x_aug)


def guided_mask(S: np.ndarray, M_core: np.ndarray, cfg: KeepConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample ``floor(rho_mask * |pool|)`` tokens from the low-score, non-core pool."""
    S = np.asarray(S)
    if cfg.tau_low == 0:
        return np.zeros(S.shape, dtype=bool)
    pool = np.flatnonzero((S < cfg.tau_low) & ~np.asarray(M_core, dtype=bool))
    n = math.floor(cfg.rho_mask * pool.size)
    mask = np.zeros(S.size, dtype=bool)
    if n:
        mask[rng.choice(pool, size=n, replace=False)] = True
    return mask.reshape(S.shape)


def apply_context_mask(x_prime: np.ndarray, M_mask: np.ndarray, fill: float, token_size: int) -> np.ndarray:
    x_prime = np.asarray(x_prime)
    if not np.any(M_mask):
        return x_prime.copy()
    return np.where(_pixel_mask(M_mask, token_size, x_prime.shape), fill, x_prime)


@dataclass
class KeepSample:
    """One augmented training sample.

    ``y`` is the label after augmentation with core tokens restored. For
    mixup, ``weight`` is a per-pixel share of ``y`` in the soft target (1
    inside core tokens, lambda elsewhere) and ``y_partner`` the other label.
    """

    x: np.ndarray
    y: np.ndarray
    core: np.ndarray
    mask: np.ndarray
    mix_weight: float | None = None
    weight: np.ndarray | None = None
    y_partner: np.ndarray | None = None

    def __iter__(self):
        # allows ``x_final, y_out = keep_augment(...)``
        return iter((self.x, self.y))


def keep_augment(x: np.ndarray, y: np.ndarray, W: ImportanceMap, aug: AugmentSpec, cfg: KeepConfig,
                 rng: np.random.Generator, partner: tuple[np.ndarray, np.ndarray] | None = None) -> KeepSample:
    """Augment, then restore the core and optionally mask low-importance context.

    The augmentation draws from ``rng`` first, so a baseline run that calls
    :func:`keepcore.augment.apply` with an identically seeded generator sees
    the same augmentation.
    """
    t = W.token_size
    if W.image_shape != tuple(np.shape(x)[-2:]):
        raise ShapeError(f"importance map covers {W.image_shape}, image is {np.shape(x)[-2:]}")
    x_aug, y_aug, mix_weight = aug_mod.apply(aug, x, y, rng, partner)
    S = pool_scores(W)
    core = topk_core_mask(S, cfg.tau_core)
    x_prime = restore_core(x_aug, x, core, t)
    mask = guided_mask(S, core, cfg, rng)
    x_final = apply_context_mask(x_prime, mask, cfg.fill, t)
    core_px = _pixel_mask(core, t, np.shape(x))
    y_out = np.where(core_px, y, y_aug) if aug.changes_labels else np.asarray(y_aug)
    weight = y_partner = None
    if aug.kind == "mixup":
        weight = np.where(core_px, 1.0, mix_weight)
        y_partner = np.asarray(partner[1])
    return KeepSample(x_final, y_out, core, mask, mix_weight, weight, y_partner)
