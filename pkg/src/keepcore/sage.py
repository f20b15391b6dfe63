"""Sparse adversarial gating: per-token importance from a frozen oracle.

A latent gate ``G`` (one value per token) and a per-token perturbation
``delta`` are optimized jointly with Adam. The gate opens wherever an
l_inf-bounded perturbation hurts the oracle's segmentation most; an l1
penalty closes it everywhere else. The final map is ``sigmoid(G * alpha_end)``.
"""

from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .formats import map_from_bytes, map_to_bytes
from .optim import AdamState, adam_step
from .oracle import OracleNet
from .tensor import Tape, Tensor, backward


@dataclass(frozen=True)
class SageConfig:
    epsilon: float = 0.05
    steps: int = 200
    alpha_init: float = 0.1
    alpha_end: float = 10.0
    mu_sparse: float = 0.01
    beta_delta: float = 0.01
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lr: float = 1e-3
    token_size: int = 16
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (self.alpha_init > 0 and self.alpha_end >= self.alpha_init):
            raise ConfigError("need 0 < alpha_init <= alpha_end")
        for name in ("mu_sparse", "beta_delta", "lambda_ce", "lambda_dice", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.token_size < 1:
            raise ConfigError("token_size must be >= 1")

    @property
    def t_start(self) -> float:
        return 1.0 / self.alpha_init

    @property
    def t_end(self) -> float:
        return 1.0 / self.alpha_end


@dataclass
class SageState:
    G: np.ndarray
    delta: np.ndarray
    adam_G: AdamState
    adam_delta: AdamState
    step: int = 0

    @classmethod
    def zeros(cls, channels: int, grid: tuple[int, int], cfg: SageConfig) -> SageState:
        kw = dict(lr=cfg.lr, weight_decay=cfg.weight_decay)
        return cls(G=np.zeros(grid), delta=np.zeros((channels,) + tuple(grid)),
                   adam_G=AdamState.zeros(grid, **kw),
                   adam_delta=AdamState.zeros((channels,) + tuple(grid), **kw))


@dataclass
class ImportanceMap:
    grid: np.ndarray
    token_size: int
    source_image_id: str = ""
    oracle_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ShapeError("importance grid must be H_t x W_t")
        if np.any(self.grid < 0) or np.any(self.grid > 1):
            raise ValueError("importance values must lie in [0, 1]")

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid.shape[0] * self.token_size, self.grid.shape[1] * self.token_size

    def to_bytes(self) -> bytes:
        return map_to_bytes(self.grid, self.token_size, self.source_image_id, self.oracle_id)

    @classmethod
    def from_bytes(cls, buf: bytes) -> ImportanceMap:
        grid, t, image_id, oracle_id = map_from_bytes(buf)
        return cls(grid, t, image_id, oracle_id)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> ImportanceMap:
        return cls.from_bytes(Path(path).read_bytes())


def derive_seed(base_seed: int, image_id: str) -> int:
    """Stable per-image seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{base_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def anneal(step: int, cfg: SageConfig) -> float:
    """Temperature at ``step`` (1-based): alpha rises linearly, T = 1 / alpha."""
    n = cfg.steps
    if not 1 <= step <= n:
        raise ValueError(f"step {step} outside [1, {n}]")
    if n == 1:
        return 1.0 / cfg.alpha_end
    alpha = cfg.alpha_init + (cfg.alpha_end - cfg.alpha_init) * (step - 1) / (n - 1)
    return 1.0 / alpha


def soft_mask(G: Tensor, T: float) -> Tensor:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return ops.sigmoid(ops.scalar_mul(G, 1.0 / T))


def _grid_of(x_shape: tuple[int, ...], token_size: int) -> tuple[int, int]:
    h, w = x_shape[-2:]
    if h % token_size or w % token_size:
        raise ShapeError(f"image {h}x{w} is not divisible by token size {token_size}")
    return h // token_size, w // token_size


def synthesize_adversarial(x: Tensor, m: Tensor, delta: Tensor, token_size: int) -> Tensor:
    """``clamp(x + U(m) * U(delta), 0, 1)`` with nearest upsampling U.

    ``x`` is ``C x H x W``, ``m`` is ``H_t x W_t``, ``delta`` is ``C x H_t x W_t``.
    """
    c = x.shape[0]
    grid = _grid_of(x.shape, token_size)
    if m.shape != grid or delta.shape != (c,) + grid:
        raise ShapeError(f"gate {list(m.shape)} / perturbation {list(delta.shape)} do not match "
                         f"image {list(x.shape)} at token size {token_size}")
    # nearest upsampling commutes with the Hadamard product, so gate at token level
    gated = ops.mul(ops.expand(m, c), delta)
    return ops.clamp(ops.add(x, ops.upsample_nearest(gated, token_size, token_size)), 0.0, 1.0)


def sage_loss(oracle: OracleNet, x_adv: Tensor, y: np.ndarray, m: Tensor, delta: Tensor,
              cfg: SageConfig) -> Tensor:
    """``-(lambda_ce CE + lambda_dice Dice) + mu |m|_1 + beta |delta|_1``."""
    if not oracle.frozen:
        raise RuntimeError("SAGE requires a frozen oracle")
    ce, dice = ops.seg_losses(oracle(x_adv), y)
    attack = ops.add(ops.scalar_mul(ce, cfg.lambda_ce), ops.scalar_mul(dice, cfg.lambda_dice))
    sparse = ops.add(ops.scalar_mul(ops.l1_norm(m), cfg.mu_sparse),
                     ops.scalar_mul(ops.l1_norm(delta), cfg.beta_delta))
    return ops.add(ops.scalar_mul(attack, -1.0), sparse)


def sage_step(state: SageState, oracle: OracleNet, x: np.ndarray, y: np.ndarray,
              cfg: SageConfig) -> SageState:
    """One anneal -> mask -> synthesize -> loss -> backward -> Adam -> clip cycle (in place)."""
    if state.step >= cfg.steps:
        raise ValueError(f"state already completed {state.step} of {cfg.steps} steps")
    T = anneal(state.step + 1, cfg)
    tape = Tape()
    G = tape.watch(state.G)
    delta = tape.watch(state.delta)
    m = soft_mask(G, T)
    x_adv = synthesize_adversarial(Tensor(x, copy=False), m, delta, cfg.token_size)
    loss = sage_loss(oracle, x_adv, y, m, delta, cfg)
    grads = backward(tape, loss)
    G_param, d_param = Tensor(state.G, copy=False), Tensor(state.delta, copy=False)
    adam_step(G_param, grads[G], state.adam_G)
    adam_step(d_param, grads[delta], state.adam_delta)
    np.clip(state.delta, -cfg.epsilon, cfg.epsilon, out=state.delta)
    state.step += 1
    return state


def run_sage(oracle: OracleNet, x: np.ndarray, y: np.ndarray, cfg: SageConfig = SageConfig(),
             image_id: str = "", return_state: bool = False):
    """Run all ``cfg.steps`` steps from a zero state and return the importance map."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    grid = _grid_of(x.shape, cfg.token_size)
    state = SageState.zeros(x.shape[0], grid, cfg)
    for _ in range(cfg.steps):
        sage_step(state, oracle, x, y, cfg)
    W = np.exp(-np.logaddexp(0.0, -state.G * cfg.alpha_end))
    imap = ImportanceMap(W, cfg.token_size, image_id, oracle.oracle_id)
    return (imap, state) if return_state else imap


def dice_score(oracle: OracleNet, x: np.ndarray, y: np.ndarray, smooth: float = 1.0) -> float:
    """Soft Dice score (1 - soft Dice loss) of the oracle's prediction."""
    return 1.0 - ops.soft_dice_loss(oracle(Tensor(x, copy=False)), y, smooth).item()


MAX_BRUTE_TOKENS = 256
MAX_BRUTE_CHANNELS = 8


def brute_force_importance(oracle: OracleNet, x: np.ndarray, y: np.ndarray, epsilon: float,
                           token_size: int, image_id: str = "") -> ImportanceMap:
    """Exhaustive per-token attack with constant-sign shifts of size ``epsilon``.

    Score of token j = clean soft Dice - worst soft Dice over all 2^C channel
    sign patterns applied to token j alone, shifted pixels clamped to [0, 1].
    Scores are min-max normalized; a flat score field maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c = x.shape[0]
    ht, wt = _grid_of(x.shape, token_size)
    if ht * wt > MAX_BRUTE_TOKENS or c > MAX_BRUTE_CHANNELS:
        raise ValueError(f"brute force limited to {MAX_BRUTE_TOKENS} tokens and "
                         f"{MAX_BRUTE_CHANNELS} channels, got {ht * wt} tokens, {c} channels")
    base = dice_score(oracle, x, y)
    patterns = np.array(list(itertools.product((-1.0, 1.0), repeat=c)))
    scores = np.zeros((ht, wt))
    for i in range(ht):
        for j in range(wt):
            rows = slice(i * token_size, (i + 1) * token_size)
            cols = slice(j * token_size, (j + 1) * token_size)
            worst = np.inf
            for signs in patterns:
                xs = x.copy()
                xs[:, rows, cols] = np.clip(xs[:, rows, cols] + epsilon * signs[:, None, None], 0.0, 1.0)
                worst = min(worst, dice_score(oracle, xs, y))
            scores[i, j] = base - worst
    spread = scores.max() - scores.min()
    if spread <= 1e-12:
        norm = np.zeros_like(scores)
    else:
        norm = (scores - scores.min()) / spread
    return ImportanceMap(norm, token_size, image_id, oracle.oracle_id)
