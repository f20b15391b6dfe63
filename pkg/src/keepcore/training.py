"""Mini-batch training of the convolutional segmenter with AdamW + cosine decay.

Baseline and importance-guided runs share everything except the per-sample
transform: same initialization, same batch order, and the same augmentation
random stream for each (epoch, sample).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import augment as aug_mod
from . import ops
from .augment import AugmentSpec
from .data import DatasetManifest, Sample, split_ids
from .errors import ConfigError, DataError
from .keep import KeepConfig, keep_augment
from .metrics import aggregate, evaluate_sample, to_csv
from .optim import AdamState, adam_step, cosine_lr
from .oracle import OracleNet, default_layers
from .sage import ImportanceMap
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

MODES = ("baseline_aug", "keep_core")
DICE_GATE = 0.85


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.01
    width: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.width < 1 or self.depth < 1:
            raise ConfigError("width and depth must be >= 1")


def sample_rng(seed: int, epoch: int, image_id: str) -> np.random.Generator:
    """Augmentation stream for one (epoch, sample); identical across modes."""
    key = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, epoch, key])


def soft_target(y: np.ndarray, k: int, weight: np.ndarray | None = None,
                y_partner: np.ndarray | None = None) -> np.ndarray:
    target = ops.one_hot(y, k)
    if weight is not None:
        target = weight[None] * target + (1.0 - weight[None]) * ops.one_hot(y_partner, k)
    return target


# A transform maps (sample, rng, partner sample or None) -> (x, K x H x W soft target)
Transform = Callable[[Sample, np.random.Generator, "Sample | None"], tuple[np.ndarray, np.ndarray]]


def make_transform(aug: AugmentSpec, num_classes: int, mode: str = "baseline_aug",
                   maps: dict[str, ImportanceMap] | None = None,
                   keep_cfg: KeepConfig | None = None) -> Transform:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    def baseline(s: Sample, rng, partner):
        pair = (partner.x, partner.y) if aug.needs_partner else None
        x, y, w = aug_mod.apply(aug, s.x, s.y, rng, pair)
        if aug.kind == "mixup":
            return x, soft_target(y, num_classes, np.full(y.shape, w), partner.y)
        return x, soft_target(y, num_classes)

    def keep(s: Sample, rng, partner):
        pair = (partner.x, partner.y) if aug.needs_partner else None
        out = keep_augment(s.x, s.y, maps[s.image_id], aug, keep_cfg, rng, pair)
        return out.x, soft_target(out.y, num_classes, out.weight, out.y_partner)

    if mode == "keep_core":
        if keep_cfg is None or maps is None:
            raise ConfigError("keep_core mode needs importance maps and a KeepConfig")
        return keep
    return baseline


def identity_transform(num_classes: int) -> Transform:
    return lambda s, rng, partner: (s.x, soft_target(s.y, num_classes))


def batch_loss(net: OracleNet, params, xs: np.ndarray, targets: np.ndarray):
    logits = net.forward(Tensor(xs, copy=False), params)
    ce, dice = ops.seg_losses(logits, targets)
    return ops.add(ce, dice)


def predict(net: OracleNet, samples: list[Sample], chunk: int = 16) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(samples), chunk):
        xs = np.stack([s.x for s in samples[i:i + chunk]])
        preds.extend(net.predict(xs))
    return preds


def foreground_dice(net: OracleNet, samples: list[Sample]) -> float:
    """Mean over samples and foreground classes of hard Dice."""
    from .metrics import overlap_metrics
    scores = []
    for s, p in zip(samples, predict(net, samples)):
        scores.extend(overlap_metrics(p, s.y, k).dice for k in range(1, net.num_classes))
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class FitResult:
    final: OracleNet
    best: OracleNet
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def fit(net: OracleNet, samples: list[Sample], cfg: TrainingConfig, transform: Transform,
        needs_partner: bool = False, val: list[Sample] | None = None) -> FitResult:
    """Train ``net`` in place. With ``val``, also keep the best-validation-Dice checkpoint."""
    if not samples:
        raise DataError("no training samples")
    if net.frozen:
        raise RuntimeError("cannot train a frozen network")
    params = [Tensor(p, copy=False) for p in net.parameters()]
    states = [AdamState.zeros(p.shape, lr=cfg.lr, weight_decay=cfg.weight_decay) for p in params]
    order_rng = np.random.default_rng([cfg.seed, 1])
    n = len(samples)
    best_score, best_epoch, best_params = -np.inf, -1, None
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            xs, ts = [], []
            for pos in range(start, min(start + cfg.batch, n)):
                s = samples[order[pos]]
                partner = samples[order[(pos + 1) % n]] if needs_partner else None
                x, t = transform(s, sample_rng(cfg.seed, epoch, s.image_id), partner)
                xs.append(x)
                ts.append(t)
            tape = Tape()
            tracked = [tape.watch(p) for p in params]
            loss = batch_loss(net, tracked, np.stack(xs), np.stack(ts))
            grads = backward(tape, loss)
            for p, tp, st in zip(params, tracked, states):
                adam_step(p, grads[tp], st, lr=lr)
            losses.append(loss.item())
        rec = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        if val:
            score = foreground_dice(net, val)
            rec["val_dice"] = score
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_params = [p.data.copy() for p in params]
        history.append(rec)
        log.debug("epoch %d loss %.4f", epoch, rec["loss"])
    final = _snapshot(net, [p.data for p in params])
    best = _snapshot(net, best_params) if best_params is not None else final
    return FitResult(final, best, best_epoch if best_params is not None else cfg.epochs - 1, history)


def _snapshot(net: OracleNet, arrays) -> OracleNet:
    return OracleNet(net.layers, arrays[0::2], arrays[1::2], net.num_classes, net.oracle_id, frozen=True)


def class_frequencies(samples: list[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes)
    for s in samples:
        counts += np.bincount(s.y.ravel(), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


def new_model(in_channels: int, num_classes: int, cfg: TrainingConfig, seed: int,
              oracle_id: str = "model", samples: list[Sample] | None = None) -> OracleNet:
    """Fresh network; ``samples`` (un-augmented) set the output-bias prior."""
    layers = default_layers(in_channels, num_classes, cfg.width, cfg.depth)
    prior = class_frequencies(samples, num_classes) if samples else None
    return OracleNet.init(layers, num_classes, seed, oracle_id, prior)


@dataclass
class OracleReport:
    net: OracleNet
    train_dice: float
    converged: bool
    history: list[dict]


def train_oracle(manifest: DatasetManifest, cfg: TrainingConfig = TrainingConfig(),
                 oracle_id: str = "oracle-A", init_seed: int | None = None) -> OracleReport:
    """Train a segmentation oracle on every manifest entry, then freeze it.

    ``converged`` is False when the final training foreground Dice is below
    the 0.85 gate; the weights are still returned.
    """
    samples = manifest.load_samples()
    if not samples:
        raise DataError("cannot train an oracle on an empty manifest")
    seed = cfg.seed if init_seed is None else init_seed
    net = new_model(samples[0].x.shape[0], manifest.num_classes, cfg, seed, oracle_id, samples)
    res = fit(net, samples, cfg, identity_transform(manifest.num_classes))
    dice = foreground_dice(res.final, samples)
    if dice < DICE_GATE:
        log.warning("oracle training Dice %.3f below gate %.2f", dice, DICE_GATE)
    return OracleReport(res.final, dice, dice >= DICE_GATE, res.history)


@dataclass
class TrainReport:
    mode: str
    fit: FitResult
    records: list[dict]
    rows: list[dict]
    csv: str
    split: tuple[list[str], list[str], list[str]]

    @property
    def foreground_dice(self) -> float:
        fg = [r["dice"] for r in self.rows if r["class"] > 0]
        return float(np.mean(fg))


def evaluate(net: OracleNet, samples: list[Sample], spacing=(1.0, 1.0)) -> list[dict]:
    records = []
    for s, p in zip(samples, predict(net, samples)):
        records.extend(evaluate_sample(p, s.y, net.num_classes, s.image_id, spacing))
    return records


def train_with_keep(manifest: DatasetManifest, cfg: TrainingConfig, aug: AugmentSpec, mode: str,
                    maps: dict[str, ImportanceMap] | None = None, keep_cfg: KeepConfig | None = None,
                    split_seed: int = 0, init_seed: int | None = None) -> TrainReport:
    """Train a fresh model on the train split and report metrics on the test split.

    The validation split selects the best epoch. Both modes see identical
    splits, initialization, batch order and augmentation draws.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    train_ids, val_ids, test_ids = split_ids([e.image_id for e in manifest.entries], split_seed)
    if mode == "keep_core":
        missing = [i for i in train_ids if maps is None or i not in maps]
        if missing:
            raise DataError(f"keep_core mode needs importance maps; missing for {len(missing)} "
                            f"training images (e.g. {missing[0]!r})")
        if keep_cfg is None:
            keep_cfg = KeepConfig()
    by_id = {s.image_id: s for s in manifest.load_samples()}
    train = [by_id[i] for i in sorted(train_ids)]
    val = [by_id[i] for i in sorted(val_ids)]
    test = [by_id[i] for i in sorted(test_ids)]
    seed = cfg.seed if init_seed is None else init_seed
    net = new_model(train[0].x.shape[0], manifest.num_classes, cfg, seed, f"model-{mode}", train)
    transform = make_transform(aug, manifest.num_classes, mode, maps, keep_cfg)
    res = fit(net, train, cfg, transform, aug.needs_partner, val or None)
    records = evaluate(res.best, test, manifest.spacing)
    rows = aggregate(records)
    return TrainReport(mode, res, records, rows, to_csv(rows, {"mode": mode, "augment": aug.kind}),
                       (train_ids, val_ids, test_ids))
