"""Run configuration and the stages behind the command-line tool.

Every stage reads and writes files under the run's output directory, so the
stages can be invoked one at a time::

    outputs/
      data/manifest.json, images/, labels/   synth
      oracle.kco, reports/oracle.json        train-oracle
      maps/<image_id>.kcw, maps/index.json   sage
      keep_aug/                              keep-aug
      model-<mode>.kco, reports/train-*      train
      reports/eval-<mode>.csv                eval
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .augment import AugmentSpec
from .data import DatasetManifest, SyntheticTask, load_maps, split_ids, synth_dataset
from .errors import ConfigError, DataError, KeepCoreError, ShapeError
from .formats import save_tensor, to_u8, write_pgm, write_ppm
from .keep import KeepConfig, keep_augment
from .metrics import aggregate, to_csv
from .oracle import ORACLE_SEEDS, OracleNet, load_weights, save_weights
from .sage import ImportanceMap, SageConfig, derive_seed, run_sage
from .training import MODES, TrainingConfig, evaluate, sample_rng, train_oracle, train_with_keep

log = logging.getLogger(__name__)

# SAGE gate/perturbation l1 weights for the synthetic task. The segmentation
# losses are pixel means, so per-token attack gradients on a well-trained toy
# oracle are far below the generic 0.01 weights, which close every gate.
# Calibrated on the default task against brute-force rankings and the planted
# core tokens, for both shipped oracles.
TOY_SAGE_PENALTY = 5e-5

_TOP_KEYS = {"seed", "outputs", "data", "oracle", "sage", "keep", "augment", "training", "mode", "workers"}


def _section(cls, raw: dict | None, where: str, **defaults):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    for k, v in defaults.items():
        raw.setdefault(k, v)
    try:
        return cls.from_dict(raw) if hasattr(cls, "from_dict") else cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs. Component seeds default to values
    derived from the top-level ``seed``; an explicit seed in a section wins."""

    seed: int = 0
    outputs: Path = Path("outputs")
    manifest: Path | None = None
    num_samples: int = 64
    task: SyntheticTask = field(default_factory=SyntheticTask)
    oracle_id: str = "oracle-A"
    oracle_weights: Path | None = None
    oracle_seed: int = ORACLE_SEEDS["oracle-A"]
    oracle_training: TrainingConfig = field(default_factory=TrainingConfig)
    sage: SageConfig = field(default_factory=lambda: SageConfig(mu_sparse=TOY_SAGE_PENALTY,
                                                                beta_delta=TOY_SAGE_PENALTY))
    keep: KeepConfig = field(default_factory=KeepConfig)
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec("gaussian_noise"))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    mode: str = "keep_core"
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.num_samples < 1:
            raise ConfigError("data.n must be >= 1")
        if self.task.image_size % self.sage.token_size:
            raise ConfigError(f"sage.token_size {self.sage.token_size} does not divide "
                              f"image size {self.task.image_size}")

    @property
    def manifest_path(self) -> Path:
        return self.manifest or self.outputs / "data" / "manifest.json"

    @property
    def weights_path(self) -> Path:
        return self.oracle_weights or self.outputs / "oracle.kco"

    @property
    def maps_dir(self) -> Path:
        return self.outputs / "maps"

    @property
    def reports_dir(self) -> Path:
        return self.outputs / "reports"

    def model_path(self, mode: str | None = None) -> Path:
        return self.outputs / f"model-{mode or self.mode}.kco"

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | os.PathLike = ".",
                  seed: int | None = None, outputs: str | None = None, workers: int | None = None) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(raw) - _TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        base = Path(base_dir)

        def path(p) -> Path:
            p = Path(p)
            return p if p.is_absolute() else base / p

        s = int(raw.get("seed", 0) if seed is None else seed)
        out = Path(outputs) if outputs is not None else path(raw.get("outputs", "outputs"))

        data = dict(raw.get("data") or {})
        bad = sorted(set(data) - {"manifest", "n", "synthetic"})
        if bad:
            raise ConfigError(f"unknown keys in data: {bad}")
        task = _section(SyntheticTask, data.get("synthetic"), "data.synthetic", seed=s)

        orc = dict(raw.get("oracle") or {})
        bad = sorted(set(orc) - {"id", "weights", "seed", "training"})
        if bad:
            raise ConfigError(f"unknown keys in oracle: {bad}")
        oracle_id = str(orc.get("id", "oracle-A"))
        training_raw = raw.get("training")
        training = _section(TrainingConfig, training_raw, "training", seed=s)
        oracle_training = _section(TrainingConfig, orc.get("training", training_raw), "oracle.training", seed=s)

        try:
            return cls(
                seed=s,
                outputs=out,
                manifest=path(data["manifest"]) if "manifest" in data else None,
                num_samples=int(data.get("n", 64)),
                task=task,
                oracle_id=oracle_id,
                oracle_weights=path(orc["weights"]) if "weights" in orc else None,
                oracle_seed=int(orc.get("seed", ORACLE_SEEDS.get(oracle_id, 0) + s)),
                oracle_training=oracle_training,
                sage=_section(SageConfig, raw.get("sage"), "sage", seed=s, token_size=task.token_size,
                              mu_sparse=TOY_SAGE_PENALTY, beta_delta=TOY_SAGE_PENALTY),
                keep=_section(KeepConfig, raw.get("keep"), "keep", seed=s),
                augment=_section(AugmentSpec, raw.get("augment", {"kind": "gaussian_noise"}), "augment"),
                training=training,
                mode=str(raw.get("mode", "keep_core")),
                workers=int(raw.get("workers", 1) if workers is None else workers),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, path.parent, **overrides)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "outputs": str(self.outputs), "mode": self.mode, "workers": self.workers,
            "data": {"manifest": str(self.manifest_path), "n": self.num_samples, "synthetic": self.task.to_dict()},
            "oracle": {"id": self.oracle_id, "weights": str(self.weights_path), "seed": self.oracle_seed,
                       "training": asdict(self.oracle_training)},
            "sage": asdict(self.sage), "keep": asdict(self.keep), "augment": self.augment.to_dict(),
            "training": asdict(self.training),
        }


# --- map generation ---------------------------------------------------------

def _map_one(args) -> tuple[str, bytes | None, str | None]:
    manifest, oracle, cfg, image_id, seed = args
    try:
        entry = next(e for e in manifest.entries if e.image_id == image_id)
        s = manifest.load_sample(entry)
        imap = run_sage(oracle, s.x, s.y, replace(cfg, seed=seed), image_id)
        return image_id, imap.to_bytes(), None
    except Exception as exc:  # recorded per image; the run continues
        return image_id, None, f"{type(exc).__name__}: {exc}"


@dataclass
class MapArchive:
    out_dir: Path
    written: list[str]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def generate_maps(manifest: DatasetManifest, oracle: OracleNet, cfg: SageConfig, out_dir: str | os.PathLike,
                  workers: int = 1, base_seed: int | None = None) -> MapArchive:
    """One KCW1 file per manifest image plus ``index.json``.

    Each image gets its own seed derived from ``base_seed`` and its id, so the
    archive does not depend on ``workers`` or on scheduling order.
    """
    if not oracle.frozen:
        raise RuntimeError("map generation requires a frozen oracle")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.seed if base_seed is None else base_seed
    ids = sorted(e.image_id for e in manifest.entries)
    jobs = [(manifest, oracle, cfg, i, derive_seed(base, i)) for i in ids]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_map_one, jobs, chunksize=1))
    else:
        results = [_map_one(j) for j in jobs]
    written, failures, index = [], {}, []
    for image_id, blob, err in results:
        if err is not None:
            failures[image_id] = err
            log.error("map for %s failed: %s", image_id, err)
            continue
        (out / f"{image_id}.kcw").write_bytes(blob)
        written.append(image_id)
        index.append({"image_id": image_id, "file": f"{image_id}.kcw", "seed": derive_seed(base, image_id),
                      "sha256": hashlib.sha256(blob).hexdigest()})
    meta = {"oracle_id": oracle.oracle_id, "oracle_sha256": oracle.weights_hash(), "seed": base,
            "sage": asdict(cfg), "maps": index,
            "failures": [{"image_id": k, "error": v} for k, v in sorted(failures.items())]}
    (out / "index.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return MapArchive(out, written, failures)


# --- rendering --------------------------------------------------------------

def render_map(imap: ImportanceMap, out_path: str | os.PathLike, image: np.ndarray | None = None) -> np.ndarray:
    """Write W as a grayscale PGM, or as a 50% red overlay on ``image`` (PPM).

    Returns the byte raster that was written.
    """
    t = imap.token_size
    W = np.repeat(np.repeat(imap.grid, t, axis=0), t, axis=1)
    if image is None:
        raster = to_u8(W)
        write_pgm(out_path, raster)
        return raster
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
        img = np.moveaxis(img, 0, -1)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[:2] != W.shape:
        raise ShapeError(f"image is {img.shape[0]}x{img.shape[1]} but the map covers {W.shape[0]}x{W.shape[1]}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] != 3:
        raise ShapeError(f"overlay needs 1 or 3 image channels, got {img.shape[2]}")
    red = np.zeros_like(img)
    red[..., 0] = W
    raster = to_u8(0.5 * np.clip(img, 0.0, 1.0) + 0.5 * red)
    write_ppm(out_path, raster)
    return raster


# --- stages -----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    return DatasetManifest.load(cfg.manifest_path)


def splits(cfg: RunConfig, manifest: DatasetManifest) -> tuple[list[str], list[str], list[str]]:
    return split_ids([e.image_id for e in manifest.entries], cfg.seed)


def stage_synth(cfg: RunConfig) -> DatasetManifest:
    return synth_dataset(cfg.task, cfg.num_samples, cfg.manifest_path.parent)


def stage_train_oracle(cfg: RunConfig):
    """Train the oracle on the whole manifest and save it; the report says whether it passed the gate."""
    manifest = load_manifest(cfg)
    rep = train_oracle(manifest, cfg.oracle_training, cfg.oracle_id, cfg.oracle_seed)
    cfg.weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(rep.net, cfg.weights_path)
    _write_json(cfg.reports_dir / "oracle.json",
                {"oracle_id": cfg.oracle_id, "train_dice": rep.train_dice, "converged": rep.converged,
                 "sha256": rep.net.weights_hash(), "history": rep.history})
    return rep


def stage_sage(cfg: RunConfig) -> MapArchive:
    manifest = load_manifest(cfg)
    oracle = load_weights(cfg.weights_path)
    return generate_maps(manifest, oracle, cfg.sage, cfg.maps_dir, cfg.workers, cfg.seed)


def stage_keep_aug(cfg: RunConfig, epoch: int = 0) -> list[str]:
    """Write KEEP-augmented training images (KCT1) with a side-car JSON of core/masked tokens."""
    manifest = load_manifest(cfg)
    maps = load_maps(manifest, cfg.maps_dir)
    train_ids = sorted(splits(cfg, manifest)[0])
    missing = [i for i in train_ids if i not in maps]
    if missing:
        raise DataError(f"no importance map for {len(missing)} training images (e.g. {missing[0]!r})")
    by_id = {s.image_id: s for s in manifest.load_samples()}
    out = cfg.outputs / "keep_aug"
    out.mkdir(parents=True, exist_ok=True)
    for pos, image_id in enumerate(train_ids):
        s = by_id[image_id]
        partner = None
        if cfg.augment.needs_partner:
            p = by_id[train_ids[(pos + 1) % len(train_ids)]]
            partner = (p.x, p.y)
        res = keep_augment(s.x, s.y, maps[image_id], cfg.augment, cfg.keep,
                           sample_rng(cfg.training.seed, epoch, image_id), partner)
        save_tensor(out / f"{image_id}.kct", res.x)
        write_pgm(out / f"{image_id}.label.pgm", res.y.astype(np.uint8))
        _write_json(out / f"{image_id}.json", {
            "image_id": image_id, "epoch": epoch, "augment": cfg.augment.kind,
            "core": np.argwhere(res.core).tolist(), "mask": np.argwhere(res.mask).tolist(),
            "mix_weight": res.mix_weight})
    return train_ids


def stage_train(cfg: RunConfig, mode: str | None = None):
    mode = mode or cfg.mode
    manifest = load_manifest(cfg)
    maps = load_maps(manifest, cfg.maps_dir) if mode == "keep_core" else None
    rep = train_with_keep(manifest, cfg.training, cfg.augment, mode, maps, cfg.keep,
                          split_seed=cfg.seed, init_seed=cfg.training.seed)
    save_weights(rep.fit.best, cfg.model_path(mode))
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    (cfg.reports_dir / f"train-{mode}.csv").write_text(rep.csv)
    _write_json(cfg.reports_dir / f"train-{mode}.json",
                {"mode": mode, "best_epoch": rep.fit.best_epoch, "history": rep.fit.history,
                 "split": dict(zip(("train", "val", "test"), rep.split))})
    return rep


def stage_eval(cfg: RunConfig, mode: str | None = None, weights: Path | None = None) -> list[dict]:
    """Evaluate a trained model on the held-out split. Reads no importance maps."""
    mode = mode or cfg.mode
    manifest = load_manifest(cfg)
    weights = weights or cfg.model_path(mode)
    if not Path(weights).exists():
        raise DataError(f"model weights not found: {weights}")
    net = load_weights(weights)
    test_ids = set(splits(cfg, manifest)[2])
    samples = [s for s in manifest.load_samples() if s.image_id in test_ids]
    records = evaluate(net, sorted(samples, key=lambda s: s.image_id), manifest.spacing)
    rows = aggregate(records)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    (cfg.reports_dir / f"eval-{mode}.csv").write_text(to_csv(rows, {"mode": mode, "augment": cfg.augment.kind}))
    _write_json(cfg.reports_dir / f"eval-{mode}.json", {"mode": mode, "records": records})
    return rows


__all__ = ["RunConfig", "MapArchive", "generate_maps", "render_map", "stage_synth", "stage_train_oracle",
           "stage_sage", "stage_keep_aug", "stage_train", "stage_eval", "KeepCoreError"]
