"""Datasets: manifests on disk and the seeded synthetic segmentation task."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .formats import load_tensor, read_pnm, save_tensor, write_pgm
from .sage import ImportanceMap


@dataclass
class Sample:
    image_id: str
    x: np.ndarray  # C x H x W in [0, 1]
    y: np.ndarray  # H x W int labels
    core_token: tuple[int, int] | None = None


@dataclass
class ManifestEntry:
    image_id: str
    image: str
    label: str
    map: str | None = None
    core_token: list[int] | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    spacing: tuple[float, float] = (1.0, 1.0)
    root: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate image ids in manifest: {dup}")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_sample(self, entry: ManifestEntry) -> Sample:
        x = load_image(self.resolve(entry.image))
        y = read_labels(self.resolve(entry.label))
        if x.shape[-2:] != y.shape:
            raise DataError(f"{entry.image_id}: image {x.shape[-2:]} and label {y.shape} dims disagree")
        if y.max() >= self.num_classes:
            raise DataError(f"{entry.image_id}: label value {int(y.max())} >= num_classes {self.num_classes}")
        core = tuple(entry.core_token) if entry.core_token is not None else None
        return Sample(entry.image_id, x, y, core)

    def load_samples(self) -> list[Sample]:
        return [self.load_sample(e) for e in self.entries]

    def subset(self, ids) -> DatasetManifest:
        keep = set(ids)
        return DatasetManifest([e for e in self.entries if e.image_id in keep],
                               self.num_classes, self.spacing, self.root)

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes, "spacing": list(self.spacing),
                "entries": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.entries]}

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in raw["entries"]]
            m = cls(entries, int(raw["num_classes"]), tuple(raw.get("spacing", (1.0, 1.0))), path.parent)
        except FileNotFoundError as exc:
            raise DataError(f"manifest not found: {path}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        if check_files:
            for e in m.entries:
                try:
                    m.load_sample(e)
                except (OSError, FormatError) as exc:
                    raise DataError(f"{e.image_id}: {exc}") from exc
        return m


def load_image(path: Path) -> np.ndarray:
    """KCT1 (C x H x W or H x W) or 8-bit PGM, returned as C x H x W floats."""
    if path.suffix.lower() == ".pgm":
        arr = read_pnm(path)
        if arr.ndim != 2:
            raise DataError(f"{path}: expected a grayscale PGM")
        return arr[None].astype(np.float64) / 255.0
    arr = load_tensor(path)
    return arr[None] if arr.ndim == 2 else arr


def read_labels(path: Path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: label map must be a grayscale PGM")
    return arr.astype(np.int64)


def load_maps(manifest: DatasetManifest, maps_dir: Path | None = None) -> dict[str, ImportanceMap]:
    """Maps named in the manifest, else ``<maps_dir>/<image_id>.kcw`` when present."""
    out = {}
    for e in manifest.entries:
        if e.map is not None:
            p = manifest.resolve(e.map)
        elif maps_dir is not None:
            p = Path(maps_dir) / f"{e.image_id}.kcw"
        else:
            continue
        if p.exists():
            out[e.image_id] = ImportanceMap.load(p)
    return out


# --- synthetic task --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Blob-segmentation images whose object lies inside one planted core token.

    The object differs from the background mainly by a fine checkerboard
    texture of amplitude ``contrast`` (plus a small mean ``offset``), so its
    evidence is local to the token that holds it.
    """

    seed: int = 0
    core_tokens: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1), (2, 2))
    contrast: float = 0.25
    offset: float = 0.05
    image_size: int = 64
    token_size: int = 16
    num_classes: int = 2
    radius: tuple[float, float] = (4.0, 6.5)
    jitter: int = 1
    noise: float = 0.02
    background: float = 0.15

    def __post_init__(self):
        if self.image_size % self.token_size:
            raise DataError("image_size must be a multiple of token_size")
        grid = self.image_size // self.token_size
        if not self.core_tokens:
            raise DataError("at least one core token is required")
        for r, c in self.core_tokens:
            if not (0 <= r < grid and 0 <= c < grid):
                raise DataError(f"core token {(r, c)} outside the {grid}x{grid} grid")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if not 0.0 <= self.background <= 1.0:
            raise DataError("background level must lie in [0, 1]")
        if self.radius[1] + self.jitter > self.token_size / 2:
            raise DataError("blob radius plus jitter must fit inside one token")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticTask:
        d = dict(d)
        if "core_tokens" in d:
            d["core_tokens"] = tuple(tuple(int(v) for v in t) for t in d["core_tokens"])
        if "radius" in d:
            d["radius"] = tuple(d["radius"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["core_tokens"] = [list(t) for t in self.core_tokens]
        d["radius"] = list(self.radius)
        return d

    def sample(self, index: int) -> Sample:
        rng = np.random.default_rng([self.seed, index])
        n, t = self.image_size, self.token_size
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        # smooth background: a base level plus a random low-frequency ripple
        phase = rng.uniform(0, 2 * np.pi, 2)
        freq = rng.uniform(0.5, 1.5, 2) * 2 * np.pi / n
        bg = self.background + 0.08 * np.sin(freq[0] * yy + phase[0]) * np.cos(freq[1] * xx + phase[1])
        tr, tc = self.core_tokens[int(rng.integers(len(self.core_tokens)))]
        cy = tr * t + (t - 1) / 2 + rng.integers(-self.jitter, self.jitter + 1)
        cx = tc * t + (t - 1) / 2 + rng.integers(-self.jitter, self.jitter + 1)
        r = rng.uniform(*self.radius)
        dist = np.hypot(yy - cy, xx - cx)
        fg = dist <= r
        checker = np.where((yy + xx) % 2 == 0, 0.5, -0.5)
        img = bg + fg * (self.offset + self.contrast * checker)
        img = img + self.noise * rng.standard_normal(img.shape)
        y = np.zeros((n, n), dtype=np.int64)
        # concentric shells for more than two classes: innermost is the highest class
        for k in range(1, self.num_classes):
            y[dist <= r * (self.num_classes - k) / (self.num_classes - 1)] = k
        return Sample(f"synth-{self.seed}-{index:05d}", np.clip(img, 0.0, 1.0)[None], y, (int(tr), int(tc)))


def synth_dataset(task: SyntheticTask, n: int, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write ``n`` samples (KCT1 images, PGM labels) and a manifest under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        s = task.sample(i)
        img_rel = f"images/{s.image_id}.kct"
        lab_rel = f"labels/{s.image_id}.pgm"
        save_tensor(out / img_rel, s.x)
        write_pgm(out / lab_rel, s.y.astype(np.uint8))
        entries.append(ManifestEntry(s.image_id, img_rel, lab_rel, core_token=list(s.core_token)))
    manifest = DatasetManifest(entries, task.num_classes, (1.0, 1.0), out)
    manifest.save(out / "manifest.json")
    (out / "task.json").write_text(json.dumps(task.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest


def split_ids(ids: list[str], seed: int, fractions=(0.6, 0.2, 0.2)) -> tuple[list[str], list[str], list[str]]:
    """Deterministic train/val/test split of ``ids``; depends only on the sorted ids and ``seed``."""
    ordered = sorted(ids)
    perm = np.random.default_rng([seed, 7]).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
