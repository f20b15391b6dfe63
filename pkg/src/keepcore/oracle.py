"""Frozen convolutional segmentation oracle and its weights file.

Weights file layout::

    b"KCO1" | u32 LE descriptor length | JSON descriptor | blob region

The JSON descriptor carries the architecture and a manifest of
``{name, offset, nbytes}`` entries; offsets are relative to the start of the
blob region and every blob is a KCT1 record.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import FormatError, ShapeError
from .formats import tensor_from_bytes, tensor_to_bytes
from .tensor import Tape, Tensor, backward

WEIGHTS_MAGIC = b"KCO1"

# default seeds of the two shipped oracles used for cross-oracle checks
ORACLE_SEEDS = {"oracle-A": 1701, "oracle-B": 2718}


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.kernel}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")


def default_layers(in_channels: int, num_classes: int, width: int = 16, depth: int = 4,
                   kernel: int = 3) -> list[LayerSpec]:
    chans = [in_channels] + [width] * (depth - 1) + [num_classes]
    return [LayerSpec(chans[i], chans[i + 1], kernel, "relu" if i < depth - 1 else "none")
            for i in range(depth)]


class OracleNet:
    """Plain stack of same-padded conv layers producing per-pixel class logits."""

    def __init__(self, layers: list[LayerSpec], weights: list[np.ndarray], biases: list[np.ndarray],
                 num_classes: int, oracle_id: str = "oracle", frozen: bool = False):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not layers:
            raise ShapeError("an oracle needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if prev.out_channels != cur.in_channels:
                raise ShapeError(f"layer chain broken: {prev.out_channels} -> {cur.in_channels}")
        if layers[-1].out_channels != num_classes:
            raise ShapeError(f"final layer emits {layers[-1].out_channels} channels, expected {num_classes}")
        if len(weights) != len(layers) or len(biases) != len(layers):
            raise ShapeError("one weight and one bias tensor per layer required")
        for spec, w, b in zip(layers, weights, biases):
            if w.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
                raise ShapeError(f"weight shape {w.shape} does not match {spec}")
            if b.shape != (spec.out_channels,):
                raise ShapeError(f"bias shape {b.shape} does not match {spec}")
        self.layers = list(layers)
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.num_classes = num_classes
        self.oracle_id = oracle_id
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, layers: list[LayerSpec], num_classes: int, seed: int, oracle_id: str = "oracle",
             class_prior: np.ndarray | None = None) -> OracleNet:
        """He-normal weights, zero biases; the output layer is scaled by 0.1.

        With ``class_prior`` the output bias starts at its log, so the initial
        prediction already matches the label frequencies instead of spending
        the first few hundred steps getting there.
        """
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for i, spec in enumerate(layers):
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            gain = 0.1 if i == len(layers) - 1 else 1.0
            ws.append(rng.normal(0.0, gain * np.sqrt(2.0 / fan_in),
                                 (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)))
            bs.append(np.zeros(spec.out_channels))
        if class_prior is not None:
            prior = np.asarray(class_prior, dtype=np.float64)
            if prior.shape != (num_classes,):
                raise ShapeError(f"class prior has shape {prior.shape}, expected ({num_classes},)")
            logp = np.log(np.clip(prior, 1e-6, None))
            bs[-1] = logp - logp.mean()
        return cls(layers, ws, bs, num_classes, oracle_id)

    @classmethod
    def default(cls, in_channels: int = 1, num_classes: int = 2, seed: int = 0,
                oracle_id: str = "oracle") -> OracleNet:
        return cls.init(default_layers(in_channels, num_classes), num_classes, seed, oracle_id)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def freeze(self) -> OracleNet:
        for arr in self.weights + self.biases:
            arr.flags.writeable = False
        self.frozen = True
        return self

    def unfrozen_copy(self) -> OracleNet:
        return OracleNet(self.layers, self.weights, self.biases, self.num_classes, self.oracle_id)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: Tensor, params: list[Tensor] | None = None) -> Tensor:
        """Logits ``K x H x W`` (or ``N x K x H x W`` for a batch).

        The output is tracked iff ``x`` or any of ``params`` is. ``params``,
        if given, replaces the stored weights (interleaved weight, bias).
        """
        cdim = x.data.ndim - 3
        if x.data.ndim not in (3, 4) or x.shape[cdim] != self.in_channels:
            raise ShapeError(f"oracle expects {self.in_channels} input channels, got input {list(x.shape)}")
        if params is None:
            params = [Tensor(a, copy=False) for a in self.parameters()]
        h = x
        for i, spec in enumerate(self.layers):
            h = ops.conv2d(h, params[2 * i], params[2 * i + 1])
            if spec.activation == "relu":
                h = ops.relu(h)
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Hard labels (argmax over classes) for an untracked input."""
        logits = self.forward(Tensor(x)).data
        return logits.argmax(axis=-3)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for arr in self.parameters():
            h.update(tensor_to_bytes(arr))
        return h.hexdigest()

    def descriptor(self) -> dict:
        return {"num_classes": self.num_classes, "oracle_id": self.oracle_id,
                "layers": [asdict(s) for s in self.layers]}


def forward(net: OracleNet, x: Tensor | np.ndarray, tracked: bool = False) -> Tensor:
    """Functional form of :meth:`OracleNet.forward`; ``tracked`` watches ``x`` on a fresh tape."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tracked and not x.tracked:
        x = Tape().watch(x)
    return net.forward(x)


def input_gradient(net: OracleNet, x: np.ndarray | Tensor, y: np.ndarray,
                   lambda_ce: float = 1.0, lambda_dice: float = 1.0) -> tuple[float, np.ndarray]:
    """Loss ``lambda_ce * CE + lambda_dice * soft Dice`` and its gradient w.r.t. ``x``."""
    if not net.frozen:
        raise RuntimeError("input_gradient requires a frozen oracle")
    tape = Tape()
    xt = tape.watch(x)
    ce, dice = ops.seg_losses(net.forward(xt), y)
    loss = ops.add(ops.scalar_mul(ce, lambda_ce), ops.scalar_mul(dice, lambda_dice))
    grads = backward(tape, loss)
    return loss.item(), grads[xt].data


def save_weights(net: OracleNet, path: str | os.PathLike) -> None:
    blobs = []
    manifest = []
    offset = 0
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        for name, arr in ((f"layer{i}.weight", w), (f"layer{i}.bias", b)):
            blob = tensor_to_bytes(arr)
            manifest.append({"name": name, "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    desc = net.descriptor()
    desc["manifest"] = manifest
    raw = json.dumps(desc, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(WEIGHTS_MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(blobs))


def load_weights(path: str | os.PathLike, frozen: bool = True) -> OracleNet:
    """Load an oracle; any inconsistency raises :class:`FormatError` before a net is built."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("bad oracle weights magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated descriptor length", 4)
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise FormatError(f"descriptor of {n} bytes runs past end of file", 8)
    try:
        desc = json.loads(buf[8:8 + n].decode("utf-8"))
        layers = [LayerSpec(**d) for d in desc["layers"]]
        manifest = desc["manifest"]
        num_classes = int(desc["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt descriptor: {exc}", 8) from exc
    if len(manifest) != 2 * len(layers):
        raise FormatError(f"manifest lists {len(manifest)} tensors, architecture has "
                          f"{len(layers)} layers (expected {2 * len(layers)})", 8)
    base = 8 + n
    arrays = []
    for entry in manifest:
        start = base + int(entry["offset"])
        end = start + int(entry["nbytes"])
        if end > len(buf):
            raise FormatError(f"blob {entry['name']!r} runs past end of file", start)
        arr, stop = tensor_from_bytes(buf[:end], start)
        if stop != end:
            raise FormatError(f"blob {entry['name']!r} size disagrees with manifest", start)
        arrays.append(arr)
    try:
        return OracleNet(layers, arrays[0::2], arrays[1::2], num_classes,
                         desc.get("oracle_id", "oracle"), frozen=frozen)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"architecture mismatch: {exc}", 8) from exc
