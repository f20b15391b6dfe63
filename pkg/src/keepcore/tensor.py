"""Dense float64 tensors and a per-computation reverse-mode tape.

A :class:`Tensor` is a thin wrapper around a float64 ``numpy`` array. It is
*tracked* when it carries a :class:`Node`, i.e. a handle into a :class:`Tape`.
Operations in :mod:`keepcore.ops` record a node on the tape whenever one of
their inputs is tracked; :func:`backward` then walks that tape in reverse.

Example::

    tape = Tape()
    g = tape.watch(Tensor([0.5, -1.0]))
    loss = ops.l1_norm(ops.sigmoid(g))
    grads = backward(tape, loss)
    grads[g]          # -> Tensor with d loss / d g
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import NumericError, ShapeError, TapeError

MAX_RANK = 4

# backward callback: upstream grad -> one grad (or None) per parent
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(frozen=True)
class Node:
    """Handle of one entry on a tape."""

    tape: "Tape" = field(repr=False, compare=True)
    index: int

    def __hash__(self) -> int:
        return hash((id(self.tape), self.index))


@dataclass
class _Entry:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    backward: BackwardFn | None


class Tape:
    """Append-only record of one differentiable computation.

    Entries only ever reference earlier entries, so the tape is topologically
    ordered by construction. A tape is consumed by :func:`backward` and cannot
    be extended afterwards.
    """

    def __init__(self) -> None:
        self.nodes: list[_Entry] = []
        self.closed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor | np.ndarray | float) -> Tensor:
        """Return a tracked leaf copy of ``t`` on this tape."""
        src = t.data if isinstance(t, Tensor) else t
        out = Tensor(src)
        out.node = self._append("leaf", (), out.shape, None)
        return out

    def _append(self, op: str, parents: tuple[int, ...], shape: tuple[int, ...],
                backward_fn: BackwardFn | None) -> Node:
        if self.closed:
            raise TapeError("tape already consumed by backward(); start a new Tape")
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise TapeError(f"parent handle {p} does not reference an earlier entry")
        self.nodes.append(_Entry(op, parents, shape, backward_fn))
        return Node(self, len(self.nodes) - 1)


class Tensor:
    """Rank <= 4 array of float64 with an optional tape node."""

    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data: Any, node: Node | None = None, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if arr.size and 0 in arr.shape:
            raise ShapeError(f"shape extents must be positive, got {arr.shape}")
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    @property
    def tape(self) -> Tape | None:
        return None if self.node is None else self.node.tape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag}, data={np.array2string(self.data, threshold=8)})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; everything routes through keepcore.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.scalar_add(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.scalar_add(ops.scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __truediv__(self, scalar: float):
        from . import ops
        if isinstance(scalar, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return ops.scalar_mul(self, 1.0 / scalar)


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


def common_tape(*tensors: Tensor) -> Tape | None:
    tapes = {id(t.node.tape): t.node.tape for t in tensors if t.node is not None}
    if len(tapes) > 1:
        raise TapeError("inputs are tracked on different tapes")
    return next(iter(tapes.values()), None)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` in a Tensor and, if any input is tracked, append a node.

    ``backward_fn`` must return one gradient per input, in order; entries for
    untracked inputs are ignored.
    """
    check_finite(out, op)
    result = Tensor(out, copy=False)
    tape = common_tape(*inputs)
    if tape is None:
        return result
    parents = []
    slots = []
    for i, t in enumerate(inputs):
        if t.node is not None:
            parents.append(t.node.index)
            slots.append(i)

    def fn(g: np.ndarray) -> list[np.ndarray | None]:
        grads = backward_fn(g)
        return [grads[i] for i in slots]

    result.node = tape._append(op, tuple(parents), out.shape, fn)
    return result


class GradientMap:
    """Result of :func:`backward`: node handle (or tracked Tensor) -> gradient.

    Nodes with no path to the root map to zeros of their own shape.
    """

    def __init__(self, tape: Tape, grads: list[np.ndarray | None]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key: Tensor | Node) -> Tensor:
        node = key.node if isinstance(key, Tensor) else key
        if node is None or node.tape is not self._tape:
            raise TapeError("gradient requested for a tensor that is not on this tape")
        g = self._grads[node.index]
        if g is None:
            return Tensor(np.zeros(self._tape.nodes[node.index].shape))
        return Tensor(g, copy=False)

    def __contains__(self, key: Tensor | Node) -> bool:
        node = key.node if isinstance(key, Tensor) else key
        return node is not None and node.tape is self._tape

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, root: Tensor) -> GradientMap:
    """Accumulate d root / d node for every node on ``tape``.

    ``root`` must be a tracked scalar recorded on ``tape``. Each entry is
    visited once, in reverse order of recording. The tape is closed afterwards.
    """
    if root.node is None or root.node.tape is not tape:
        raise TapeError("root is not a tracked tensor on this tape")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.node.index] = np.ones(root.shape)
    for idx in range(root.node.index, -1, -1):
        g = grads[idx]
        entry = tape.nodes[idx]
        if g is None or entry.backward is None:
            continue
        for parent, pg in zip(entry.parents, entry.backward(g)):
            if pg is None:
                continue
            if pg.shape != tape.nodes[parent].shape:
                raise ShapeError(f"{entry.op} backward produced shape {pg.shape}, "
                                 f"expected {tape.nodes[parent].shape}")
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    tape.closed = True
    return GradientMap(tape, grads)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))
