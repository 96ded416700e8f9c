"""Dense 4-D tensors and the reverse-mode tape.

Every value that flows through the networks is a Tensor with shape
(N, C, H, W), float32 by default and float64 when a caller asks for
gradient-check precision.  Ops (see danet.tensor.ops) record nodes on the
active Tape; backward() replays the tape in reverse.  VJPs are themselves
written in terms of ops, so running backward with create_graph=True yields
a differentiable gradient and second-order terms (needed by the gradient
penalty) come out of the same machinery.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an op's contract."""


class ParamError(ValueError):
    """Raised for invalid scalar parameters (negative sigma, even kernel, ...)."""


class ContractError(ValueError):
    """Raised when an API-level precondition is violated (non-scalar loss etc.)."""


class NonFiniteError(RuntimeError):
    """Raised when a loss or update turns NaN/Inf during training."""


_next_id = itertools.count(1)


class Tensor:
    """Immutable-by-convention 4-D array plus autodiff metadata.

    The wrapped ndarray is never mutated by the library; optimizer steps
    produce fresh Tensors.  ``tid`` is a process-unique id used as the key
    into gradient stores.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(
                f"Tensor requires a 4-D (N, C, H, W) array, got shape {arr.shape}"
            )
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.tid = next(_next_id)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    @staticmethod
    def scalar(value: float, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))

    @staticmethod
    def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class Node:
    """One recorded op: its output id, input tensors and a VJP callback.

    ``vjp(grad_out, want)`` returns one Tensor (or None) per input; entries
    whose ``want`` flag is False may be skipped by the implementation.
    """

    __slots__ = ("op", "out_id", "inputs", "vjp")

    def __init__(self, op: str, out_id: int, inputs: tuple["Tensor", ...], vjp):
        self.op = op
        self.out_id = out_id
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of ops.  Nodes are appended in creation order, which
    is already a topological order, so backward is a single reverse sweep.
    ``grads`` holds the store produced by the most recent backward call."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: "GradStore | None" = None

    def __len__(self) -> int:
        return len(self.nodes)


class GradStore(dict):
    """Gradient store keyed by tensor id, with a Tensor-keyed accessor."""

    def of(self, t: Tensor) -> Tensor | None:
        return self.get(t.tid)


# Active-tape stack.  An entry of None marks a no_grad region.
_tape_stack: list[Tape | None] = []


def current_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape inside the block."""
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend recording inside the block (cheap eval paths)."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, appending a node when recording is active and at
    least one input wants gradients.  All ops funnel through here."""
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(Node(op, out.tid, inputs, vjp))
    return out


def _need_set(tape: Tape, wrt_ids: set[int]) -> set[int]:
    """Forward closure: ids whose gradient must exist to reach every wrt id."""
    need = set(wrt_ids)
    for node in tape.nodes:
        if any(t.tid in need for t in node.inputs):
            need.add(node.out_id)
    return need


def backward(
    loss: Tensor,
    tape: Tape,
    wrt: Iterable[Tensor] | None = None,
    create_graph: bool = False,
) -> GradStore:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Args:
        loss: scalar tensor, shape (1, 1, 1, 1).
        tape: the tape the loss was recorded on.
        wrt: optional tensors to restrict the sweep to; when given, only
            nodes on a path to one of them are visited.
        create_graph: record the VJP computations themselves on the active
            tape so the returned gradients are differentiable.

    Returns:
        GradStore mapping tensor id -> gradient Tensor.  Also stashed on
        ``tape.grads``.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(
            f"backward expects a scalar loss of shape (1, 1, 1, 1), got {loss.shape}"
        )
    from . import ops  # accumulation uses the add op; local import avoids a cycle

    need: set[int] | None = None
    if wrt is not None:
        need = _need_set(tape, {t.tid for t in wrt})

    store = GradStore()
    store[loss.tid] = Tensor(np.ones((1, 1, 1, 1), dtype=loss.dtype))

    # With create_graph the VJP computations are recorded on the same tape,
    # after the forward nodes; a later backward sweeps them first.
    ctx = recording(tape) if create_graph else no_grad()
    with ctx:
        for node in reversed(tape.nodes):
            g_out = store.get(node.out_id)
            if g_out is None:
                continue
            if need is not None and node.out_id not in need:
                continue
            want = tuple(
                t.requires_grad and (need is None or t.tid in need)
                for t in node.inputs
            )
            if not any(want):
                continue
            grads = node.vjp(g_out, want)
            for t, w, g in zip(node.inputs, want, grads):
                if not w or g is None:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(
                        f"vjp of {node.op} produced shape {g.shape} for input of shape {t.shape}"
                    )
                prev = store.get(t.tid)
                store[t.tid] = g if prev is None else ops.add(prev, g)
    tape.grads = store
    return store
