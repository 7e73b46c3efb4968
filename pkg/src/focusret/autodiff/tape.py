"""Operation tape: the autodiff backbone and the activation-memory meter.

Every differentiable op executed while a :class:`Tape` is active, and whose
inputs include at least one tensor with ``requires_grad``, appends a
:class:`TapeEntry`. The entry holds the backward closure together with the
number of bytes of forward activations that closure keeps alive. Summing
those byte counts gives the exact saved-activation footprint of a training
step, which is the quantity the efficiency comparison is built on.

Saved-activation policy (bytes are 8 per float64 element, 8 per int64 index):

    ======================  ==============================================
    op                      retained for backward
    ======================  ==============================================
    matmul(a, b)            a if b needs grad; b if a needs grad
    mul(a, b)               a if b needs grad; b if a needs grad
    exp                     output
    log                     input
    gelu                    input
    softmax                 output
    layer_norm              input, per-row mean, per-row inverse std
    l2_normalize            output, per-row norm
    clamp_min               output
    embedding_lookup        integer indices
    add, sub, scalar_mul,   nothing
    sum, concat, slice,
    reshape, transpose
    ======================  ==============================================

Parameters themselves are never counted; they live in memory regardless of
the training strategy.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, TapeStateError

if TYPE_CHECKING:
    from .tensor import Tensor

PRIMITIVES = frozenset(
    {
        "matmul",
        "add",
        "sub",
        "mul",
        "scalar_mul",
        "exp",
        "log",
        "gelu",
        "softmax",
        "layer_norm",
        "concat",
        "slice",
        "reshape",
        "transpose",
        "embedding_lookup",
        "l2_normalize",
        "clamp_min",
        "sum",
    }
)

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "focusret_active_tape", default=None
)
_scope_stack: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar(
    "focusret_scope", default=()
)


def current_tape() -> Optional["Tape"]:
    return _active_tape.get()


def current_scope() -> str:
    return ".".join(_scope_stack.get())


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Tag tape entries pushed inside the block with a dotted module path."""
    token = _scope_stack.set(_scope_stack.get() + (name,))
    try:
        yield
    finally:
        _scope_stack.reset(token)


@dataclass
class TapeEntry:
    op_name: str
    input_ids: tuple[Optional[int], ...]
    output_id: int
    saved_bytes: int
    scope: str = ""
    backward_fn: Optional[Callable] = field(default=None, repr=False)


class Tape:
    """Ordered record of differentiable ops for one forward/backward pass.

    Use as a context manager; ops run outside any tape produce plain values
    with no gradient path (inference mode).
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.total_saved_bytes = 0
        self.consumed = False
        self._next_id = 0
        self._leaf_nodes: dict[int, int] = {}  # id(tensor) -> node id
        self._leaves: dict[int, "Tensor"] = {}  # node id -> tensor
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeStateError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _input_id(self, t: "Tensor") -> Optional[int]:
        if not t.requires_grad:
            return None
        if t.node_id is not None:
            if t._tape is not self:
                raise TapeStateError(
                    "tensor belongs to a different tape; detach() it first"
                )
            return t.node_id
        key = id(t)
        nid = self._leaf_nodes.get(key)
        if nid is None:
            nid = self._new_id()
            self._leaf_nodes[key] = nid
            self._leaves[nid] = t
        return nid

    def push(
        self,
        op_name: str,
        inputs: Sequence["Tensor"],
        output: "Tensor",
        backward_fn: Callable,
        saved_bytes: int,
    ) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        input_ids = tuple(self._input_id(t) for t in inputs)
        out_id = self._new_id()
        output.requires_grad = True
        output.node_id = out_id
        output._tape = self
        self.entries.append(
            TapeEntry(op_name, input_ids, out_id, int(saved_bytes), current_scope(), backward_fn)
        )
        self.total_saved_bytes += int(saved_bytes)

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeStateError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            in_grads = entry.backward_fn(g)
            for nid, gi in zip(entry.input_ids, in_grads):
                if nid is None or gi is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + gi
                else:
                    grads[nid] = gi
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.consumed = True
        for entry in self.entries:
            entry.backward_fn = None
        self._leaves.clear()
        self._leaf_nodes.clear()


def backward(loss: "Tensor", tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise ContractError("loss is not on any tape")
    tape.backward(loss)


@dataclass
class MemoryReport:
    total_saved_bytes: int
    entry_count: int
    by_op: dict[str, int]
    by_scope: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "total_saved_bytes": self.total_saved_bytes,
            "entry_count": self.entry_count,
            "by_op": dict(self.by_op),
            "by_scope": dict(self.by_scope),
        }


def tape_report(tape: Tape, scope_depth: int = 1) -> MemoryReport:
    """Summarise saved-activation bytes per op name and per scope prefix."""
    by_op: dict[str, int] = defaultdict(int)
    by_scope: dict[str, int] = defaultdict(int)
    for e in tape.entries:
        by_op[e.op_name] += e.saved_bytes
        key = ".".join(e.scope.split(".")[:scope_depth]) if e.scope else "<root>"
        by_scope[key] += e.saved_bytes
    return MemoryReport(
        total_saved_bytes=tape.total_saved_bytes,
        entry_count=len(tape.entries),
        by_op=dict(sorted(by_op.items())),
        by_scope=dict(sorted(by_scope.items())),
    )
