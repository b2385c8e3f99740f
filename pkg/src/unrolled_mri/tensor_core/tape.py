"""Recorded computation graph with reverse-mode gradients and activation accounting.

Values are dense numpy arrays: complex128 for images and k-space, float64 for
CNN feature maps and scalars. A :class:`Tape` records primitive applications
as nodes; :meth:`Tape.backward` replays them in reverse and accumulates a
gradient for every reachable :class:`Parameter`.

Gradient convention for complex arrays: the gradient of a real scalar loss L
with respect to a complex array z is stored as ``dL/dRe(z) + 1j*dL/dIm(z)``,
so a plain descent step on the (real, imag) pair decreases L. For real arrays
it is the ordinary elementwise derivative.

Activation accounting: every primitive declares the arrays its backward rule
retains (its save list, see :mod:`.ops`). ``live_activation_elements`` is the
total element count of all currently retained arrays plus the tape's baseline
(storage held outside the tape on its behalf, e.g. hybrid-inversion
checkpoints); ``peak_activation_elements`` is the running maximum. Backward
releases each node's saves as they are consumed, so after a full backward pass
the live count returns to the baseline. Transient workspaces (op outputs not
retained by anyone, gradient buffers) are deliberately not counted: the
counter models retained-for-backward memory only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_REAL = np.float64
_COMPLEX = np.complex128

_param_ids = itertools.count()


class Parameter:
    """Trainable array with an accumulated gradient and a unique id."""

    __slots__ = ("value", "grad", "name", "pid")

    def __init__(self, value: np.ndarray, name: str = ""):
        value = np.asarray(value)
        if value.dtype not in (_REAL, _COMPLEX):
            value = value.astype(_REAL)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.pid = next(_param_ids)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g.astype(self.value.dtype) if self.value.dtype != g.dtype else g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name or self.pid}, shape={self.value.shape})"


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``saves`` returns the arrays the backward rule retains; ``saved_count``
    must predict their total element count from shapes alone (the tape
    asserts agreement, and the analytic memory predictor relies on it).
    """

    name: str
    forward: Callable  # (datas, aux) -> ndarray
    backward: Callable  # (grad, saved, aux, in_shapes, in_dtypes) -> tuple
    infer: Callable  # (in_shapes, in_dtypes, aux) -> (shape, dtype)
    saves: Callable  # (datas, out, aux) -> list[ndarray]
    saved_count: Callable  # (in_shapes, aux) -> int


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(prim: Primitive) -> None:
    if prim.name in PRIMITIVES:
        raise ValueError(f"primitive {prim.name!r} already registered")
    PRIMITIVES[prim.name] = prim


# node kinds
_CONST, _PARAM, _CAPTURE, _OP, _CHECKPOINT = "const", "param", "capture", "op", "ckpt"


class _Node:
    __slots__ = (
        "kind",
        "prim",
        "inputs",
        "aux",
        "value",
        "saved",
        "saved_elements",
        "requires_grad",
        "sink",
        "captured_grad",
        "ckpt_fn",
        "in_requires",
    )

    def __init__(self, kind, value, *, prim=None, inputs=(), aux=None, saved=None,
                 saved_elements=0, requires_grad=False, sink=None, ckpt_fn=None,
                 in_requires=()):
        self.kind = kind
        self.prim = prim
        self.inputs = inputs
        self.aux = aux
        self.value = value
        self.saved = saved
        self.saved_elements = saved_elements
        self.requires_grad = requires_grad
        self.sink = sink
        self.captured_grad = None
        self.ckpt_fn = ckpt_fn
        self.in_requires = in_requires


class Tensor:
    """Immutable array value, optionally attached to a tape node.

    Detached tensors (``idx is None``) flow through the same code paths but
    record nothing; they appear when a tape has recording disabled.
    """

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: Optional[int], data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def captured_grad(self) -> Optional[np.ndarray]:
        if self.idx is None:
            return None
        return self.tape._nodes[self.idx].captured_grad

    # light operator sugar; everything dispatches through Tape.record
    def __add__(self, other: "Tensor") -> "Tensor":
        return self.tape.record("add", (self, other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.tape.record("sub", (self, other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.tape.record("elementwise_mul", (self, other))
        return self.tape.record("scalar_mul", (self,), aux=other)

    def __rmul__(self, other):
        return self.tape.record("scalar_mul", (self,), aux=other)

    def __neg__(self) -> "Tensor":
        return self.tape.record("scalar_mul", (self,), aux=-1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, idx={self.idx})"


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == _REAL or arr.dtype == _COMPLEX:
        return arr
    if np.iscomplexobj(arr):
        return arr.astype(_COMPLEX)
    return arr.astype(_REAL)


class Tape:
    """Single-threaded record of a differentiable computation.

    One tape per training worker; tensors may be shared across tapes but a
    tape itself must not be. ``baseline_elements`` accounts for activation
    storage held outside the tape on its behalf (e.g. inversion checkpoints).
    """

    def __init__(self, recording: bool = True, baseline_elements: int = 0):
        self._nodes: list[_Node] = []
        self._recording = recording
        self._spent = False
        self._baseline = int(baseline_elements)
        self._live = self._baseline
        self._peak = self._baseline

    # -- accounting ----------------------------------------------------
    @property
    def live_activation_elements(self) -> int:
        return self._live

    @property
    def peak_activation_elements(self) -> int:
        return self._peak

    def _count_add(self, n: int) -> None:
        self._live += n
        if self._live > self._peak:
            self._peak = self._live

    def _release(self, node: _Node) -> None:
        if node.saved is not None:
            self._live -= node.saved_elements
            node.saved = None

    # -- leaf creation -------------------------------------------------
    def _leaf(self, kind: str, data: np.ndarray, sink=None, requires=False) -> Tensor:
        data = _as_array(data)
        if not self._recording:
            return Tensor(self, None, data)
        node = _Node(kind, data, requires_grad=requires, sink=sink)
        self._nodes.append(node)
        return Tensor(self, len(self._nodes) - 1, data)

    def constant(self, data) -> Tensor:
        """A leaf that never receives a gradient."""
        return self._leaf(_CONST, data)

    def parameter(self, param: Parameter) -> Tensor:
        """A leaf whose gradient accumulates into ``param.grad``."""
        return self._leaf(_PARAM, param.value, sink=param, requires=True)

    def capture(self, data) -> Tensor:
        """A leaf whose gradient is kept on the node (``Tensor.captured_grad``)."""
        return self._leaf(_CAPTURE, data, requires=True)

    # -- recording -----------------------------------------------------
    def lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            return value
        return self.constant(value)

    def record(self, op: str, inputs: Sequence, aux=None) -> Tensor:
        """Apply primitive ``op`` to ``inputs`` and append the result."""
        if self._spent:
            raise ContractError("tape already backpropagated; create a new one")
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ContractError(f"unknown primitive {op!r}") from None
        ins = [self.lift(v) for v in inputs]
        shapes = tuple(v.data.shape for v in ins)
        dtypes = tuple(v.data.dtype for v in ins)
        out_shape, out_dtype = prim.infer(shapes, dtypes, aux)
        datas = [v.data for v in ins]
        out = prim.forward(datas, aux)
        if out.shape != tuple(out_shape) or out.dtype != out_dtype:
            raise ContractError(
                f"{op}: forward produced {out.shape}/{out.dtype}, "
                f"inferred {out_shape}/{out_dtype}"
            )
        if not self._recording:
            return Tensor(self, None, out)
        saved = prim.saves(datas, out, aux)
        selem = sum(int(a.size) for a in saved)
        declared = prim.saved_count(shapes, aux)
        if selem != declared:
            raise ContractError(
                f"{op}: save schedule mismatch ({selem} saved, {declared} declared)"
            )
        requires = any(
            v.idx is not None and self._nodes[v.idx].requires_grad for v in ins
        )
        node = _Node(
            _OP,
            out,
            prim=prim,
            inputs=tuple(v.idx for v in ins),
            aux=aux,
            saved=saved,
            saved_elements=selem,
            requires_grad=requires,
            in_requires=tuple(
                v.idx is not None and self._nodes[v.idx].requires_grad for v in ins
            ),
        )
        self._nodes.append(node)
        self._count_add(selem)
        return Tensor(self, len(self._nodes) - 1, out)

    def checkpoint(self, fn: Callable, inputs: Sequence[Tensor]) -> Tensor:
        """Record ``fn(*inputs)`` while retaining only the input arrays.

        ``fn`` must be a pure function of its tensor arguments (parameters and
        constants may be closed over). The forward pass here runs unrecorded;
        backward re-runs ``fn`` with recording enabled, backpropagates through
        the re-recorded subgraph, and releases it.
        """
        ins = [self.lift(v) for v in inputs]
        datas = [v.data for v in ins]
        was = self._recording
        self._recording = False
        try:
            out = fn(*[Tensor(self, None, d) for d in datas])
        finally:
            self._recording = was
        if not isinstance(out, Tensor):
            raise ContractError("checkpointed function must return a single Tensor")
        if not was:
            return out
        saved = list(datas)
        selem = sum(int(a.size) for a in saved)
        in_requires = tuple(
            v.idx is not None and self._nodes[v.idx].requires_grad for v in ins
        )
        node = _Node(
            _CHECKPOINT,
            out.data,
            inputs=tuple(v.idx for v in ins),
            saved=saved,
            saved_elements=selem,
            # conservatively assume the segment touches parameters
            requires_grad=True,
            ckpt_fn=fn,
            in_requires=in_requires,
        )
        self._nodes.append(node)
        self._count_add(selem)
        return Tensor(self, len(self._nodes) - 1, out.data)

    # -- backward ------------------------------------------------------
    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Backpropagate from ``root`` and release all retained activations.

        With ``seed=None`` the root must be a real scalar (a loss); otherwise
        ``seed`` is the incoming gradient for ``root`` (vector-Jacobian mode,
        used by strategies that stitch tapes together).
        """
        if self._spent:
            raise ContractError("tape already backpropagated")
        if root.tape is not self or root.idx is None:
            raise ContractError("backward root is not recorded on this tape")
        if seed is None:
            if root.data.shape != () or np.iscomplexobj(root.data):
                raise ContractError("backward root must be a real scalar loss")
            seed_arr = np.asarray(1.0)
        else:
            seed_arr = np.asarray(seed)
            if seed_arr.shape != root.data.shape:
                raise ContractError("seed shape must match root shape")
        self._sweep(root.idx, 0, {root.idx: seed_arr})
        self._spent = True
        # saves of nodes recorded after the root are unreachable; drop them too
        for i in range(root.idx + 1, len(self._nodes)):
            self._release(self._nodes[i])
        if self._live != self._baseline:
            raise ContractError(
                f"activation accounting leak: live={self._live}, "
                f"baseline={self._baseline}"
            )

    def _sweep(self, hi: int, lo: int, grads: dict) -> None:
        """Reverse pass over nodes[lo..hi], consuming ``grads`` seeded by caller."""
        for i in range(hi, lo - 1, -1):
            node = self._nodes[i]
            g = grads.pop(i, None)
            if g is not None and node.requires_grad:
                if node.kind == _PARAM:
                    node.sink.accumulate_grad(g)
                elif node.kind == _CAPTURE:
                    node.captured_grad = (
                        g if node.captured_grad is None else node.captured_grad + g
                    )
                elif node.kind == _OP:
                    in_shapes = tuple(
                        self._nodes[j].value.shape for j in node.inputs
                    )
                    in_dtypes = tuple(
                        self._nodes[j].value.dtype for j in node.inputs
                    )
                    in_grads = node.prim.backward(
                        g, node.saved, node.aux, in_shapes, in_dtypes
                    )
                    self._scatter(node, in_grads, grads)
                elif node.kind == _CHECKPOINT:
                    in_grads = self._backward_checkpoint(node, g)
                    self._scatter(node, in_grads, grads)
            self._release(node)

    def _scatter(self, node: _Node, in_grads, grads: dict) -> None:
        for j, gin, req in zip(node.inputs, in_grads, node.in_requires):
            if gin is None or not req:
                continue
            if j in grads:
                grads[j] = grads[j] + gin
            else:
                grads[j] = gin

    def _backward_checkpoint(self, node: _Node, g: np.ndarray):
        start = len(self._nodes)
        leaves = []
        for data, req in zip(node.saved, node.in_requires):
            leaves.append(self.capture(data) if req else self.constant(data))
        out = node.ckpt_fn(*leaves)
        if out.idx is None or not np.array_equal(out.data, node.value):
            raise ContractError(
                "checkpointed function is not a pure function of its inputs"
            )
        self._sweep(out.idx, start, {out.idx: g})
        in_grads = [
            self._nodes[v.idx].captured_grad if req else None
            for v, req in zip(leaves, node.in_requires)
        ]
        del self._nodes[start:]
        return in_grads


class ShapeTensor:
    """Shape/dtype stand-in used by the analytic memory predictor."""

    __slots__ = ("tape", "shape", "dtype")

    def __init__(self, tape: "ShapeTape", shape: tuple, dtype):
        self.tape = tape
        self.shape = tuple(shape)
        self.dtype = np.dtype(dtype)

    @property
    def data(self):  # pragma: no cover - defensive
        raise ContractError("ShapeTensor carries no data")

    def __add__(self, other):
        return self.tape.record("add", (self, other))

    def __sub__(self, other):
        return self.tape.record("sub", (self, other))

    def __mul__(self, other):
        if isinstance(other, ShapeTensor):
            return self.tape.record("elementwise_mul", (self, other))
        return self.tape.record("scalar_mul", (self,), aux=other)

    def __rmul__(self, other):
        return self.tape.record("scalar_mul", (self,), aux=other)

    def __neg__(self):
        return self.tape.record("scalar_mul", (self,), aux=-1.0)


class ShapeTape:
    """Drop-in tape that runs no arithmetic, only the save schedule.

    Replaying forward-pass code on a ShapeTape yields the analytic activation
    count implied by each primitive's declared schedule; strategy-level peak
    predictions are built from these counts.
    """

    def __init__(self):
        self.saved_elements = 0

    def constant(self, data) -> ShapeTensor:
        arr = np.asarray(data)
        return ShapeTensor(self, arr.shape, _COMPLEX if np.iscomplexobj(arr) else _REAL)

    def parameter(self, param: Parameter) -> ShapeTensor:
        return ShapeTensor(self, param.value.shape, param.value.dtype)

    def capture(self, data) -> ShapeTensor:
        return self.constant(data)

    def lift(self, value):
        if isinstance(value, ShapeTensor):
            return value
        return self.constant(value)

    def record(self, op: str, inputs: Sequence, aux=None) -> ShapeTensor:
        prim = PRIMITIVES[op]
        ins = [self.lift(v) for v in inputs]
        shapes = tuple(v.shape for v in ins)
        dtypes = tuple(v.dtype for v in ins)
        out_shape, out_dtype = prim.infer(shapes, dtypes, aux)
        self.saved_elements += prim.saved_count(shapes, aux)
        return ShapeTensor(self, out_shape, out_dtype)
