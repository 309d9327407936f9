"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records an append-only list of primitive applications; each
node stores its forward value, its parents, and a closure for the backward
rule.  Primitives are vectorized (whole arrays per node), so tape length
scales with the number of *operations*, not array elements, and memory stays
proportional to the forward intermediates.

Conventions fixed here and relied on by the spike-time code:

* ``clip01`` passes gradient 1 on the closed interval [0, 1] (interior-side
  value at the boundaries), 0 outside.
* ``relu`` and ``abs`` take derivative 0 at their kink.
* ``minimum`` and ``reduce_min`` route the adjoint to the first (lowest
  index) argument on ties.
* ``where`` masks are plain boolean arrays: branch selection is treated as
  locally constant, so data-dependent branches get the a.e. gradient.

Domain violations (log of a non-positive value, division by zero) raise
:class:`TapeDomainError` naming the offending node, rather than silently
producing NaNs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["Tape", "Tensor", "TapeDomainError", "forward_record", "backward", "grad_check"]


class TapeDomainError(ArithmeticError):
    """A primitive was evaluated outside its domain during the forward pass."""

    def __init__(self, message: str, node_id: int, op: str):
        super().__init__(f"node {node_id} ({op}): {message}")
        self.node_id = node_id
        self.op = op


class _Node:
    __slots__ = ("op", "parents", "value", "fwd", "bwd", "is_leaf", "name", "_grad")

    def __init__(self, op, parents, value, fwd, bwd, is_leaf=False, name=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.fwd = fwd
        self.bwd = bwd
        self.is_leaf = is_leaf
        self.name = name


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Recorded scalar-valued computation over array primitives."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, node: _Node) -> "Tensor":
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """A differentiable input (gradients accumulate here)."""
        v = np.asarray(value, dtype=float)
        return self._push(_Node("leaf", (), v, None, None, is_leaf=True, name=name))

    def constant(self, value, name: str | None = None) -> "Tensor":
        """A non-differentiable input; receives (and reports) zero gradient."""
        v = np.asarray(value, dtype=float)
        return self._push(_Node("const", (), v, None, None, is_leaf=False, name=name))

    def value(self, t: "Tensor") -> np.ndarray:
        return self.nodes[t.node_id].value

    def replay(self) -> None:
        """Recompute every node value in recording order (determinism check)."""
        for node in self.nodes:
            if node.fwd is not None:
                node.value = node.fwd(*[self.nodes[p].value for p in node.parents])

    def backward(self, seed: "Tensor") -> dict[int, np.ndarray]:
        """Adjoint accumulation from ``seed`` (must be scalar); returns all adjoints."""
        seed_node = self.nodes[seed.node_id]
        if np.asarray(seed_node.value).size != 1:
            raise ValueError("backward seed must be scalar")
        adj: dict[int, np.ndarray] = {
            seed.node_id: np.ones_like(np.asarray(seed_node.value, dtype=float))
        }
        for nid in range(seed.node_id, -1, -1):
            node = self.nodes[nid]
            if nid not in adj or node.bwd is None:
                continue
            grads = node.bwd(adj[nid])
            for pid, g in zip(node.parents, grads):
                if g is None:
                    continue
                if pid in adj:
                    adj[pid] = adj[pid] + g
                else:
                    adj[pid] = g
        return adj


class Tensor:
    """Handle to one tape node; supports numpy-flavoured arithmetic."""

    __slots__ = ("tape", "node_id")
    __array_priority__ = 100  # keep numpy from hijacking ndarray <op> Tensor

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def grad(self) -> np.ndarray | None:
        return getattr(self.tape.nodes[self.node_id], "_grad", None)

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> dict[int, np.ndarray]:
        """Seed this scalar with adjoint 1 and fill ``.grad`` on all nodes."""
        return backward(self.tape, self)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("cannot mix tensors from different tapes")
            return other
        return self.tape.constant(other)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        return _binary(self, other, "add", lambda a, b: a + b,
                       lambda g, a, b, y: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return _binary(self, other, "sub", lambda a, b: a - b,
                       lambda g, a, b, y: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        return _binary(self, other, "mul", lambda a, b: a * b,
                       lambda g, a, b, y: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)

        def fwd(a, b):
            if np.any(b == 0.0):
                raise TapeDomainError("division by zero", len(self.tape.nodes), "div")
            return a / b

        return _binary(self, other, "div", fwd,
                       lambda g, a, b, y: (_unbroadcast(g / b, a.shape),
                                           _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, "neg", lambda a: -a, lambda g, a, y: -g)

    def __matmul__(self, other):
        other = self._lift(other)

        def bwd(g, a, b, y):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _binary(self, other, "matmul", lambda a, b: a @ b, bwd)

    def __getitem__(self, key):
        def bwd(g, a, y):
            out = np.zeros_like(a)
            out[key] = g
            return (out,)

        return _unary(self, "getitem", lambda a: a[key], bwd)

    # -- elementwise maps ----------------------------------------------------

    def exp(self):
        return _unary(self, "exp", np.exp, lambda g, a, y: g * y)

    def expm1(self):
        return _unary(self, "expm1", np.expm1, lambda g, a, y: g * (y + 1.0))

    def log(self):
        def fwd(a):
            if np.any(a <= 0.0):
                raise TapeDomainError("log of non-positive value", len(self.tape.nodes), "log")
            return np.log(a)

        return _unary(self, "log", fwd, lambda g, a, y: g / a)

    def abs(self):
        return _unary(self, "abs", np.abs, lambda g, a, y: g * np.sign(a))

    def relu(self):
        return _unary(self, "relu", lambda a: np.maximum(a, 0.0),
                      lambda g, a, y: g * (a > 0.0))

    def clip01(self):
        return _unary(self, "clip01", lambda a: np.clip(a, 0.0, 1.0),
                      lambda g, a, y: g * ((a >= 0.0) & (a <= 1.0)))

    def minimum(self, other):
        other = self._lift(other)

        def bwd(g, a, b, y):
            take_a = a <= b
            return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

        return _binary(self, other, "minimum", np.minimum, bwd)

    def where(self, mask: np.ndarray, other) -> "Tensor":
        """``mask ? self : other`` with a constant boolean mask."""
        other = self._lift(other)
        mask = np.asarray(mask, dtype=bool)

        def bwd(g, a, b, y):
            return (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape))

        return _binary(self, other, "where", lambda a, b: np.where(mask, a, b), bwd)

    # -- reductions / structure ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bwd(g, a, y):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return _unary(self, "sum", lambda a: a.sum(axis=axis, keepdims=keepdims), bwd)

    def cumsum(self, axis=-1):
        def bwd(g, a, y):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return _unary(self, "cumsum", lambda a: np.cumsum(a, axis=axis), bwd)

    def flip(self, axis=-1):
        return _unary(self, "flip", lambda a: np.flip(a, axis),
                      lambda g, a, y: (np.flip(g, axis),))

    def reduce_min(self, axis=-1):
        """Minimum along ``axis``; adjoint routes only to the selected entry
        (first occurrence on ties)."""
        idx_box = {}

        def fwd(a):
            idx_box["idx"] = np.expand_dims(np.argmin(a, axis=axis), axis)
            return np.min(a, axis=axis)

        def bwd(g, a, y):
            out = np.zeros_like(a)
            np.put_along_axis(out, idx_box["idx"], np.expand_dims(g, axis), axis)
            return (out,)

        return _unary(self, "reduce_min", fwd, bwd)

    def take(self, indices: np.ndarray, axis: int):
        """np.take with constant integer indices; adjoint scatters back."""
        indices = np.asarray(indices)

        def bwd(g, a, y):
            out = np.zeros_like(a)
            np.add.at(out, (slice(None),) * (axis % a.ndim) + (indices,), g)
            return (out,)

        return _unary(self, "take", lambda a: np.take(a, indices, axis=axis), bwd)

    def take_along(self, indices: np.ndarray, axis: int = -1):
        """np.take_along_axis with constant indices (per-row gather)."""
        indices = np.asarray(indices)

        def bwd(g, a, y):
            out = np.zeros_like(a)
            ax = axis % a.ndim
            moved = np.moveaxis(out, ax, -1)
            idx = np.moveaxis(np.broadcast_to(indices, a.shape), ax, -1)
            gm = np.moveaxis(g, ax, -1)
            flat = moved.reshape(-1, moved.shape[-1])
            offs = np.arange(flat.shape[0])[:, None] * moved.shape[-1]
            np.add.at(flat.reshape(-1), (idx.reshape(flat.shape) + offs).reshape(-1), gm.reshape(-1))
            return (out,)

        return _unary(
            self, "take_along", lambda a: np.take_along_axis(a, np.broadcast_to(indices, a.shape), axis), bwd
        )

    def swap_axes(self, ax1: int, ax2: int):
        """Transpose two axes (adjoint swaps them back)."""
        return _unary(self, "swap_axes", lambda a: np.swapaxes(a, ax1, ax2),
                      lambda g, a, y: (np.swapaxes(g, ax1, ax2),))


def _unary(x: Tensor, op: str, fwd: Callable, bwd: Callable) -> Tensor:
    a = x.value
    y = fwd(a)

    def node_bwd(g):
        r = bwd(g, a, y)
        return r if isinstance(r, tuple) else (r,)

    return x.tape._push(_Node(op, (x.node_id,), y, fwd, node_bwd))


def _binary(x: Tensor, other: Tensor, op: str, fwd: Callable, bwd: Callable) -> Tensor:
    a, b = x.value, other.value
    y = fwd(a, b)
    return x.tape._push(
        _Node(op, (x.node_id, other.node_id), y, fwd, lambda g: bwd(g, a, b, y))
    )


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Stack same-shape tensors along a new axis (adjoint unstacks)."""
    tape = tensors[0].tape
    vals = [t.value for t in tensors]
    y = np.stack(vals, axis=axis)

    def fwd(*vs):
        return np.stack(vs, axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return tape._push(_Node("stack", tuple(t.node_id for t in tensors), y, fwd, bwd))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along an existing axis (adjoint splits)."""
    tape = tensors[0].tape
    sizes = [t.value.shape[axis] for t in tensors]

    def fwd(*vs):
        return np.concatenate(vs, axis=axis)

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    y = fwd(*[t.value for t in tensors])
    return tape._push(_Node("concat", tuple(t.node_id for t in tensors), y, fwd, bwd))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Functional form of :meth:`Tensor.where` (at least one Tensor operand)."""
    if isinstance(a, Tensor):
        return a.where(mask, b)
    if isinstance(b, Tensor):
        return b._lift(a).where(mask, b)
    raise TypeError("where() needs at least one Tensor operand")


# ---------------------------------------------------------------------------
# Spec-level entry points
# ---------------------------------------------------------------------------


def forward_record(program: Callable, inputs: Sequence[np.ndarray]):
    """Run ``program(*leaf_tensors)`` under a fresh tape.

    Returns ``(tape, outputs)`` where outputs mirror the program's return
    structure (Tensor or tuple of Tensors).
    """
    tape = Tape()
    leaves = [tape.leaf(np.asarray(x, dtype=float)) for x in inputs]
    outputs = program(*leaves)
    return tape, outputs


def backward(tape: Tape, seed: Tensor) -> dict[int, np.ndarray]:
    """Adjoints of every node w.r.t. the scalar ``seed``; also attaches
    ``.grad`` on the nodes so ``Tensor.grad`` works afterwards."""
    adj = tape.backward(seed)
    for nid, node in enumerate(tape.nodes):
        node._grad = adj.get(nid)
    return adj


def grad_check(program: Callable, inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between taped gradients and central differences.

    ``program`` must reduce to a scalar Tensor.  Callers are responsible for
    sampling inputs away from kinks (clip boundaries, hat kinks, min ties);
    central differences straddling a kink measure the wrong thing.

    Per coordinate the error is |a - n| / max(|a| + |n|, floor) with a floor
    of 1e-8 * max(1, |output|): genuinely-zero gradients are compared at the
    finite-difference noise scale instead of dividing noise by noise.
    """
    inputs = [np.array(x, dtype=float) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = program(*leaves)
    adj = tape.backward(out)
    floor = 1e-8 * max(1.0, abs(float(out.value)))
    worst = 0.0
    for leaf, x in zip(leaves, inputs):
        ana = adj.get(leaf.node_id)
        if ana is None:
            ana = np.zeros_like(x)
        ana = np.asarray(ana, dtype=float).reshape(-1)
        num = np.empty_like(ana)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_program(program, inputs)
            flat[i] = orig - h
            fm = _eval_program(program, inputs)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        scale = np.maximum(np.abs(ana) + np.abs(num), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / scale)))
    return worst


def _eval_program(program: Callable, inputs: Sequence[np.ndarray]) -> float:
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    return float(program(*leaves).value)
