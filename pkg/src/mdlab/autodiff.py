"""Define-by-run reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a tensor that requires gradients appends a node to a
:class:`Tape`.  The tape is carried by the tensors themselves, so there is no
global state: two independent forward passes build two independent tapes.
:func:`backward` walks a tape in reverse insertion order and consumes it.

Broadcasting rules
------------------
* ``bias_add(x, b)``: ``b`` has shape ``[n]`` and ``x`` has shape ``[..., n]``;
  ``b`` is broadcast over all leading (batch) axes.
* ``add`` / ``mul``: operands must have the same rank; along each axis the
  extents are equal or one of them is 1 (that operand is repeated).  This is
  what lets a ``[B, 1]`` gate column weight a ``[B, H]`` expert output.
* Every other primitive requires exact shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_softmax

from .errors import ConfigError, ContractError, DimensionError, NumericalError

DEFAULT_EPS = 1e-12


class Tensor:
    """Dense float64 array that optionally participates in a tape.

    ``data`` is always a numpy array of dtype float64.  Leaf tensors created by
    the user carry ``requires_grad``; tensors produced by primitives carry the
    node that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError("tensor data must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.index

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One primitive application recorded on a tape."""

    index: int
    kind: str
    inputs: tuple[Tensor, ...]
    saved: tuple[np.ndarray, ...]
    attrs: dict
    output: np.ndarray


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Inputs always precede the node that consumes them because nodes are only
    appended after their inputs exist.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    merged_into: "Tape | None" = None

    def live(self) -> "Tape":
        """The tape this one was absorbed into (itself when never merged)."""
        tape = self
        while tape.merged_into is not None:
            tape = tape.merged_into
        return tape

    def absorb(self, other: "Tape") -> None:
        """Append ``other``'s nodes after ours; ``other`` then forwards here.

        Both node lists are already in dependency order and share no nodes,
        so concatenation keeps every input ahead of its consumer.
        """
        if other.consumed or self.consumed:
            raise ContractError("cannot combine values from a consumed tape")
        for node in other.nodes:
            node.index = len(self.nodes)
            self.nodes.append(node)
        other.nodes = []
        other.merged_into = self

    def record(self, kind: str, inputs: Sequence[Tensor], attrs: dict, out: np.ndarray) -> Node:
        if self.consumed:
            raise ContractError("tape was already consumed by backward()")
        node = Node(len(self.nodes), kind, tuple(inputs), tuple(t.data for t in inputs), attrs, out)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaf values and check bit-equality."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = []
            for inp, saved in zip(node.inputs, node.saved):
                if inp._node is not None and inp._tape.live() is self:
                    args.append(values[inp._node.index])
                else:
                    args.append(saved)
            out = PRIMITIVES[node.kind].forward(*args, **node.attrs)
            if out.shape != node.output.shape or not np.array_equal(out, node.output):
                raise ContractError(f"replay mismatch at node {node.index} ({node.kind})")
            values[node.index] = out
            outs.append(out)
        return outs


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, *inputs, **attrs) -> one gradient (or None) per input
    vjp: Callable[..., tuple]
    check: Callable[..., None]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward, vjp, check):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check)


# ---------------------------------------------------------------------------
# shape checks

def _check_same_rank_broadcast(a: np.ndarray, b: np.ndarray, **_):
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_matmul(a, b, **_):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs [m,k] x [k,n], got {a.shape} and {b.shape}")


def _check_bias(x, b, **_):
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add needs x [..., n] and b [n], got {x.shape} and {b.shape}")


def _check_any(*_, **__):
    return None


def _check_2d(x, **_):
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d tensor, got shape {x.shape}")


def _check_concat(*arrays, axis):
    ref = arrays[0]
    for a in arrays[1:]:
        if a.ndim != ref.ndim or any(
            i != axis % ref.ndim and x != y for i, (x, y) in enumerate(zip(a.shape, ref.shape))
        ):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref.shape} and {a.shape}")


def _check_slice(x, *, start, stop, axis):
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")


def _check_xent(logits, *, labels, eps):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross-entropy needs logits [B,C] and labels [B], got {logits.shape} and {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")


def _check_bce(logits, *, labels, eps):
    flat = logits.shape[:1] if logits.ndim == 1 else logits.shape
    if not (logits.ndim == 1 or (logits.ndim == 2 and logits.shape[1] == 1)) or labels.shape != flat[:1]:
        raise DimensionError(f"binary cross-entropy needs logits [B] or [B,1] and labels [B], got {logits.shape} and {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("binary labels must be 0 or 1")


# ---------------------------------------------------------------------------
# primitive definitions

def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _xent_forward(logits, *, labels, eps):
    lp = log_softmax(logits, axis=1)[np.arange(len(labels)), labels]
    return np.array([-np.maximum(lp, np.log(eps)).mean()])


def _xent_vjp(g, out, logits, *, labels, eps):
    logp = log_softmax(logits, axis=1)
    rows = np.arange(len(labels))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad[logp[rows, labels] < np.log(eps)] = 0.0
    return (grad * (g[0] / len(labels)),)


def _bce_terms(z):
    # log(sigmoid(z)) and log(1 - sigmoid(z)) without cancellation
    return -np.logaddexp(0.0, -z), -np.logaddexp(0.0, z)


def _bce_forward(logits, *, labels, eps):
    z = logits.reshape(-1)
    lp, lq = _bce_terms(z)
    floor = np.log(eps)
    per = -(labels * np.maximum(lp, floor) + (1 - labels) * np.maximum(lq, floor))
    return np.array([per.mean()])


def _bce_vjp(g, out, logits, *, labels, eps):
    z = logits.reshape(-1)
    lp, lq = _bce_terms(z)
    p = expit(z)
    floor = np.log(eps)
    d = -(labels * (1.0 - p) * (lp >= floor) - (1 - labels) * p * (lq >= floor))
    return ((d * (g[0] / z.size)).reshape(logits.shape),)


def _slice_forward(x, *, start, stop, axis):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)].copy()


def _slice_vjp(g, out, x, *, start, stop, axis):
    full = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    full[tuple(idx)] = g
    return (full,)


def _concat_vjp(g, out, *arrays, axis):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _softmax_vjp(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


_register("matmul", lambda a, b: a @ b, lambda g, out, a, b: (g @ b.T, a.T @ g), _check_matmul)
_register(
    "bias_add",
    lambda x, b: x + b,
    lambda g, out, x, b: (g, g.reshape(-1, b.shape[0]).sum(axis=0)),
    _check_bias,
)
_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    _check_same_rank_broadcast,
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    _check_same_rank_broadcast,
)
_register("scale", lambda x, *, c: x * c, lambda g, out, x, *, c: (g * c,), _check_any)
_register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),), _check_any)
_register("sigmoid", lambda x: expit(x), lambda g, out, x: (g * out * (1.0 - out),), _check_any)
_register("softmax", _softmax, _softmax_vjp, _check_2d)
_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp, _check_concat)
_register("slice", _slice_forward, _slice_vjp, _check_slice)
_register("mean", lambda x: np.array([x.mean()]), lambda g, out, x: (np.full_like(x, g[0] / x.size),), _check_any)
_register("sum", lambda x: np.array([x.sum()]), lambda g, out, x: (np.full_like(x, g[0]),), _check_any)
_register("softmax_cross_entropy", _xent_forward, _xent_vjp, _check_xent)
_register("binary_cross_entropy", _bce_forward, _bce_vjp, _check_bce)
_register("grad_reverse", lambda x, *, lam: x.copy(), lambda g, out, x, *, lam: (g * -lam,), _check_any)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a registered primitive, recording a tape node if any input needs gradients."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    arrays = [t.data for t in inputs]
    prim.check(*arrays, **attrs)
    with np.errstate(over="ignore", invalid="ignore"):
        out = prim.forward(*arrays, **attrs)
    if not np.isfinite(out).all():
        raise NumericalError(f"{kind} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result.requires_grad = False
    result._node = None
    result._tape = None
    if any(t.requires_grad for t in inputs):
        tapes = {}
        for t in inputs:
            if t._tape is not None:
                live = t._tape.live()
                tapes.setdefault(id(live), live)
        found = list(tapes.values())
        tape = found[0] if found else Tape()
        for other in found[1:]:
            tape.absorb(other)
        result._node = tape.record(kind, inputs, attrs, out)
        result._tape = tape
        result.requires_grad = True
    return result


# ---------------------------------------------------------------------------
# public op wrappers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("bias_add", [x, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", [x], c=float(c))


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a 2-d tensor."""
    return apply_primitive("softmax", [x])


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), axis=axis)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    return apply_primitive("slice", [x], start=int(start), stop=int(stop), axis=axis)


def mean(x: Tensor) -> Tensor:
    return apply_primitive("mean", [x])


def sum_(x: Tensor) -> Tensor:
    return apply_primitive("sum", [x])


def softmax_cross_entropy(logits: Tensor, labels, eps: float = DEFAULT_EPS) -> Tensor:
    """Mean of ``-log max(softmax(logits)[y], eps)`` over the batch."""
    return apply_primitive(
        "softmax_cross_entropy", [logits], labels=np.asarray(labels, dtype=np.int64), eps=eps
    )


def binary_cross_entropy(logits: Tensor, labels, eps: float = DEFAULT_EPS) -> Tensor:
    """Mean binary cross-entropy on raw logits, probabilities clamped at ``eps``."""
    return apply_primitive(
        "binary_cross_entropy", [logits], labels=np.asarray(labels, dtype=np.float64), eps=eps
    )


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the gradient passing back through it by ``-lam``."""
    if lam < 0:
        raise ConfigError(f"gradient-reversal coefficient must be nonnegative, got {lam}")
    return apply_primitive("grad_reverse", [x], lam=float(lam))


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar ``loss``.

    Returns a map from leaf name to gradient array.  When ``params`` is given,
    the map holds exactly those parameters, with zeros for any that the loss
    does not reach.  Leaf ``grad`` fields are overwritten.  The tape is
    consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape.live() if loss._tape is not None else None
    if tape is None or loss._node is None:
        raise ContractError("loss is not on an active tape")
    if tape.consumed:
        raise ContractError("tape was already consumed by backward()")

    node_grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = node_grads.pop(node.index, None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        in_grads = prim.vjp(g, node.output, *node.saved, **node.attrs)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is not None and inp._tape.live() is tape:
                k = inp._node.index
                node_grads[k] = node_grads[k] + gi if k in node_grads else gi
            else:
                prev = leaf_grads.get(id(inp))
                leaf_grads[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
    tape.consumed = True

    for leaf, g in leaf_grads.values():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {leaf.name or 'unnamed leaf'}")
        leaf.grad = g

    if params is None:
        return {(t.name if t.name is not None else str(key)): g for key, (t, g) in leaf_grads.items()}
    items = params.items() if isinstance(params, Mapping) else ((p.name, p) for p in params)
    out = {}
    for name, p in items:
        hit = leaf_grads.get(id(p))
        out[name] = hit[1] if hit is not None else np.zeros_like(p.data)
    return out
