"""Dense float64 tensors with tape-based reverse-mode autodiff.

numpy supplies storage and arithmetic; differentiation lives here. Ops execute
eagerly and, when a tape is active and some input requires grad, append a node
holding the backward closure. The reverse sweep visits nodes in fixed reverse
recording order and accumulates contributions in encounter order, so replaying
the same tape twice is bit-exact. First-order only: backward closures never
record onto a tape (hypergradients are obtained elsewhere by finite
differences).

Scalars are tensors of size one (shape () or (1,)). Broadcasting is limited to
scalar-with-tensor in the binary elementwise ops; everything else demands exact
shapes and raises ShapeMismatchError otherwise. Row-major float64 throughout.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "GradMap", "ShapeMismatchError",
    "add", "sub", "mul", "scale", "matmul", "transpose", "relu", "sigmoid",
    "add_bias", "softmax_rows", "layer_norm", "gather_rows", "slice_cols",
    "concat_rows", "concat_cols", "tile_rows", "reshape",
    "cross_entropy_logits", "backward", "grad_check",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; carries both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    Leaf tensors (parameters, inputs) have tape_node None; op outputs recorded
    on a tape point at their node. requires_grad on an output means some
    ancestor is a requires_grad leaf.
    """

    __slots__ = ("data", "requires_grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.tape_node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    # operator sugar; semantics match the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return scale(sub(self, other), -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return _reduce("sum", self, axis)

    def mean(self, axis: int | None = None):
        return _reduce("mean", self, axis)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Append-only op recording; one thread at a time, nestable as a stack."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = self._prev
        self._prev = None
        return False

    def backward(self, loss: Tensor, params=None) -> "GradMap":
        return backward(loss, params=params, tape=self)


class GradMap:
    """Gradients keyed by parameter identity; absent parameters read as zeros."""

    def __init__(self):
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def set(self, param: Tensor, grad: np.ndarray) -> None:
        self._entries[id(param)] = (param, grad)

    def __getitem__(self, param: Tensor) -> np.ndarray:
        hit = self._entries.get(id(param))
        if hit is None:
            return np.zeros_like(param.data)
        return hit[1]

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._entries

    def items(self):
        return [(t, g) for (t, g) in self._entries.values()]

    def params(self):
        return [t for (t, _) in self._entries.values()]

    def __add__(self, other: "GradMap") -> "GradMap":
        out = GradMap()
        for t, g in self.items():
            out.set(t, g + other[t])
        for t, g in other.items():
            if t not in self:
                out.set(t, g.copy())
        return out

    def scaled(self, s: float) -> "GradMap":
        out = GradMap()
        for t, g in self.items():
            out.set(t, g * s)
        return out

    def norm(self) -> float:
        total = 0.0
        for _, g in self.items():
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
        return float(np.sqrt(total))

    def dot(self, other: "GradMap") -> float:
        total = 0.0
        for t, g in self.items():
            total += float(np.dot(g.reshape(-1), other[t].reshape(-1)))
        return total


def _record(out: Tensor, inputs, bwd) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = _Node(out, tuple(t if isinstance(t, Tensor) else None for t in inputs), bwd)
    out.tape_node = (tape, node)
    tape.nodes.append(node)
    return out


def backward(loss: Tensor, params=None, tape: Tape | None = None) -> GradMap:
    """Reverse sweep from a scalar loss; returns a GradMap over reached leaves.

    Parameters listed in `params` always appear in the result, with explicit
    zeros when backward never reaches them. Accumulation order is fixed by the
    tape, so repeated sweeps are bit-identical.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        if loss.tape_node is None:
            raise ValueError("loss is not on any tape")
        tape = loss.tape_node[0]
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        contribs = node.bwd(g)
        for t, c in zip(node.inputs, contribs):
            if t is None or c is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + c
            else:
                grads[k] = c
                keep[k] = t
    out = GradMap()
    for k, t in keep.items():
        if t.tape_node is None and t.requires_grad:
            out.set(t, np.ascontiguousarray(grads[k].reshape(t.shape)))
    if params is not None:
        for p in params:
            if p not in out:
                out.set(p, np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    """Equal shapes, or one side a size-1 scalar (the only broadcast allowed)."""
    if a.shape == b.shape:
        return "equal"
    if b.size == 1:
        return "b_scalar"
    if a.size == 1:
        return "a_scalar"
    raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row to every row of an (m, n) matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("add_bias", a.shape, b.shape)
    out = Tensor(a.data + b.data[None, :])
    return _record(out, (a, b), lambda g: (g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0.0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("softmax_rows", a.shape)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        gy = g * y
        return (gy - y * gy.sum(axis=1, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if a.data.ndim != 2 or gamma.data.ndim != 1 or beta.data.ndim != 1:
        raise ShapeMismatchError("layer_norm", a.shape, gamma.shape, beta.shape)
    d = a.shape[1]
    if gamma.shape[0] != d or beta.shape[0] != d:
        raise ShapeMismatchError("layer_norm", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gamma.data[None, :] + beta.data[None, :])

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data[None, :]
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return _record(out, (a, gamma, beta), bwd)


def _reduce(kind: str, a: Tensor, axis: int | None) -> Tensor:
    a = _as_tensor(a)
    nd = a.data.ndim
    if axis is not None and not (-nd <= axis < nd):
        raise ValueError(f"{kind}: invalid axis {axis} for shape {a.shape}")
    if kind == "sum":
        out = Tensor(a.data.sum(axis=axis))
        w = 1.0
    else:
        out = Tensor(a.data.mean(axis=axis))
        w = 1.0 / (a.data.size if axis is None else a.shape[axis])

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * w, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) * w, a.shape).copy(),)

    return _record(out, (a,), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by integer index; duplicates accumulate in the backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    n = a.shape[0]
    for i in idx:
        if i < 0 or i >= n:
            raise IndexError(f"gather_rows: index {int(i)} out of range for {n} rows")
    out = Tensor(a.data[idx])

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("slice_cols", a.shape)
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def bwd(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        return (z,)

    return _record(out, (a,), bwd)


def _concat(axis: int, parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: empty part list")
    for p in parts:
        if p.data.ndim != parts[0].data.ndim:
            raise ShapeMismatchError("concat", *[q.shape for q in parts])
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))
        return tuple(np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) for i in range(len(parts)))

    return _record(out, tuple(parts), bwd)


def concat_rows(parts) -> Tensor:
    return _concat(0, parts)


def concat_cols(parts) -> Tensor:
    return _concat(1, parts)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repeat a (1, n) row `reps` times; backward sums the tiles."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeMismatchError("tile_rows", a.shape)
    if reps < 1:
        raise ValueError(f"tile_rows: reps must be >= 1, got {reps}")
    out = Tensor(np.repeat(a.data, reps, axis=0))
    return _record(out, (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class; stable via max subtraction."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError("cross_entropy_logits", logits.shape)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatchError("cross_entropy_logits", logits.shape, labels.shape)
    for i, lab in enumerate(labels):
        if lab < 0 or lab >= k:
            raise ValueError(f"cross_entropy_logits: label {int(lab)} out of range [0, {k}) at row {i}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(b), labels]
    out = Tensor(np.mean(lse - picked))

    def bwd(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        return (p * (float(np.asarray(g).reshape(-1)[0]) / b),)

    return _record(out, (logits,), bwd)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error of the tape gradient of f at x vs central differences.

    f maps x to a scalar Tensor and must be deterministic; x is restored
    bit-exactly. Per-coordinate relative error uses denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    with Tape() as tape:
        loss = f(x)
    analytic = tape.backward(loss, params=[x])[x]
    orig = x.data
    numeric = np.zeros(orig.size)
    for i in range(orig.size):
        hi = orig.copy()
        hi.flat[i] += eps
        x.data = hi
        up = f(x).item()
        lo = orig.copy()
        lo.flat[i] -= eps
        x.data = lo
        dn = f(x).item()
        numeric[i] = (up - dn) / (2.0 * eps)
    x.data = orig
    numeric = numeric.reshape(orig.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
