"""Dense float64 tensors with tape-based reverse-mode differentiation.

Covers exactly the operator set the encoder and losses need: matmul,
elementwise arithmetic with scalar broadcast, concat, gathers, segment
reductions, pointwise nonlinearities, axis reductions, row normalization and
per-feature batch standardization. Every op checks its output for NaN/Inf.

Usage:

    with Tape() as tape:
        loss = ...ops on Tensors...
        grads = backward(tape, loss)
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {shapes}")


class NonFinite(AutodiffError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op} produced non-finite values")


class NotScalar(AutodiffError):
    pass


class DetachedLoss(AutodiffError):
    pass


class EmptySegment(AutodiffError):
    def __init__(self, segments):
        self.segments = list(segments)
        super().__init__(f"segments {self.segments} have no members")


class Tensor:
    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return mul(self, -1.0)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered op record; record order is the topological order."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _add(self, inputs, output, backward_fn):
        self.records.append(_Record(inputs, output, backward_fn))
        self._produced.add(id(output))
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, values: np.ndarray, inputs, backward_fn) -> Tensor:
    if not np.isfinite(values).all():
        raise NonFinite(op)
    requires = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape._add(tuple(inputs), out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse accumulation over the tape in reverse record order.

    Returns gradients keyed by leaf tensor; leaves the loss never reached get
    zeros. Also populates each leaf's .grad.
    """
    if loss.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise DetachedLoss("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        for tensor, g in zip(rec.inputs, rec.backward_fn(g_out)):
            if not (isinstance(tensor, Tensor) and tensor.requires_grad) or g is None:
                continue
            acc = grads.get(id(tensor))
            grads[id(tensor)] = g if acc is None else acc + g
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.values)
        leaf.grad = g
        out[leaf] = g
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (equal shapes, or scalar broadcast)
# ---------------------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g


def _check_binary(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _make("add", a.values + b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    return _make("sub", a.values - b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    return _make("mul", a.values * b.values, (a, b),
                 lambda g: (_reduce_to(g * b.values, a.shape),
                            _reduce_to(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("div", a, b)
    return _make("div", a.values / b.values, (a, b),
                 lambda g: (_reduce_to(g / b.values, a.shape),
                            _reduce_to(-g * a.values / (b.values * b.values), b.shape)))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _make("matmul", a.values @ b.values, (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    return _make("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors) -> Tensor:
    """Concatenate 2D tensors along the last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.values.ndim != 2 for t in tensors):
        raise ShapeMismatch("concat", *[t.shape for t in tensors])
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeMismatch("concat", *[t.shape for t in tensors])
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _make("concat", np.concatenate([t.values for t in tensors], axis=1),
                 tuple(tensors), backward_fn)


def gather_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("gather_rows", a.shape)
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        da = np.zeros_like(a.values)
        np.add.at(da, index, g)
        return (da,)

    return _make("gather_rows", a.values[index], (a,), backward_fn)


def embedding_lookup(table, index) -> Tensor:
    """Gather rows of a trainable table by integer index."""
    return gather_rows(table, index)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    a = _as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2 or len(segment_ids) != a.shape[0]:
        raise ShapeMismatch("segment_sum", a.shape, segment_ids.shape)
    out = np.zeros((num_segments, a.shape[1]))
    np.add.at(out, segment_ids, a.values)
    return _make("segment_sum", out, (a,), lambda g: (g[segment_ids],))


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    a = _as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2 or len(segment_ids) != a.shape[0]:
        raise ShapeMismatch("segment_mean", a.shape, segment_ids.shape)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    empty = np.nonzero(counts == 0)[0]
    if len(empty):
        raise EmptySegment(empty.tolist())
    total = np.zeros((num_segments, a.shape[1]))
    np.add.at(total, segment_ids, a.values)
    out = total / counts[:, None]
    return _make("segment_mean", out, (a,),
                 lambda g: ((g / counts[:, None])[segment_ids],))


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make("log", np.log(a.values), (a,), lambda g: (g / a.values,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    return _make("power", a.values ** p, (a,),
                 lambda g: (g * p * a.values ** (p - 1.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.values)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make("relu", np.maximum(a.values, 0.0), (a,),
                 lambda g: (g * (a.values > 0.0),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        if axis is None:
            return (np.full_like(a.values, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.sum(a.values, axis=axis), (a,), backward_fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]

    def backward_fn(g):
        if axis is None:
            return (np.full_like(a.values, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _make("mean", np.mean(a.values, axis=axis), (a,), backward_fn)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

_NORM_FLOOR = 1e-12


def l2_normalize_rows(a) -> Tensor:
    """Rows scaled to unit length; all-zero rows stay zero (with zero grad)."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("l2_normalize_rows", a.shape)
    norms = np.sqrt((a.values * a.values).sum(axis=1))
    safe = np.maximum(norms, _NORM_FLOOR)
    out = a.values / safe[:, None]
    live = (norms > _NORM_FLOOR)[:, None]

    def backward_fn(g):
        dots = (g * out).sum(axis=1, keepdims=True)
        return (np.where(live, (g - out * dots) / safe[:, None], 0.0),)

    return _make("l2_normalize_rows", out, (a,), backward_fn)


def batch_standardize(a) -> Tensor:
    """Per-column zero mean, unit variance (population), epsilon 1e-12."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("batch_standardize", a.shape)
    n_rows = a.shape[0]
    mu = a.values.mean(axis=0)
    centered = a.values - mu
    std = np.sqrt((centered * centered).mean(axis=0))
    s = std + _NORM_FLOOR
    out = centered / s
    live = std > 0.0
    std_safe = np.where(live, std, 1.0)

    def backward_fn(g):
        g_mean = g.mean(axis=0)
        proj = (g * centered).sum(axis=0)
        dx = (g - g_mean) / s - centered * (proj / (n_rows * std_safe * s * s))
        return (np.where(live[None, :], dx, 0.0),)

    return _make("batch_standardize", out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params, h: float = 1e-5, max_coords: int = 64,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    f maps the given parameter tensors to a scalar Tensor and must be
    deterministic. Tensors larger than max_coords are probed at a seeded
    random subset of coordinates.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
        grads = backward(tape, loss)
    analytic = [grads.get(p, np.zeros_like(p.values)) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        if p.size <= max_coords:
            coords = np.arange(p.size)
        else:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = f(params).item()
            flat[c] = orig - h
            down = f(params).item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            a = gflat[c]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
