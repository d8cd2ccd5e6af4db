"""Dense float64 tensors with a tape-based reverse mode.

Values are plain ``numpy`` arrays (always float64, row-major). A :class:`Tensor`
wraps one value together with its gradient buffer. Operations executed while a
:class:`Tape` is active and that touch a tensor requiring gradients are
recorded; :func:`backward` replays the record in reverse.

Only what the retrieval model needs is here: matmul, elementwise arithmetic,
reductions, softmax / logsumexp, row gathering, rectifier, clamped sqrt,
batch normalisation and l2 normalisation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateNormError(ValueError):
    """Raised when a vector is too close to zero to be normalised."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """A value plus an optional gradient.

    Leaf tensors built with ``trainable=True`` are parameters; ``backward``
    writes ``d loss / d param`` into their ``grad``. Frozen parameters
    (``trainable=False``) never receive gradient and are not recorded.
    """

    __slots__ = ("value", "grad", "trainable", "name", "requires_grad")

    def __init__(self, value, trainable: bool = False, name: str = "", requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.trainable = trainable
        self.name = name
        self.requires_grad = trainable if requires_grad is None else requires_grad
        self.grad = np.zeros_like(self.value) if trainable else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, trainable={self.trainable})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations.

    Each record is ``(output, inputs, backward_fn)``. Use as a context manager;
    tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _check_finite(v: np.ndarray, op: str) -> None:
    if not np.isfinite(v).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; record it when a tape is active and any input needs grad."""
    _check_finite(value, op)
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        out.name = op
        tape.records.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate ``d loss / d x`` to every trainable leaf reachable on ``tape``.

    Gradients accumulate into ``param.grad``; call :func:`zero_grads` between
    steps. Intermediate buffers are released afterwards.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.trainable:
                t.grad += gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    if loss.trainable:
        loss.grad += 1.0


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes.

    Both operands need at least two dimensions.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", av @ bv, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def bwd(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _record("mul", av * bv, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def bwd(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None,
        )

    return _record("div", av / bv, (a, b), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sqrt_clamped(a) -> Tensor:
    """sqrt(max(a, 0)); gradient is zero where the argument is clamped."""
    a = as_tensor(a)
    pos = a.value > 0
    out = np.sqrt(np.where(pos, a.value, 0.0))

    def bwd(g):
        safe = np.where(pos, out, 1.0)
        return (np.where(pos, 0.5 * g / safe, 0.0),)

    return _record("sqrt_clamped", out, (a,), bwd)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _record("transpose", np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take_rows(a, idx) -> Tensor:
    """``a[idx]`` for an integer index array over the first axis (scatter-add backward)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (ga,)

    return _record("take_rows", a.value[idx], (a,), bwd)


def pick(a, idx) -> Tensor:
    """Select one entry per row: ``a[i, idx[i]]`` for a 2-d ``a``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape)
        ga[rows, idx] = g
        return (ga,)

    return _record("pick", a.value[rows, idx], (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), bwd)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    mx = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    p = e / s

    def bwd(g):
        return (np.expand_dims(g, axis) * p,)

    return _record("logsumexp", out, (a,), bwd)


def l2_normalize(a, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``.

    Raises :class:`DegenerateNormError` if any norm is at or below ``eps``;
    degenerate embeddings are not silently clamped.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    if (norm <= eps).any():
        raise DegenerateNormError(f"cannot normalise vector with norm <= {eps}")
    y = a.value / norm

    def bwd(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", y, (a,), bwd)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalisation over axis 0 of a 2-d input, followed by the affine map.

    In training mode the running statistics (plain arrays) are updated in
    place: ``running = momentum * running + (1 - momentum) * batch``; the
    running variance uses the unbiased batch estimate.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xv = x.value
    if xv.ndim != 2:
        raise ShapeError(f"batch_norm expects a 2-d batch, got {x.shape}")
    b = xv.shape[0]
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean) * inv

        def bwd_eval(g):
            return (
                g * gamma.value * inv if x.requires_grad else None,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta.requires_grad else None,
            )

        return _record("batch_norm", xhat * gamma.value + beta.value, (x, gamma, beta), bwd_eval)

    if b < 2:
        raise ShapeError("batch_norm in training mode needs batch size >= 2")
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var * b / (b - 1)

    def bwd(g):
        gxhat = g * gamma.value
        gx = inv / b * (b * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return (
            gx if x.requires_grad else None,
            (g * xhat).sum(axis=0) if gamma.requires_grad else None,
            g.sum(axis=0) if beta.requires_grad else None,
        )

    return _record("batch_norm", xhat * gamma.value + beta.value, (x, gamma, beta), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.value for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def where(mask, a, b) -> Tensor:
    """Elementwise select: ``a`` where ``mask`` is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _record("where", np.where(mask, a.value, b.value), (a, b), bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class LinearBN:
    """Fully connected layer followed by batch normalisation: ``BN(x W + bias)``."""

    def __init__(self, weight: Tensor, bias: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None):
        q = weight.shape[1]
        self.weight, self.bias, self.gamma, self.beta = weight, bias, gamma, beta
        self.running_mean = np.zeros(q) if running_mean is None else running_mean
        self.running_var = np.ones(q) if running_var is None else running_var

    def __call__(self, x, training: bool) -> Tensor:
        return linear_bn_forward(x, self, training)


def linear_bn_forward(x, layer: LinearBN, training: bool) -> Tensor:
    h = add(matmul(x, layer.weight), layer.bias)
    return batch_norm(h, layer.gamma, layer.beta, layer.running_mean, layer.running_var, training)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the whole array.

    The floor keeps gradients that are identically zero (e.g. a bias feeding
    batch norm) from dividing difference noise by nothing.
    """
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
