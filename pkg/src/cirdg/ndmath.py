"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` while a :class:`Tape` is
active appends one node to that tape. ``Tape.backward`` walks the nodes in
reverse order, keeps intermediate adjoints in a scratch dict and accumulates
gradients only into leaf tensors, so replaying twice without ``zero_grad``
adds the gradients up.

    >>> x = Tensor([[1.0, -2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = relu(x).sum()
    >>> tape.backward(y)
    >>> x.grad.tolist()
    [[1.0, 0.0]]
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DegenerateBatchError",
    "ReconstructionDegenerateError",
    "LabelError",
    "NumericError",
    "Tensor",
    "Tape",
    "no_record",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "square",
    "transpose",
    "tsum",
    "tmean",
    "take_rows",
    "add_bias",
    "layer_norm",
    "batch_norm_1d",
    "softmax_rows",
    "log_softmax_rows",
    "row_normalize",
    "cosine_similarity_matrix",
    "cross_entropy",
    "gradcheck",
]

NEG_SENTINEL = -np.inf


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ReconstructionDegenerateError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"only 0-D, 1-D and 2-D tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape | None"] = []


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t._leaf and t.requires_grad:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def zero_grad(self) -> None:
        for t in self.leaves():
            t.grad = None

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if root.data.size != 1:
                raise DimensionError(f"backward needs a scalar root or an explicit seed, got shape {root.shape}")
            seed = np.ones_like(root.data)
        if root._leaf:
            if root.requires_grad:
                _accumulate(root, seed)
            return
        adjoint: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._leaf:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + gi
                    else:
                        adjoint[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


class no_record:
    """Suspend recording, e.g. for evaluation or finite differences."""

    def __enter__(self):
        _ACTIVE.append(None)

    def __exit__(self, *exc):
        _ACTIVE.pop()


def _current() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    else:
        out.requires_grad = False
        out._leaf = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------- normalisation


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    if x.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: params {scale.shape}/{shift.shape} vs input {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[1]

    def backward(g):
        gx = g * scale.data
        dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * scale.data + shift.data, (x, scale, shift), backward)


def batch_norm_1d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature batch normalisation.

    In ``train`` mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In ``eval`` mode the running statistics are used and nothing
    is mutated.
    """
    if x.ndim != 2 or scale.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm_1d: params {scale.shape} vs input {x.shape}")
    n = x.shape[0]
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        return _make(
            xhat * scale.data + shift.data,
            (x, scale, shift),
            lambda g: (g * scale.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
        )
    if mode != "train":
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    if n < 2:
        raise DegenerateBatchError(f"batch_norm_1d in train mode needs batch size >= 2, got {n}")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * n / (n - 1)

    def backward(g):
        gx = g * scale.data
        dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * scale.data + shift.data, (x, scale, shift), backward)


# ---------------------------------------------------------------- softmax family


def _masked_logits(x: Tensor, mask) -> np.ndarray:
    if x.ndim != 2:
        raise DimensionError(f"row softmax needs a 2-D input, got {x.shape}")
    if mask is None:
        return x.data
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {x.shape}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ReconstructionDegenerateError(f"rows {empty.tolist()} have every entry masked")
    return np.where(mask, x.data, NEG_SENTINEL)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax; ``mask`` is True where an entry may receive weight."""
    z = _masked_logits(x, mask)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax_rows(x: Tensor, mask=None) -> Tensor:
    z = _masked_logits(x, mask)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - y * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward)


def row_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"row_normalize needs a 2-D input, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps * eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _make(y, (x,), backward)


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine similarity: widths of {a.shape} and {b.shape} differ")
    return matmul(row_normalize(a, eps), transpose(row_normalize(b, eps)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy against integer labels or soft-target rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs B x C logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    logp = log_softmax_rows(logits)
    if labels.ndim == 1:
        if labels.shape[0] != b:
            raise DimensionError(f"{labels.shape[0]} labels for {b} logit rows")
        if not np.issubdtype(labels.dtype, np.integer):
            raise LabelError(f"hard labels must be integers, got dtype {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
        rows = np.arange(b)
        picked = _make(logp.data[rows, labels], (logp,), lambda g: (_scatter(g, rows, labels, logp.shape),))
        return -tmean(picked)
    if labels.shape != (b, c):
        raise DimensionError(f"soft targets {labels.shape} do not match logits {logits.shape}")
    if np.any(labels < 0) or not np.allclose(labels.sum(axis=1), 1.0, atol=1e-9):
        raise LabelError("soft-target rows must be non-negative and sum to 1")
    return -tmean(tsum(mul(logp, Tensor(labels)), axis=1))


def _scatter(g, rows, cols, shape):
    out = np.zeros(shape)
    out[rows, cols] = g
    return out


# ---------------------------------------------------------------- gradient check


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-3,
    skip: Callable[[Tensor, tuple], bool] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``,
    so gradients far below ``floor`` are compared in absolute terms.
    ``skip(tensor, index)`` can exclude elements sitting on a kink.
    """
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    try:
        with Tape() as tape:
            out = fn(*inputs)
        if out.data.size != 1:
            raise DimensionError(f"gradcheck needs a scalar function, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise NumericError("function value is not finite")
        tape.backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    finally:
        for t, g in zip(inputs, saved):
            t.grad = g

    def value() -> float:
        with no_record():
            v = float(fn(*inputs).data)
        if not np.isfinite(v):
            raise NumericError("non-finite value during finite differences")
        return v

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            if skip is not None and skip(t, np.unravel_index(k, t.shape)):
                continue
            orig = flat[k]
            flat[k] = orig + step
            up = value()
            flat[k] = orig - step
            down = value()
            flat[k] = orig
            num = (up - down) / (2.0 * step)
            ak = a.reshape(-1)[k]
            err = abs(ak - num) / max(abs(ak), abs(num), floor)
            worst = max(worst, err)
    return worst
