"""Dense tensors with tape-based reverse-mode differentiation.

Array storage is numpy. Every differentiable operation executed while a
:class:`Tape` is active appends one node holding a backward closure; running
:meth:`Tape.backward` walks the nodes in reverse and accumulates gradients
into the ``grad`` slot of leaf tensors. Outside a tape, operations run in
plain inference mode and record nothing.

Broadcasting is deliberately narrow: scalar-with-tensor and last-axis vector
with tensor. Anything else raises :class:`DimensionError`.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmbeddingIndexError, TrainingError

_DTYPES = {32: np.float32, 64: np.float64}
_precision = 32


def set_precision(bits: int) -> None:
    """Select 32-bit (training) or 64-bit (verification) arithmetic globally."""
    global _precision
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision = bits


def get_precision() -> int:
    return _precision


def get_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(bits: int):
    previous = _precision
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


# ---------------------------------------------------------------------------
# tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """An n-dimensional real array with an optional gradient slot.

    ``frozen_rows`` lists rows of a 2-D parameter that the optimizer must
    leave untouched (the padding row of an embedding table).
    """

    __slots__ = ("data", "requires_grad", "grad", "frozen_rows", "name", "_producer")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.frozen_rows: tuple[int, ...] = ()
        self.name = name
        self._producer = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("holomamba_tape", default=None)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; each worker thread should own its tape.
    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise TrainingError(f"loss is not finite: {loss.item()}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss._producer is None:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._producer is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf that contributed to ``loss``."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward called without a recording tape")
    tape.backward(loss)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as a tensor and register its backward rule.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype if out_data.dtype.kind == "f" else None)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn)
        out._producer = node
        tape.nodes.append(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# numpy kernels shared with the tape-free recurrent path
# ---------------------------------------------------------------------------

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) == 1 and sa[-1:] == sb:
        return
    if len(sa) == 1 and sb[-1:] == sa:
        return
    raise DimensionError(f"{op}: unsupported broadcast between shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return record("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    """Overflow-stable ``log(1 + exp(x))``."""
    x = a.data
    return record("softplus", (a,), softplus_np(x), lambda g: (g * sigmoid_np(x),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = sigmoid_np(x)
    return record("silu", (a,), x * s, lambda g: (g * s * (1 + x * (1 - s)),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as rows."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", (a, b), ad @ bd, backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return record("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        ga = np.zeros_like(a.data)
        if _is_basic_index(index):
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return record("getitem", (a,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last axis into consecutive pieces of the given widths."""
    if sum(sizes) != a.shape[-1]:
        raise DimensionError(f"split sizes {list(sizes)} do not add up to last axis of {a.shape}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(getitem(a, (Ellipsis, slice(start, start + size))))
        start += size
    return pieces


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return record("sum", (a,), np.asarray(a.data.sum(), dtype=a.data.dtype),
                      lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum", (a,), a.data.sum(axis=axis), backward)


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record("mean", (a,), np.asarray(a.data.mean(), dtype=a.data.dtype),
                  lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


# ---------------------------------------------------------------------------
# neural-network operations
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return record("layer_norm", (x, gain, bias), xhat * gd + bias.data, backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into rows."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise DimensionError(f"embedding indices must be integers, got dtype {idx.dtype}")
    vocab, d = table.shape
    if idx.size:
        bad = idx[(idx < 0) | (idx >= vocab)]
        if bad.size:
            raise EmbeddingIndexError(f"embedding index {int(bad.flat[0])} out of range for table with {vocab} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, d))
        return (gt,)

    return record("embedding", (table,), table.data[idx], backward)


def causal_conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over the second-to-last (time) axis.

    ``kernels[-1]`` weights the current step and ``kernels[0]`` the step
    ``w - 1`` positions back; the sequence is left-padded with zeros.
    """
    w, d = kernels.shape
    if x.shape[-1] != d or bias.shape != (d,):
        raise DimensionError(f"causal_conv1d: kernels {kernels.shape} / bias {bias.shape} vs input {x.shape}")
    if w < 1:
        raise DimensionError("causal_conv1d: kernel width must be >= 1")
    L = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (w - 1, 0)
    xp = np.pad(x.data, pad)
    kd = kernels.data
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(w):
        out += xp[..., j:j + L, :] * kd[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(w):
            gxp[..., j:j + L, :] += g * kd[j]
            gk[j] = (g * xp[..., j:j + L, :]).reshape(-1, d).sum(axis=0)
        return gxp[..., w - 1:, :], gk, g.reshape(-1, d).sum(axis=0)

    return record("causal_conv1d", (x, kernels, bias), out, backward)


def cross_entropy_masked(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over positions whose target is non-zero.

    Column 0 (padding) is excluded from the softmax normaliser.
    """
    tgt = np.asarray(targets)
    if logits.shape[:-1] != tgt.shape:
        raise DimensionError(f"cross_entropy_masked: logits {logits.shape} vs targets {tgt.shape}")
    mask = tgt != 0
    count = int(mask.sum())
    if count == 0:
        raise ContractError("every target is padding; the masked loss is undefined")
    z = logits.data
    real = z[..., 1:]
    m = real.max(axis=-1, keepdims=True)
    shifted = np.exp(real - m)
    denom = shifted.sum(axis=-1, keepdims=True)
    lse = (m + np.log(denom))[..., 0]
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    nll = np.where(mask, lse - picked, 0.0)
    loss = np.asarray(nll.sum() / count, dtype=z.dtype)

    def backward(g):
        grad = np.zeros_like(z)
        grad[..., 1:] = shifted / denom
        np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (mask[..., None] * (g / count)).astype(z.dtype)
        return (grad,)

    return record("cross_entropy_masked", (logits,), loss, backward)


def dropout(x: Tensor, p: float, rng: "Rng") -> Tensor:
    if p <= 0:
        return x
    keep = (rng.uniform(0.0, 1.0, x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# randomness and verification
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic generator: numpy's PCG64 keyed by a 64-bit seed.

    PCG64 and numpy's ziggurat normal sampler are platform independent, so
    identical seeds give identical streams everywhere. Samples are drawn in
    64-bit and then cast, so the stream does not depend on precision.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def spawn(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(get_dtype())

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(get_dtype())

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, values, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(values, size=size, replace=replace)


def gaussian(shape, std: float, rng: Rng, requires_grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(rng.normal(shape, std), requires_grad=requires_grad, name=name)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check_tensors(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-6,
                       skip_frozen: bool = False) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients of ``loss_fn()`` with respect to every coordinate of ``tensors``.

    Tensors are perturbed in place and restored. With ``skip_frozen`` the
    rows listed in ``frozen_rows`` are left out, since the optimizer never
    moves them.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
        keep = np.ones(t.shape[:1], dtype=bool)
        if skip_frozen and t.frozen_rows:
            keep[list(t.frozen_rows)] = False
        worst = max(worst, _relative_error(analytic[keep], numeric[keep]))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6) -> float:
    """Check ``f``'s reverse-mode gradient at ``point`` against central
    differences; returns the worst relative error (denominator floored at
    1e-8). Meant to run under 64-bit precision.
    """
    x = Tensor(np.array(point, dtype=get_dtype(), copy=True), requires_grad=True)
    return grad_check_tensors(lambda: f(x), [x], h)
