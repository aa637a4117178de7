"""Holographic reduced representations: binding, unbinding and bundling.

Circular convolution runs through a self-contained FFT: iterative radix-2
for power-of-two lengths and Bluestein's chirp-z reduction for all others
(the default embedding width of 96 is not a power of two). The quadratic
direct sum is kept as a differentiable oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Rng, Tensor, add, concat, gaussian, getitem, layer_norm, mul, record, reshape

# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


_BASE = 16


def _bit_reverse(value: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (value & 1)
        value >>= 1
    return out


@lru_cache(maxsize=None)
def _radix2_plan(n: int, inverse: bool):
    base = min(n, _BASE)
    groups = n // base
    bits = groups.bit_length() - 1
    # block g holds the subsequence x[r + groups * m], r = bitrev(g)
    offsets = np.array([_bit_reverse(g, bits) for g in range(groups)])
    gather = offsets[:, None] + groups * np.arange(base)[None, :]
    sign = 1.0 if inverse else -1.0
    j = np.arange(base)
    dft = np.exp(sign * 2j * np.pi * np.outer(j, j) / base)
    twiddles = []
    size = base
    while size < n:
        twiddles.append(np.exp(sign * 1j * np.pi * np.arange(size) / size))
        size *= 2
    return gather, dft, twiddles


def _fft_radix2(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Decimation-in-time radix-2 FFT (unnormalised).

    The first log2(16) butterfly levels are folded into a dense 16-point
    DFT applied to every leaf block at once; the remaining levels are
    vectorised butterflies over all blocks.
    """
    n = a.shape[-1]
    lead = a.shape[:-1]
    gather, dft, twiddles = _radix2_plan(n, inverse)
    groups, size = gather.shape
    # one flat GEMM; a batched matmul over tiny blocks is far slower
    blocks = (a[..., gather].reshape(-1, size) @ dft).reshape(*lead, groups, size)
    for tw in twiddles:
        pairs = blocks.reshape(*lead, groups // 2, 2, size)
        even = pairs[..., 0, :]
        odd = pairs[..., 1, :] * tw
        merged = np.empty(lead + (groups // 2, 2 * size), dtype=np.complex128)
        np.add(even, odd, out=merged[..., :size])
        np.subtract(even, odd, out=merged[..., size:])
        blocks = merged
        groups //= 2
        size *= 2
    return blocks.reshape(*lead, n)


@lru_cache(maxsize=None)
def _bluestein_plan(n: int):
    m = 1
    while m < 2 * n - 1:
        m *= 2
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase accurate for large k
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    return m, chirp, _fft_radix2(b, inverse=False)


def _fft_bluestein(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    m, chirp, b_hat = _bluestein_plan(n)
    padded = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    padded[..., :n] = a * chirp
    conv = _fft_radix2(_fft_radix2(padded, False) * b_hat, True) / m
    return conv[..., :n] * chirp


def fft(x: np.ndarray) -> np.ndarray:
    """Discrete Fourier transform along the last axis, any length >= 1."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if _is_pow2(n):
        return _fft_radix2(a, inverse=False)
    return _fft_bluestein(a)


def ifft(x: np.ndarray) -> np.ndarray:
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    return np.conj(fft(np.conj(a))) / n


@lru_cache(maxsize=None)
def _half_twiddle(n: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n // 2) / n)


def real_fft(x: np.ndarray) -> np.ndarray:
    """Full spectrum of a real signal, computed with one half-length
    complex transform when the length is even."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n % 2:
        return fft(x)
    h = n // 2
    z = fft(x[..., 0::2] + 1j * x[..., 1::2])
    z_mirror = np.conj(z[..., -np.arange(h) % h])
    even = 0.5 * (z + z_mirror)
    odd = -0.5j * (z - z_mirror) * _half_twiddle(n)
    return np.concatenate([even + odd, even - odd], axis=-1)


def real_ifft(spectrum: np.ndarray) -> np.ndarray:
    """Inverse transform of a Hermitian spectrum, returned as a real array."""
    n = spectrum.shape[-1]
    if n % 2:
        return np.real(ifft(spectrum))
    h = n // 2
    lo, hi = spectrum[..., :h], spectrum[..., h:]
    z = ifft(0.5 * (lo + hi) + 0.5j * (lo - hi) * np.conj(_half_twiddle(n)))
    out = np.empty(spectrum.shape, dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


# ---------------------------------------------------------------------------
# circular convolution and correlation
# ---------------------------------------------------------------------------

def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra))) if extra else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _check_pair(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape[-1:] != y.shape[-1:]:
        raise DimensionError(f"{op}: vector lengths differ ({x.shape} vs {y.shape})")
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} do not broadcast") from None


def _conv_spectral(xf: np.ndarray, yf: np.ndarray, dtype) -> np.ndarray:
    return real_ifft(xf * yf).astype(dtype, copy=False)


def circ_conv_fft(x: Tensor, y: Tensor) -> Tensor:
    """Circular convolution through the frequency domain.

    Leading axes broadcast numpy-style; the last axis is the vector axis.
    """
    _check_pair(x, y, "circ_conv")
    dtype = np.result_type(x.data, y.data)
    xf, yf = real_fft(x.data), real_fft(y.data)

    def backward(g):
        gf = real_fft(g)
        gx = _conv_spectral(gf, np.conj(yf), dtype)
        gy = _conv_spectral(gf, np.conj(xf), dtype)
        return _sum_to(gx, x.shape), _sum_to(gy, y.shape)

    return record("circ_conv", (x, y), _conv_spectral(xf, yf, dtype), backward)


circ_conv = circ_conv_fft


@lru_cache(maxsize=None)
def _shift_index(d: int) -> np.ndarray:
    j = np.arange(d)[:, None]
    k = np.arange(d)[None, :]
    return (j - k) % d


def _naive_conv_np(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    idx = _shift_index(d)
    # terms[j, k] = x_k * y_{(j-k) mod d}; pairing k with (j-k) mod d makes
    # the summation order symmetric, so x*y and y*x agree to the last bit
    terms = x[..., None, :] * y[..., idx]
    paired = terms + terms[..., np.arange(d)[:, None], idx]
    return 0.5 * paired.sum(axis=-1)


def _naive_corr_np(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    # out_k = sum_j g_j * y_{(j-k) mod d}
    idx = _shift_index(g.shape[-1])
    return np.einsum("...j,...jk->...k", g, y[..., idx])


def circ_conv_naive(x: Tensor, y: Tensor) -> Tensor:
    """Direct O(d^2) circular convolution, the reference for the FFT path."""
    _check_pair(x, y, "circ_conv_naive")
    xd, yd = np.broadcast_arrays(x.data, y.data)

    def backward(g):
        return _sum_to(_naive_corr_np(g, yd), x.shape), _sum_to(_naive_corr_np(g, xd), y.shape)

    return record("circ_conv_naive", (x, y), _naive_conv_np(xd, yd), backward)


def involution(y: np.ndarray) -> np.ndarray:
    """``y~_j = y_{(-j) mod d}``, the approximate inverse under binding."""
    return np.concatenate([y[..., :1], y[..., :0:-1]], axis=-1)


def circ_corr(x: Tensor, y: Tensor) -> Tensor:
    """Circular correlation ``x (*) y~``; unbinds ``y`` from ``x (*) y``."""
    _check_pair(x, y, "circ_corr")
    dtype = np.result_type(x.data, y.data)
    xf, yf = real_fft(x.data), real_fft(y.data)

    def backward(g):
        gf = real_fft(g)
        gx = _conv_spectral(gf, yf, dtype)
        # d/dy of sum_j g_j sum_k x_k y_{k-j} = corr(x, g)
        gy = _conv_spectral(xf, np.conj(gf), dtype)
        return _sum_to(gx, x.shape), _sum_to(gy, y.shape)

    return record("circ_corr", (x, y), _conv_spectral(xf, np.conj(yf), dtype), backward)


def cleanup(noisy: np.ndarray, codebook: np.ndarray) -> int:
    """Index of the codebook row with highest cosine similarity."""
    norms = np.linalg.norm(codebook, axis=1) * max(np.linalg.norm(noisy), 1e-12)
    return int(np.argmax(codebook @ noisy / np.maximum(norms, 1e-12)))


# ---------------------------------------------------------------------------
# item/attribute binding and window bundling
# ---------------------------------------------------------------------------

def bind_embed(item_emb: Tensor, attr_emb: Tensor, alpha: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """``LayerNorm(e_item + alpha * (e_item (*) e_attr))`` at every position."""
    if item_emb.shape != attr_emb.shape:
        raise DimensionError(f"bind_embed: item {item_emb.shape} vs attribute {attr_emb.shape}")
    bound = add(item_emb, mul(alpha, circ_conv(item_emb, attr_emb)))
    return layer_norm(bound, gain, bias)


@dataclass
class RoleVectors:
    roles: Tensor

    @property
    def k(self) -> int:
        return self.roles.shape[0]

    @classmethod
    def init(cls, k: int, d: int, rng: Rng) -> "RoleVectors":
        if k < 1:
            raise ConfigError(f"bundle window must be >= 1, got {k}")
        return cls(gaussian((k, d), 1.0 / math.sqrt(d), rng, name="roles"))


def tagged_sum(x: Tensor, roles: Tensor) -> Tensor:
    """``out[..., w, :] = sum_m roles[m] (*) x[..., w, m, :]``.

    Equivalent to ``tsum(circ_conv(x, roles), axis=-2)`` but sums in the
    frequency domain, so only one inverse transform per window is needed.
    """
    if x.shape[-2:] != roles.shape:
        raise DimensionError(f"tagged_sum: tokens {x.shape} do not match roles {roles.shape}")
    dtype = np.result_type(x.data, roles.data)
    xf, rf = real_fft(x.data), real_fft(roles.data)

    def backward(g):
        gf = real_fft(g)[..., None, :]
        gx = _conv_spectral(gf, np.conj(rf), dtype)
        gr = _conv_spectral(gf, np.conj(xf), dtype)
        return gx, _sum_to(gr, roles.shape)

    out = real_ifft((xf * rf).sum(axis=-2)).astype(dtype, copy=False)
    return record("tagged_sum", (x, roles), out, backward)


def num_windows(L: int, k: int) -> int:
    return -(-L // k)


def bundle_window(bound_tokens: Tensor, roles: RoleVectors | Tensor, k: int, gain: Tensor, bias: Tensor) -> Tensor:
    """Superimpose each run of ``k`` consecutive tokens, role-tagged by
    circular convolution, into one vector; windows start at position 0.

    Input ``[..., L, d]`` becomes ``[..., ceil(L / k), d]``. The last window
    sums only the tokens it actually has.
    """
    if k < 1:
        raise ConfigError(f"bundle window must be >= 1, got {k}")
    role_t = roles.roles if isinstance(roles, RoleVectors) else roles
    if role_t.shape[0] < k:
        raise ConfigError(f"{role_t.shape[0]} role vectors cannot tag windows of {k}")
    *lead, L, d = bound_tokens.shape
    if L < 1:
        raise DimensionError("bundle_window needs at least one token")
    windows = num_windows(L, k)
    x = bound_tokens
    short = windows * k - L
    if short:
        x = concat([x, Tensor(np.zeros((*lead, short, d), dtype=x.data.dtype))], axis=-2)
    x = reshape(x, (*lead, windows, k, d))
    return layer_norm(tagged_sum(x, getitem(role_t, slice(0, k))), gain, bias)
