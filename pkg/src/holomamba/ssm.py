"""Selective state-space blocks.

Each channel ``c`` of the ``d``-wide stream carries its own ``n``-dim state
driven by shared, input-dependent ``B_t`` and ``C_t``:

    h_t[c, s] = exp(-delta_t[c] * A[c, s]) * h_{t-1}[c, s] + delta_t[c] * B_t[s] * u_t[c]
    r_t[c]    = sum_s C_t[s] * h_t[c, s] + D[c] * u_t[c]

The training path (:func:`block_forward_scan`) runs the recurrence as one
fused tape operation over all timesteps; :func:`block_step` advances a
single timestep from a constant-size :class:`RecurrentState`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Rng,
    Tensor,
    add,
    causal_conv1d,
    gaussian,
    layer_norm,
    layer_norm_np,
    matmul,
    mul,
    record,
    silu,
    silu_np,
    softplus,
    softplus_np,
    split,
)

PARAM_NAMES = ("W_in", "conv_kernels", "conv_bias", "W_ssm", "delta_bias", "A_log", "D", "W_out", "norm_gain", "norm_bias")


@dataclass
class SsmBlockParams:
    W_in: Tensor          # [d, 2d] -> (x_hat, gate)
    conv_kernels: Tensor  # [w, d]
    conv_bias: Tensor     # [d]
    W_ssm: Tensor         # [d, d + 2n] -> (delta_pre, B, C)
    delta_bias: Tensor    # [d]
    A_log: Tensor         # [d, n]
    D: Tensor             # [d]
    W_out: Tensor         # [d, d]
    norm_gain: Tensor     # [d]
    norm_bias: Tensor     # [d]

    @property
    def d(self) -> int:
        return self.W_out.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_kernels.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def init(cls, d: int, d_state: int, conv_width: int, rng: Rng) -> "SsmBlockParams":
        if min(d, d_state, conv_width) < 1:
            raise ConfigError(f"block sizes must be positive (d={d}, d_state={d_state}, conv_width={conv_width})")
        # log-uniform step sizes in [1e-3, 1e-1], stored through softplus^-1
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), d).astype(np.float64))
        delta_bias = dt + np.log(-np.expm1(-dt))
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d, 1)))
        bound = 1.0 / math.sqrt(conv_width)
        return cls(
            W_in=gaussian((d, 2 * d), 0.02, rng, name="W_in"),
            conv_kernels=Tensor(rng.uniform(-bound, bound, (conv_width, d)), requires_grad=True),
            conv_bias=Tensor(np.zeros(d), requires_grad=True),
            W_ssm=gaussian((d, d + 2 * d_state), 0.02, rng, name="W_ssm"),
            delta_bias=Tensor(delta_bias, requires_grad=True),
            A_log=Tensor(a_log, requires_grad=True),
            D=Tensor(np.ones(d), requires_grad=True),
            W_out=gaussian((d, d), 1.0 / math.sqrt(d), rng, name="W_out"),
            norm_gain=Tensor(np.ones(d), requires_grad=True),
            norm_bias=Tensor(np.zeros(d), requires_grad=True),
        )

    @classmethod
    def zeros(cls, d: int, d_state: int, conv_width: int) -> "SsmBlockParams":
        """All-zero block (gain and bias included); acts as the identity."""
        z = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)  # noqa: E731
        return cls(z(d, 2 * d), z(conv_width, d), z(d), z(d, d + 2 * d_state), z(d),
                   z(d, d_state), z(d), z(d, d), z(d), z(d))


def scan_np(u, delta, A, B, C, D):
    """Forward recurrence on raw arrays ``[batch, L, *]``.

    Returns the readout ``[batch, L, d]`` and states ``[batch, L, d, n]``.
    """
    batch, L, d = u.shape
    n = A.shape[1]
    hs = np.empty((batch, L, d, n), dtype=u.dtype)
    r = np.empty((batch, L, d), dtype=u.dtype)
    h = np.zeros((batch, d, n), dtype=u.dtype)
    du = delta * u
    for t in range(L):
        h = np.exp(-delta[:, t, :, None] * A) * h + du[:, t, :, None] * B[:, t, None, :]
        hs[:, t] = h
        r[:, t] = np.einsum("bcs,bs->bc", h, C[:, t]) + D * u[:, t]
    return r, hs


def selective_scan(u: Tensor, delta: Tensor, A_log: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Run the diagonal selective recurrence over the time axis.

    Shapes: ``u, delta: [..., L, d]``, ``B, C: [..., L, n]``,
    ``A_log: [d, n]``, ``D: [d]``. Returns the readout ``r: [..., L, d]``.
    The state starts at zero. The full state trajectory is kept for the
    backward pass (``O(L d n)`` memory per sequence).
    """
    *lead, L, d = u.shape
    n = A_log.shape[1]
    if delta.shape != u.shape or B.shape[-1] != n or C.shape != B.shape or B.shape[:-1] != u.shape[:-1]:
        raise DimensionError(f"selective_scan: u {u.shape}, delta {delta.shape}, B {B.shape}, C {C.shape}, A {A_log.shape}")
    dtype = u.data.dtype
    ud = u.data.reshape(-1, L, d)
    dd = delta.data.reshape(-1, L, d)
    Bd = B.data.reshape(-1, L, n)
    Cd = C.data.reshape(-1, L, n)
    A = np.exp(A_log.data)
    Dd = D.data
    batch = ud.shape[0]
    du = dd * ud
    r, hs = scan_np(ud, dd, A, Bd, Cd, Dd)

    def backward(g):
        g = g.reshape(batch, L, d)
        g_u = g * Dd
        g_D = (g * ud).reshape(-1, d).sum(axis=0)
        g_delta = np.zeros_like(dd)
        g_B = np.zeros_like(Bd)
        g_C = np.einsum("blc,blcs->bls", g, hs)
        g_A = np.zeros_like(A)
        carry = np.zeros((batch, d, n), dtype=dtype)
        for t in range(L - 1, -1, -1):
            carry = carry + g[:, t, :, None] * Cd[:, t, None, :]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((batch, d, n), dtype=dtype)
            decay = np.exp(-dd[:, t, :, None] * A)
            through_decay = carry * h_prev * decay
            g_delta[:, t] -= np.einsum("bcs,cs->bc", through_decay, A)
            g_A -= np.einsum("bcs,bc->cs", through_decay, dd[:, t])
            g_x = np.einsum("bcs,bs->bc", carry, Bd[:, t])
            g_B[:, t] = np.einsum("bcs,bc->bs", carry, du[:, t])
            g_delta[:, t] += g_x * ud[:, t]
            g_u[:, t] += g_x * dd[:, t]
            carry = carry * decay
        shape_d = tuple(lead) + (L, d)
        shape_n = tuple(lead) + (L, n)
        return (g_u.reshape(shape_d), g_delta.reshape(shape_d), g_A * A,
                g_B.reshape(shape_n), g_C.reshape(shape_n), g_D)

    out = r.reshape(tuple(lead) + (L, d))
    return record("selective_scan", (u, delta, A_log, B, C, D), out, backward)


def block_forward_scan(X: Tensor, p: SsmBlockParams) -> Tensor:
    """Pre-norm selective block with residual, over a whole ``[..., L, d]`` sequence."""
    if X.shape[-1] != p.d:
        raise DimensionError(f"block input width {X.shape[-1]} does not match block width {p.d}")
    u, delta, B, C, gate = block_inputs(X, p)
    r = selective_scan(u, delta, p.A_log, B, C, p.D)
    return add(X, matmul(mul(silu(gate), r), p.W_out))


def block_inputs(X: Tensor, p: SsmBlockParams):
    """Input-conditioned quantities of a block: ``(u, delta, B, C, gate)``."""
    d, n = p.d, p.d_state
    normed = layer_norm(X, p.norm_gain, p.norm_bias)
    x_hat, gate = split(matmul(normed, p.W_in), [d, d])
    u = causal_conv1d(x_hat, p.conv_kernels, p.conv_bias)
    delta_pre, B, C = split(matmul(u, p.W_ssm), [d, n, n])
    delta = softplus(add(delta_pre, p.delta_bias))
    return u, delta, B, C, gate


def encoder_forward(X: Tensor, blocks: list[SsmBlockParams]) -> Tensor:
    if not blocks:
        raise ConfigError("the encoder needs at least one block")
    for p in blocks:
        X = block_forward_scan(X, p)
    return X


# ---------------------------------------------------------------------------
# constant-memory recurrent inference
# ---------------------------------------------------------------------------

@dataclass
class RecurrentState:
    """Latent state and causal-convolution history of one block.

    ``ring`` holds the previous ``w - 1`` conv inputs, oldest first.
    """

    h: np.ndarray     # [..., d, n]
    ring: np.ndarray  # [..., w - 1, d]

    @classmethod
    def zeros(cls, p: SsmBlockParams, lead: tuple[int, ...] = (), dtype=None) -> "RecurrentState":
        dtype = dtype or p.W_in.data.dtype
        return cls(np.zeros(lead + (p.d, p.d_state), dtype=dtype),
                   np.zeros(lead + (p.conv_width - 1, p.d), dtype=dtype))

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.ring.nbytes


def block_step(x_t, state: RecurrentState, p: SsmBlockParams) -> tuple[np.ndarray, RecurrentState]:
    """Advance one timestep; same arithmetic as one column of the scan."""
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    d, n = p.d, p.d_state
    normed = layer_norm_np(x, p.norm_gain.data, p.norm_bias.data)
    xg = normed @ p.W_in.data
    x_hat, gate = xg[..., :d], xg[..., d:]
    window = np.concatenate([state.ring, x_hat[..., None, :]], axis=-2)
    u = (window * p.conv_kernels.data).sum(axis=-2) + p.conv_bias.data
    s = u @ p.W_ssm.data
    delta = softplus_np(s[..., :d] + p.delta_bias.data)
    B, C = s[..., d:d + n], s[..., d + n:]
    A = np.exp(p.A_log.data)
    h = np.exp(-delta[..., None] * A) * state.h + (delta * u)[..., None] * B[..., None, :]
    r = np.einsum("...cs,...s->...c", h, C) + p.D.data * u
    y = x + (silu_np(gate) * r) @ p.W_out.data
    return y, RecurrentState(h, window[..., 1:, :])


def block_scan_states(X: np.ndarray, p: SsmBlockParams) -> tuple[np.ndarray, RecurrentState]:
    """Step through ``X[..., L, d]``; returns outputs and the final state."""
    state = RecurrentState.zeros(p, X.shape[:-2], X.dtype)
    out = np.empty_like(X)
    for t in range(X.shape[-2]):
        out[..., t, :], state = block_step(X[..., t, :], state, p)
    return out, state
