"""Selective state-space sequence modeling over token sequences.

The scan follows the standard selective formulation: per channel d and
state n, with input-dependent step sizes,

    h_t = exp(delta_t * A[d,n]) * h_{t-1} + delta_t * B_t[n] * u_t
    y_t = sum_n C_t[n] * h_t[n] + D_skip[d] * u_t

A = -exp(A_log) is diagonal and strictly negative, so exp(delta*A) < 1
for any positive step and the recurrence is a stable leaky integrator.
Masked (padded) positions are treated as delta = 0: they leave the hidden
state untouched and output exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import NumericError, ShapeError

N_STATE_DEFAULT = 16
CONV_K_DEFAULT = 4


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2, last axis) + eps) * weight."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"rms_norm: feature dim {xd.shape} vs weight {wd.shape}")
    D = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.float32(eps))
    y = xd * r * wd

    def bwd(g):
        gw = (g * xd * r).reshape(-1, D).sum(axis=0)
        s = (g * wd * xd).sum(axis=-1, keepdims=True)
        gx = r * (g * wd) - xd * (r ** 3) * (s / D)
        return gx, gw

    return engine.apply_op(y, (x, weight), bwd)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B_in: Tensor,
                   C_in: Tensor, D_skip: Tensor,
                   mask: np.ndarray | None = None) -> Tensor:
    """Parallel-over-batch, sequential-over-time selective scan.

    u, delta: [B, L, D']; A: [D', N]; B_in, C_in: [B, L, N];
    D_skip: [D']; mask: boolean [B, L] marking real tokens.
    """
    ud, dd = u.data, delta.data
    Ad, Bd, Cd, Dd = A.data, B_in.data, C_in.data, D_skip.data
    if ud.ndim != 3 or dd.shape != ud.shape:
        raise ShapeError(f"scan: u {ud.shape} vs delta {dd.shape}")
    Bsz, L, Dp = ud.shape
    N = Ad.shape[1]
    if Ad.shape != (Dp, N) or Bd.shape != (Bsz, L, N) or Cd.shape != (Bsz, L, N):
        raise ShapeError(f"scan: A {Ad.shape}, B {Bd.shape}, C {Cd.shape} "
                         f"inconsistent with u {ud.shape}")
    if mask is None:
        mf = np.ones((Bsz, L, 1), dtype=np.float32)
    else:
        mf = np.asarray(mask, dtype=np.float32).reshape(Bsz, L, 1)

    de = dd * mf                                        # effective step sizes
    dA = np.exp(de[..., None] * Ad)                     # [B,L,D',N]
    dBu = (de * ud)[..., None] * Bd[:, :, None, :]      # [B,L,D',N]
    hs = np.empty((Bsz, L, Dp, N), dtype=np.float32)
    h = np.zeros((Bsz, Dp, N), dtype=np.float32)
    for t in range(L):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
    y = (np.einsum("bldn,bln->bld", hs, Cd) + Dd * ud) * mf
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite values in selective scan output")

    def bwd(g):
        ge = g * mf
        gD = np.einsum("bld,bld->d", ge, ud)
        gu = ge * Dd
        gC = np.einsum("bld,bldn->bln", ge, hs)
        gdelta_eff = np.zeros_like(de)
        gB = np.empty_like(Bd)
        gA = np.zeros_like(Ad, dtype=np.float64)
        p = np.zeros((Bsz, Dp, N), dtype=np.float32)
        for t in range(L - 1, -1, -1):
            if t < L - 1:
                p = p * dA[:, t + 1]
            p = p + ge[:, t, :, None] * Cd[:, t, None, :]       # dL/dh_t
            hprev = hs[:, t - 1] if t > 0 else 0.0
            gdA_t = p * hprev
            pB = (p * Bd[:, t, None, :]).sum(axis=-1)           # [B,D']
            gdelta_eff[:, t] = (gdA_t * dA[:, t] * Ad).sum(axis=-1) + pB * ud[:, t]
            gu[:, t] += pB * de[:, t]
            gB[:, t] = (p * (de[:, t] * ud[:, t])[..., None]).sum(axis=1)
            gA += (gdA_t * dA[:, t] * de[:, t][..., None]).sum(axis=0)
        gdelta = gdelta_eff * mf
        return gu, gdelta, gA.astype(np.float32), gB, gC, gD

    return engine.apply_op(y, (u, delta, A, B_in, C_in, D_skip), bwd)


# --------------------------------------------------------------------------
# block parameters
# --------------------------------------------------------------------------

@dataclass
class MambaBlockParams:
    """One block's trainable tensors; D' = 2*D throughout."""

    in_proj: Tensor      # [D, 2*D']
    conv_kernel: Tensor  # [D', k]
    x_proj: Tensor       # [D', dt_rank + 2*N]
    dt_proj: Tensor      # [dt_rank, D']
    dt_bias: Tensor      # [D']
    A_log: Tensor        # [D', N]
    D_skip: Tensor       # [D']
    out_proj: Tensor     # [D', D]
    rms_weight: Tensor   # [D]

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.out_proj.shape[0]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: getattr(self, k) for k in (
            "in_proj", "conv_kernel", "x_proj", "dt_proj", "dt_bias",
            "A_log", "D_skip", "out_proj", "rms_weight")}


def init_mamba_block(d_model: int, rng: np.random.Generator,
                     n_state: int = N_STATE_DEFAULT,
                     conv_k: int = CONV_K_DEFAULT) -> MambaBlockParams:
    """Fan-in uniform projections, log-spaced state decays, small init steps."""
    d_inner = 2 * d_model
    dt_rank = int(np.ceil(d_model / 16))

    def uni(fan_in, shape):
        s = 1.0 / np.sqrt(fan_in)
        return engine.parameter(rng.uniform(-s, s, size=shape).astype(np.float32))

    in_proj = uni(d_model, (d_model, 2 * d_inner))
    conv_kernel = uni(conv_k, (d_inner, conv_k))
    x_proj = uni(d_inner, (d_inner, dt_rank + 2 * n_state))
    dt_proj = uni(dt_rank, (dt_rank, d_inner))
    # bias placed so softplus lands in [1e-3, 1e-1] at initialization
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
    dt_bias = engine.parameter(np.log(np.expm1(dt)).astype(np.float32))
    A_log = engine.parameter(
        np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float32)), (d_inner, 1)))
    D_skip = engine.parameter(np.ones(d_inner, dtype=np.float32))
    out_proj = uni(d_inner, (d_inner, d_model))
    rms_weight = engine.parameter(np.ones(d_model, dtype=np.float32))
    return MambaBlockParams(in_proj, conv_kernel, x_proj, dt_proj, dt_bias,
                            A_log, D_skip, out_proj, rms_weight)


# --------------------------------------------------------------------------
# block and stack
# --------------------------------------------------------------------------

def mamba_block(G: Tensor, params: MambaBlockParams,
                mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual block: gate * scan over the expanded stream.

    out = G + out_proj(scan(silu(conv(stream))) * silu(gate)) where
    (stream, gate) = split(in_proj(rms_norm(G))) and the scan's step
    sizes / input projections (delta, B, C) come from x_proj of the
    post-convolution stream.
    """
    if G.ndim != 3 or G.shape[2] != params.d_model:
        raise ShapeError(f"mamba_block: input {G.shape} vs d_model {params.d_model}")
    dp = params.d_inner
    n = params.n_state
    rk = params.dt_rank

    xn = rms_norm(G, params.rms_weight)
    xz = engine.matmul(xn, params.in_proj)             # [B,L,2*D']
    stream = xz[:, :, :dp]
    gate = xz[:, :, dp:]
    stream = engine.depthwise_conv1d_causal(stream, params.conv_kernel)
    stream = engine.silu(stream)

    proj = engine.matmul(stream, params.x_proj)        # [B,L,rk+2N]
    dt_in = proj[:, :, :rk]
    B_in = proj[:, :, rk:rk + n]
    C_in = proj[:, :, rk + n:]
    delta = engine.softplus(engine.add(engine.matmul(dt_in, params.dt_proj),
                                       params.dt_bias))
    A = engine.neg(engine.exp(params.A_log))
    y = selective_scan(stream, delta, A, B_in, C_in, params.D_skip, mask)
    y = engine.mul(y, engine.silu(gate))
    return engine.add(G, engine.matmul(y, params.out_proj))


def mamba_stack(G: Tensor, blocks: list[MambaBlockParams],
                mask: np.ndarray | None = None) -> Tensor:
    """Sequential composition of blocks; shape preserving."""
    out = G
    for p in blocks:
        out = mamba_block(out, p, mask)
    return out


def init_mamba_stack(d_model: int, n_blocks: int, rng: np.random.Generator,
                     n_state: int = N_STATE_DEFAULT,
                     conv_k: int = CONV_K_DEFAULT) -> list[MambaBlockParams]:
    return [init_mamba_block(d_model, rng, n_state=n_state, conv_k=conv_k)
            for _ in range(n_blocks)]
