"""State-space core: rms_norm, selective scan, block and stack behavior."""

import numpy as np
import pytest

from spxmamba import engine, ssm
from spxmamba.engine import Tensor
from spxmamba.errors import ShapeError

from helpers import assert_close, check_op_gradients


def test_rms_norm_ones():
    x = Tensor(np.ones((2, 3, 4), dtype=np.float32))
    w = Tensor(np.ones(4, dtype=np.float32))
    y = ssm.rms_norm(x, w).data
    expect = 1.0 / np.sqrt(1.0 + 1e-5)
    assert_close(y, np.full((2, 3, 4), expect), rtol=1e-6, floor=1e-7, label="rms-ones")


def test_rms_norm_scale_invariance():
    rng = np.random.default_rng(2)
    x = rng.uniform(3.0, 6.0, size=(5, 8)) * rng.choice([-1, 1], size=(5, 8))
    w = rng.uniform(0.5, 1.5, size=8)
    base = ssm.rms_norm(Tensor(x), Tensor(w)).data
    for c in (0.1, 0.5, 2.0, 10.0):
        scaled = ssm.rms_norm(Tensor(c * x), Tensor(w)).data
        assert np.max(np.abs(scaled - base)) < 1e-4, f"c={c}"


def test_rms_norm_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=4)
    got = ssm.rms_norm(Tensor(x), Tensor(w)).data
    for i in range(3):
        ms = sum(float(v) ** 2 for v in x[i]) / 4.0
        for j in range(4):
            ref = x[i, j] / np.sqrt(ms + 1e-5) * w[j]
            assert abs(float(got[i, j]) - ref) < 1e-5


def test_rms_norm_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4))
    w = rng.uniform(0.5, 1.5, size=4)
    check_op_gradients(ssm.rms_norm, [x, w], label="rms_norm")


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

def test_scan_memoryless_limit():
    # exp(delta*A) ~ 0 wipes the state each step: y = u * (1 + D_skip)
    rng = np.random.default_rng(7)
    u = rng.normal(size=(2, 5, 3)).astype(np.float32)
    y = ssm.selective_scan(
        Tensor(u), Tensor(np.ones((2, 5, 3))), Tensor(np.full((3, 1), -1e10)),
        Tensor(np.ones((2, 5, 1))), Tensor(np.ones((2, 5, 1))),
        Tensor(np.full(3, 0.5))).data
    assert_close(y, u * 1.5, rtol=1e-6, floor=1e-7, label="memoryless")


def test_scan_zero_delta_is_pure_skip():
    rng = np.random.default_rng(8)
    u = rng.normal(size=(1, 6, 4)).astype(np.float32)
    d_skip = rng.normal(size=4).astype(np.float32)
    y = ssm.selective_scan(
        Tensor(u), Tensor(np.zeros((1, 6, 4))), Tensor(np.full((4, 2), -1.0)),
        Tensor(rng.normal(size=(1, 6, 2))), Tensor(rng.normal(size=(1, 6, 2))),
        Tensor(d_skip)).data
    assert_close(y, u * d_skip, rtol=1e-6, floor=1e-7, label="zero-delta")


def _scan_oracle(u, delta, A, B, C, D_skip, mask=None):
    """Step-by-step scalar recurrence in float64."""
    Bsz, L, Dp = u.shape
    N = A.shape[1]
    y = np.zeros((Bsz, L, Dp))
    for b in range(Bsz):
        h = np.zeros((Dp, N))
        for t in range(L):
            live = 1.0 if mask is None else float(mask[b, t])
            for d in range(Dp):
                for n in range(N):
                    dt = delta[b, t, d] * live
                    h[d, n] = np.exp(dt * A[d, n]) * h[d, n] + dt * B[b, t, n] * u[b, t, d]
            for d in range(Dp):
                y[b, t, d] = (h[d] * C[b, t]).sum() + D_skip[d] * u[b, t, d]
            y[b, t] *= live
    return y


def test_scan_matches_scalar_recurrence():
    rng = np.random.default_rng(11)
    u = rng.normal(size=(2, 5, 3))
    delta = rng.uniform(0.05, 0.5, size=(2, 5, 3))
    A = -rng.uniform(0.3, 2.0, size=(3, 2))
    B = rng.normal(size=(2, 5, 2))
    C = rng.normal(size=(2, 5, 2))
    D_skip = rng.normal(size=3)
    got = ssm.selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B),
                             Tensor(C), Tensor(D_skip)).data
    ref = _scan_oracle(u, delta, A, B, C, D_skip)
    assert np.max(np.abs(got - ref)) < 1e-5


def test_scan_mask_freezes_state_and_zeroes_output():
    rng = np.random.default_rng(13)
    u = rng.normal(size=(1, 6, 2))
    delta = rng.uniform(0.1, 0.6, size=(1, 6, 2))
    A = -rng.uniform(0.5, 1.5, size=(2, 2))
    B = rng.normal(size=(1, 6, 2))
    C = rng.normal(size=(1, 6, 2))
    D_skip = rng.normal(size=2)
    mask = np.array([[True, True, False, True, True, False]])
    got = ssm.selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B),
                             Tensor(C), Tensor(D_skip), mask).data
    ref = _scan_oracle(u, delta, A, B, C, D_skip, mask)
    assert np.max(np.abs(got - ref)) < 1e-5
    assert np.all(got[0, 2] == 0.0) and np.all(got[0, 5] == 0.0)
    # the two real segments see the same state as if the gap never existed
    packed = ssm.selective_scan(
        Tensor(u[:, [0, 1, 3, 4]]), Tensor(delta[:, [0, 1, 3, 4]]), Tensor(A),
        Tensor(B[:, [0, 1, 3, 4]]), Tensor(C[:, [0, 1, 3, 4]]),
        Tensor(D_skip)).data
    assert_close(got[0, [0, 1, 3, 4]], packed[0], rtol=1e-5, floor=1e-6,
                 label="mask-freeze")


def test_scan_gradients():
    rng = np.random.default_rng(17)
    u = rng.normal(size=(1, 4, 2)) * 0.8
    delta = rng.uniform(0.1, 0.5, size=(1, 4, 2))
    A = -rng.uniform(0.5, 1.5, size=(2, 2))
    B = rng.normal(size=(1, 4, 2)) * 0.8
    C = rng.normal(size=(1, 4, 2)) * 0.8
    D_skip = rng.normal(size=2) * 0.5
    check_op_gradients(ssm.selective_scan, [u, delta, A, B, C, D_skip],
                       label="scan")
    mask = np.array([[True, True, True, False]])
    check_op_gradients(
        lambda *ts: ssm.selective_scan(*ts, mask=mask),
        [u, delta, A, B, C, D_skip], label="scan-masked")


def test_scan_stability_bounded_state():
    # negative A keeps the leaky integrator bounded over long sequences
    rng = np.random.default_rng(19)
    L = 500
    u = rng.uniform(-1, 1, size=(1, L, 2))
    delta = rng.uniform(0.05, 1.0, size=(1, L, 2))
    A = -np.exp(np.tile(np.log(np.arange(1, 3, dtype=float)), (2, 1)))
    B = rng.uniform(-1, 1, size=(1, L, 2))
    C = rng.uniform(-1, 1, size=(1, L, 2))
    y = ssm.selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B),
                           Tensor(C), Tensor(np.ones(2))).data
    assert np.all(np.isfinite(y))
    assert np.max(np.abs(y)) < 50.0


def test_scan_shape_errors():
    with pytest.raises(ShapeError):
        ssm.selective_scan(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((1, 4, 3))),
                           Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 4, 2))),
                           Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# block and stack
# ---------------------------------------------------------------------------

def test_block_params_invariants():
    rng = np.random.default_rng(23)
    p = ssm.init_mamba_block(8, rng)
    assert p.d_inner == 16
    A = -np.exp(p.A_log.data)
    assert np.all(A < 0)
    dt0 = np.logaddexp(0, p.dt_bias.data)  # softplus of the bias alone
    assert np.all(dt0 >= 1e-3 - 1e-6) and np.all(dt0 <= 1e-1 + 1e-6)
    assert p.dt_rank == 1 and p.n_state == 16


def test_block_residual_identity_at_zero_out_proj():
    rng = np.random.default_rng(29)
    p = ssm.init_mamba_block(4, rng)
    p.out_proj.data[:] = 0.0
    G = rng.normal(size=(2, 5, 4)).astype(np.float32)
    out = ssm.mamba_block(Tensor(G), p).data
    assert np.array_equal(out, G)


def test_block_single_token_matches_manual_composition():
    rng = np.random.default_rng(31)
    D = 4
    p = ssm.init_mamba_block(D, rng)
    G = rng.normal(size=(1, 1, D)).astype(np.float32)
    got = ssm.mamba_block(Tensor(G), p).data

    # independent composition in float64
    g = G[0, 0].astype(np.float64)
    w = p.rms_weight.data.astype(np.float64)
    xn = g / np.sqrt(np.mean(g * g) + 1e-5) * w
    xz = xn @ p.in_proj.data.astype(np.float64)
    dp = p.d_inner
    stream, gate = xz[:dp], xz[dp:]
    stream = stream * p.conv_kernel.data[:, -1].astype(np.float64)  # one step
    stream = stream / (1.0 + np.exp(-stream))  # silu
    proj = stream @ p.x_proj.data.astype(np.float64)
    rk, n = p.dt_rank, p.n_state
    dt_in, B, C = proj[:rk], proj[rk:rk + n], proj[rk + n:]
    delta = np.logaddexp(0, dt_in @ p.dt_proj.data.astype(np.float64)
                         + p.dt_bias.data.astype(np.float64))
    A = -np.exp(p.A_log.data.astype(np.float64))
    h = delta[:, None] * B[None, :] * stream[:, None]  # first step from h=0
    h = np.exp(delta[:, None] * A) * 0.0 + h
    y = (h * C[None, :]).sum(axis=1) + p.D_skip.data * stream
    y = y * (gate * (1.0 / (1.0 + np.exp(-gate))))
    ref = g + y @ p.out_proj.data.astype(np.float64)
    assert np.max(np.abs(got[0, 0] - ref)) < 1e-5


def test_block_and_stack_causality():
    rng = np.random.default_rng(37)
    D, L = 4, 8
    blocks = ssm.init_mamba_stack(D, 4, rng)
    G = rng.normal(size=(1, L, D)).astype(np.float32)
    base = ssm.mamba_stack(Tensor(G), blocks).data
    for t in (2, 5, 7):
        G2 = G.copy()
        G2[0, t] += 0.5
        out = ssm.mamba_stack(Tensor(G2), blocks).data
        assert np.array_equal(out[0, :t], base[0, :t]), f"t={t} leaked backwards"
        assert not np.allclose(out[0, t], base[0, t]), f"t={t} had no effect"


def test_stack_identity_and_nondegeneracy():
    rng = np.random.default_rng(41)
    blocks = ssm.init_mamba_stack(4, 4, rng)
    G = rng.normal(size=(1, 6, 4)).astype(np.float32)
    single = ssm.mamba_block(Tensor(G), blocks[0]).data
    stacked = ssm.mamba_stack(Tensor(G), blocks).data
    assert not np.allclose(single, stacked)
    for b in blocks:
        b.out_proj.data[:] = 0.0
    assert np.array_equal(ssm.mamba_stack(Tensor(G), blocks).data, G)


def test_stack_gradient_wrt_input():
    rng = np.random.default_rng(43)
    blocks = ssm.init_mamba_stack(4, 4, rng)
    G = rng.normal(size=(1, 3, 4)) * 0.5
    check_op_gradients(lambda t: ssm.mamba_stack(t, blocks), [G],
                       rtol=1e-2, floor=1e-3, label="stack")


def test_padding_neutrality_is_bitwise():
    rng = np.random.default_rng(47)
    D, L = 4, 5
    blocks = ssm.init_mamba_stack(D, 4, rng)
    G = rng.normal(size=(1, L, D)).astype(np.float32)
    mask_real = np.ones((1, L), dtype=bool)
    base = ssm.mamba_stack(Tensor(G), blocks, mask_real).data

    pad = np.full((1, 3, D), 7.0, dtype=np.float32)
    G2 = np.concatenate([G, pad], axis=1)
    mask2 = np.concatenate([mask_real, np.zeros((1, 3), dtype=bool)], axis=1)
    out = ssm.mamba_stack(Tensor(G2), blocks, mask2).data
    assert out[0, :L].tobytes() == base[0].tobytes()
