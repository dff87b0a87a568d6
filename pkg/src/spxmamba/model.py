"""Dual-branch segmentation model over patches and superpixel tokens.

The local branch is two stride-1 residual conv blocks feeding a 1x1
pixel-classification head. The global branch averages the local features
over each superpixel into a token sequence, refines the tokens with the
state-space stack, classifies each token, and remaps token logits back to
pixels. The final map is the elementwise sum of the two logit maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import engine, ssm
from .engine import Tensor
from .errors import DataError, ShapeError
from .ssm import MambaBlockParams, init_mamba_stack, mamba_stack
from .superpixel import SuperpixelMap

N_MAX_DEFAULT = 600   # token padding width: superpixel target 500 + headroom
D_HIDDEN_DEFAULT = 64


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class ResidualBlockParams:
    """Two 3x3 convs with per-channel affine + ReLU; 1x1 projection skip
    whenever the channel count changes."""

    conv1_w: Tensor
    conv1_b: Tensor
    aff1_scale: Tensor
    aff1_shift: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    aff2_scale: Tensor
    aff2_shift: Tensor
    proj_w: Tensor | None = None
    proj_b: Tensor | None = None

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k in ("conv1_w", "conv1_b", "aff1_scale", "aff1_shift",
                  "conv2_w", "conv2_b", "aff2_scale", "aff2_shift",
                  "proj_w", "proj_b"):
            t = getattr(self, k)
            if t is not None:
                out[prefix + k] = t
        return out


@dataclass
class GLocalParams:
    local_block1: ResidualBlockParams
    local_block2: ResidualBlockParams
    head_w: Tensor            # [K, D, 1, 1]
    head_b: Tensor            # [K]
    mamba: list[MambaBlockParams]
    global_w: Tensor          # [D, K]
    global_b: Tensor          # [K]

    @property
    def d_hidden(self) -> int:
        return self.head_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.local_block1.conv1_w.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.local_block1.named("local1."))
        out.update(self.local_block2.named("local2."))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        for i, blk in enumerate(self.mamba):
            out.update(blk.named(f"mamba.{i}."))
        out["global.w"] = self.global_w
        out["global.b"] = self.global_b
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named().items()}


def _init_res_block(c_in: int, c_out: int, rng: np.random.Generator) -> ResidualBlockParams:
    def conv(ci, co, k):
        s = 1.0 / np.sqrt(ci * k * k)
        w = engine.parameter(rng.uniform(-s, s, size=(co, ci, k, k)).astype(np.float32))
        b = engine.parameter(np.zeros(co, dtype=np.float32))
        return w, b

    c1w, c1b = conv(c_in, c_out, 3)
    c2w, c2b = conv(c_out, c_out, 3)
    ones = lambda: engine.parameter(np.ones(c_out, dtype=np.float32))
    zeros = lambda: engine.parameter(np.zeros(c_out, dtype=np.float32))
    pw = pb = None
    if c_in != c_out:
        pw, pb = conv(c_in, c_out, 1)
    return ResidualBlockParams(c1w, c1b, ones(), zeros(), c2w, c2b, ones(), zeros(),
                               pw, pb)


def init_glocal(c_in: int, d_hidden: int = D_HIDDEN_DEFAULT, n_classes: int = 13,
                n_blocks: int = 4, seed: int = 0,
                n_state: int = ssm.N_STATE_DEFAULT,
                conv_k: int = ssm.CONV_K_DEFAULT) -> GLocalParams:
    """Build freshly initialized parameters; creation order is fixed so a
    given seed always produces identical values."""
    rng = np.random.default_rng(seed)
    b1 = _init_res_block(c_in, d_hidden, rng)
    b2 = _init_res_block(d_hidden, d_hidden, rng)
    s = 1.0 / np.sqrt(d_hidden)
    head_w = engine.parameter(
        rng.uniform(-s, s, size=(n_classes, d_hidden, 1, 1)).astype(np.float32))
    head_b = engine.parameter(np.zeros(n_classes, dtype=np.float32))
    blocks = init_mamba_stack(d_hidden, n_blocks, rng, n_state=n_state, conv_k=conv_k)
    global_w = engine.parameter(
        rng.uniform(-s, s, size=(d_hidden, n_classes)).astype(np.float32))
    global_b = engine.parameter(np.zeros(n_classes, dtype=np.float32))
    return GLocalParams(b1, b2, head_w, head_b, blocks, global_w, global_b)


# --------------------------------------------------------------------------
# local branch
# --------------------------------------------------------------------------

def _affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = scale*x + shift on [B, C, H, W]."""
    c = scale.shape[0]
    s4 = engine.reshape(scale, (c, 1, 1))
    t4 = engine.reshape(shift, (c, 1, 1))
    return engine.add(engine.mul(x, s4), t4)


def _res_block(x: Tensor, p: ResidualBlockParams) -> Tensor:
    h = engine.conv2d(x, p.conv1_w, p.conv1_b)
    h = engine.relu(_affine(h, p.aff1_scale, p.aff1_shift))
    h = engine.conv2d(h, p.conv2_w, p.conv2_b)
    h = _affine(h, p.aff2_scale, p.aff2_shift)
    skip = x if p.proj_w is None else engine.conv2d(x, p.proj_w, p.proj_b)
    return engine.relu(engine.add(h, skip))


def local_branch(x: Tensor, params: GLocalParams) -> tuple[Tensor, Tensor]:
    """Full-resolution features and per-pixel logits: no down/upsampling."""
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"local_branch: input {x.shape} vs expected "
                         f"C={params.in_channels}")
    f = _res_block(x, params.local_block1)
    f = _res_block(f, params.local_block2)
    m_local = engine.conv2d(f, params.head_w, params.head_b)
    return f, m_local


# --------------------------------------------------------------------------
# superpixel token path
# --------------------------------------------------------------------------

def aggregate_superpixels(f_local: Tensor, sps: list[SuperpixelMap],
                          n_max: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Mean-pool features over each superpixel into padded token rows.

    Returns (G [B, N_max, D], token_mask [B, N_max]); rows past n_sp are
    zero with mask False. Backward spreads each token gradient uniformly,
    1/|P_i| per member pixel.
    """
    fd = f_local.data
    if fd.ndim != 4:
        raise ShapeError(f"aggregate: features must be [B,D,H,W], got {fd.shape}")
    B, D, H, W = fd.shape
    if len(sps) != B:
        raise DataError(f"aggregate: {len(sps)} superpixel maps for batch {B}")
    n_sps = [sp.n_sp for sp in sps]
    if n_max is None:
        n_max = max(n_sps)
    if max(n_sps) > n_max:
        raise DataError(f"n_sp {max(n_sps)} exceeds token capacity {n_max}")

    G = np.zeros((B, n_max, D), dtype=np.float32)
    mask = np.zeros((B, n_max), dtype=bool)
    for b, sp in enumerate(sps):
        if sp.ids.shape != (H, W):
            raise DataError(f"superpixel map {sp.ids.shape} vs features {(H, W)}")
        if (np.asarray(sp.sizes)[:sp.n_sp] == 0).any():
            raise DataError("empty superpixel in aggregation input")
        ids = sp.ids.ravel()
        flat = fd[b].reshape(D, H * W)
        sums = np.stack([np.bincount(ids, weights=flat[d], minlength=sp.n_sp)
                         for d in range(D)], axis=1)
        G[b, :sp.n_sp] = sums / np.asarray(sp.sizes)[:, None]
        mask[b, :sp.n_sp] = True

    def bwd(g):
        gf = np.empty_like(fd)
        for b, sp in enumerate(sps):
            ids = sp.ids.ravel()
            per_token = g[b, :sp.n_sp] / np.asarray(sp.sizes)[:, None]  # [n_sp, D]
            gf[b] = per_token[ids].T.reshape(D, H, W)
        return (gf,)

    return engine.apply_op(G, (f_local,), bwd), mask


def global_head(g_out: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-token affine D -> K (padded rows produce unread values)."""
    return engine.add(engine.matmul(g_out, w), b)


def remap(m_global: Tensor, sps: list[SuperpixelMap]) -> Tensor:
    """Broadcast token logits back to pixels: out[b,k,h,w] = M[b, S[h,w], k]."""
    md = m_global.data
    if md.ndim != 3:
        raise ShapeError(f"remap: token logits must be [B,N,K], got {md.shape}")
    B, n_max, K = md.shape
    if len(sps) != B:
        raise DataError(f"remap: {len(sps)} superpixel maps for batch {B}")
    H, W = sps[0].ids.shape
    out = np.empty((B, K, H, W), dtype=np.float32)
    for b, sp in enumerate(sps):
        if int(sp.ids.max()) >= n_max:
            raise DataError(f"superpixel id {int(sp.ids.max())} out of range "
                            f"for {n_max} tokens")
        ids = sp.ids.ravel()
        out[b] = md[b][ids].T.reshape(K, H, W)

    def bwd(g):
        gm = np.zeros_like(md)
        for b, sp in enumerate(sps):
            ids = sp.ids.ravel()
            flat = g[b].reshape(K, H * W)
            for k in range(K):
                gm[b, :sp.n_sp, k] += np.bincount(ids, weights=flat[k],
                                                  minlength=sp.n_sp)
        return (gm,)

    return engine.apply_op(out, (m_global,), bwd)


def vote(m_local: Tensor, m_global_up: Tensor) -> Tensor:
    """Additive fusion of raw logit maps."""
    if m_local.shape != m_global_up.shape:
        raise ShapeError(f"vote: {m_local.shape} vs {m_global_up.shape}")
    return engine.add(m_local, m_global_up)


# --------------------------------------------------------------------------
# full forward
# --------------------------------------------------------------------------

@dataclass
class GLocalOutputs:
    m_local: Tensor        # [B, K, H, W]
    m_global_up: Tensor    # [B, K, H, W]
    m_final: Tensor        # [B, K, H, W]
    g_tokens: Tensor       # [B, N_max, K] pre-remap token logits
    token_mask: np.ndarray  # [B, N_max]


def forward(x: Tensor, sps: list[SuperpixelMap], params: GLocalParams,
            n_max: int | None = None) -> GLocalOutputs:
    f_local, m_local = local_branch(x, params)
    G, token_mask = aggregate_superpixels(f_local, sps, n_max)
    g_out = mamba_stack(G, params.mamba, token_mask)
    g_tokens = global_head(g_out, params.global_w, params.global_b)
    m_global_up = remap(g_tokens, sps)
    m_final = vote(m_local, m_global_up)
    return GLocalOutputs(m_local=m_local, m_global_up=m_global_up,
                         m_final=m_final, g_tokens=g_tokens,
                         token_mask=token_mask)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """JSON manifest line (names, shapes, meta) + f32le blobs in name order."""
    names = sorted(arrays)
    manifest = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    with open(path, "wb") as f:
        f.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            manifest = json.loads(line.decode("utf-8"))
            tensors = manifest["tensors"]
        except (ValueError, KeyError) as e:
            raise DataError(f"bad checkpoint manifest in {path}: {e}") from None
        raw = f.read()
    arrays = {}
    off = 0
    for spec_ in tensors:
        shape = tuple(int(s) for s in spec_["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise DataError(f"truncated checkpoint {path}")
        arrays[spec_["name"]] = np.frombuffer(
            raw[off:off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return arrays, manifest.get("meta", {})


def load_into(params: GLocalParams, arrays: dict[str, np.ndarray]) -> None:
    named = params.named()
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, t in named.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise DataError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = np.ascontiguousarray(arr, dtype=np.float32)


def build_from_checkpoint(path: str) -> tuple[GLocalParams, dict]:
    arrays, meta = load_checkpoint(path)
    try:
        params = init_glocal(
            c_in=int(meta["c_in"]), d_hidden=int(meta["d_hidden"]),
            n_classes=int(meta["n_classes"]), n_blocks=int(meta["n_blocks"]),
            n_state=int(meta.get("n_state", ssm.N_STATE_DEFAULT)),
            conv_k=int(meta.get("conv_k", ssm.CONV_K_DEFAULT)), seed=0)
    except KeyError as e:
        raise DataError(f"checkpoint meta missing field {e}") from None
    load_into(params, arrays)
    return params, meta
