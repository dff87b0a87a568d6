"""Multitask supervision and the fit loop for the dual-branch model.

The loss couples a pixel-level cross entropy on the local branch logits with a
token-level cross entropy on the superpixel logits:

    L = alpha * CE(m_local, pixel_labels) + beta * CE(g_tokens, token_labels)

Token targets are majority pixel labels per superpixel (ties -> smallest class
id). Training uses Adam at a constant learning rate with global-norm gradient
clipping; validation metrics are computed from the fused (voted) map each
epoch and the best-val-OA checkpoint is kept alongside the final one.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, metrics, model, optim, raster, superpixel
from .engine import Tape, Tensor
from .errors import DataError, NumericError, UsageError
from .raster import IGNORE_LABEL, DatasetManifest, Patch
from .superpixel import SuperpixelMap


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.001
    epochs: int = 50
    d_hidden: int = 64
    alpha: float = 0.7
    beta: float = 0.3
    n_sp_target: int = 500
    n_max: int = 600
    seed: int = 0
    n_blocks: int = 4
    n_state: int = 16
    conv_k: int = 4
    clip_norm: float = 1.0
    pca_components: int = 3
    eval_every: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise UsageError(f"loss weights must be nonnegative, "
                             f"got alpha={self.alpha} beta={self.beta}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.n_max < 1 or self.n_sp_target < 1:
            raise UsageError("n_max and n_sp_target must be >= 1")
        if self.eval_every < 1:
            raise UsageError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return TrainConfig(**d)


# --------------------------------------------------------------------------
# targets and losses
# --------------------------------------------------------------------------

def superpixel_targets(labels: np.ndarray, sp: SuperpixelMap, n_classes: int,
                       n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Majority pixel label per superpixel, ties to the smallest class id.

    Returns (token_labels [n_max] int32, token_mask [n_max] bool). Tokens are
    masked out when padded (id >= n_sp) or when their superpixel contains no
    labeled pixel.
    """
    lab = np.asarray(labels)
    if lab.shape != sp.ids.shape:
        raise DataError(f"labels {lab.shape} do not match superpixels "
                        f"{sp.ids.shape}")
    if sp.n_sp > n_max:
        raise DataError(f"{sp.n_sp} superpixels exceed the token capacity "
                        f"{n_max}")
    ids = sp.ids.reshape(-1).astype(np.int64)
    lab = lab.reshape(-1).astype(np.int64)
    keep = lab != IGNORE_LABEL
    if keep.any() and lab[keep].max() >= n_classes:
        raise DataError(f"label {int(lab[keep].max())} outside "
                        f"0..{n_classes - 1}")
    hist = np.bincount(ids[keep] * n_classes + lab[keep],
                       minlength=sp.n_sp * n_classes).reshape(sp.n_sp, n_classes)
    token_labels = np.zeros(n_max, dtype=np.int32)
    token_mask = np.zeros(n_max, dtype=bool)
    # argmax picks the first maximum, which is exactly the smallest-id rule
    token_labels[:sp.n_sp] = np.argmax(hist, axis=1)
    token_mask[:sp.n_sp] = hist.sum(axis=1) > 0
    return token_labels, token_mask


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: np.ndarray | None = None, class_axis: int = -1) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions."""
    nd = len(logits.shape)
    class_axis = class_axis % nd
    if class_axis != nd - 1:
        axes = tuple(i for i in range(nd) if i != class_axis) + (class_axis,)
        logits = engine.transpose(logits, axes)
    k = logits.shape[-1]
    lead = logits.shape[:-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != lead:
        raise DataError(f"targets {tgt.shape} do not match logit positions "
                        f"{lead}")
    if mask is None:
        keep = np.ones(lead, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != lead:
            raise DataError(f"mask {keep.shape} does not match logit positions "
                            f"{lead}")
    n = int(keep.sum())
    if n == 0:
        raise DataError("cross entropy has no unmasked targets")
    if tgt[keep].min() < 0 or tgt[keep].max() >= k:
        raise DataError(f"target {int(tgt[keep].max())} outside 0..{k - 1}")
    # one-hot pick folded with the mask so padded positions contribute
    # nothing; masked targets may hold sentinel values, so zero them first
    pick = np.zeros(lead + (k,), dtype=np.float32)
    np.put_along_axis(pick, np.where(keep, tgt, 0)[..., None], 1.0, axis=-1)
    pick *= keep[..., None].astype(np.float32)
    lp = engine.log_softmax(logits, axis=-1)
    picked = engine.reduce_sum(engine.mul(lp, Tensor(pick)))
    return engine.mul(engine.neg(picked), Tensor(np.float32(1.0 / n)))


@dataclass
class LossParts:
    total: Tensor
    local_term: Tensor
    global_term: Tensor


def combine_terms(l_local: Tensor, l_global: Tensor,
                  alpha: float, beta: float) -> Tensor:
    return engine.add(engine.mul(Tensor(np.float32(alpha)), l_local),
                      engine.mul(Tensor(np.float32(beta)), l_global))


def multitask_loss(m_local: Tensor, g_tokens: Tensor, pixel_labels: np.ndarray,
                   token_labels: np.ndarray, pixel_mask: np.ndarray | None,
                   token_mask: np.ndarray, alpha: float = 0.7,
                   beta: float = 0.3) -> LossParts:
    """Weighted sum of pixel-level and token-level cross entropies.

    The global term supervises the token logits before remap, so superpixel
    size does not re-weight it.
    """
    l_local = cross_entropy(m_local, pixel_labels, pixel_mask, class_axis=1)
    l_global = cross_entropy(g_tokens, token_labels, token_mask, class_axis=-1)
    return LossParts(combine_terms(l_local, l_global, alpha, beta),
                     l_local, l_global)


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

def trivial_superpixels(h: int, w: int) -> SuperpixelMap:
    """Each pixel its own token: the no-superpixel ablation's segmentation."""
    return SuperpixelMap(ids=np.arange(h * w, dtype=np.int32).reshape(h, w),
                         n_sp=h * w, sizes=np.ones(h * w, dtype=np.int64))


def default_superpixel_fn(cfg: TrainConfig):
    def compute(patch: Patch) -> SuperpixelMap:
        pc = raster.pca_project(patch, n_components=cfg.pca_components)
        return superpixel.slic(pc, n_sp_target=cfg.n_sp_target)
    return compute


@dataclass
class _Item:
    patch: Patch
    sp: SuperpixelMap
    token_labels: np.ndarray
    token_mask: np.ndarray


def _load_split(manifest: DatasetManifest, split: str, base_dir: str | None,
                cfg: TrainConfig, sp_fn, n_classes: int,
                cache: dict[str, SuperpixelMap]) -> list[_Item]:
    items = []
    for entry in manifest.entries:
        if entry.split != split:
            continue
        path = entry.path
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        patch = raster.read_patch(path)
        if patch.labels is None:
            raise DataError(f"patch {entry.patch_id} has no labels")
        if entry.patch_id not in cache:
            cache[entry.patch_id] = sp_fn(patch)
        sp = cache[entry.patch_id]
        tl, tm = superpixel_targets(patch.labels, sp, n_classes, cfg.n_max)
        items.append(_Item(patch, sp, tl, tm))
    shapes = {it.patch.bands.shape for it in items}
    if len(shapes) > 1:
        raise DataError(f"patches in split '{split}' disagree on shape: "
                        f"{sorted(shapes)}")
    return items


def _batch_arrays(batch: list[_Item]):
    """Stack a batch; token rows are cropped to the widest map in the batch
    (padding the scan further would only stretch the sequence)."""
    x = np.stack([it.patch.bands for it in batch]).astype(np.float32)
    labels = np.stack([it.patch.labels for it in batch])
    pixel_mask = labels != IGNORE_LABEL
    for i, it in enumerate(batch):
        if it.patch.valid_mask is not None:
            pixel_mask[i] &= it.patch.valid_mask
    width = max(it.sp.n_sp for it in batch)
    token_labels = np.stack([it.token_labels for it in batch])[:, :width]
    token_mask = np.stack([it.token_mask for it in batch])[:, :width]
    sps = [it.sp for it in batch]
    return x, labels, pixel_mask, token_labels, token_mask, sps


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

HEADS = ("local", "global", "final")


def evaluate_items(params: model.GLocalParams, items: list[_Item],
                   n_classes: int, batch_size: int = 8,
                   head: str = "final") -> dict:
    """Forward the items without a tape and score argmax predictions."""
    if head not in HEADS:
        raise UsageError(f"head must be one of {HEADS}, got '{head}'")
    cm = metrics.ConfusionMatrix(n_classes)
    for start in range(0, len(items), batch_size):
        batch = items[start:start + batch_size]
        x, labels, pixel_mask, _, _, sps = _batch_arrays(batch)
        out = model.forward(Tensor(x), sps, params)
        chosen = {"local": out.m_local, "global": out.m_global_up,
                  "final": out.m_final}[head]
        pred = np.argmax(chosen.data, axis=1)
        cm.accumulate(pred, labels, pixel_mask)
    return metrics.metrics_report(cm)


def evaluate_manifest(params: model.GLocalParams, manifest: DatasetManifest,
                      split: str, cfg: TrainConfig, base_dir: str | None = None,
                      sp_fn=None, head: str = "final") -> dict:
    sp_fn = sp_fn or default_superpixel_fn(cfg)
    items = _load_split(manifest, split, base_dir, cfg, sp_fn,
                        manifest.scheme.num_classes, {})
    if not items:
        raise DataError(f"manifest has no entries in split '{split}'")
    report = evaluate_items(params, items, manifest.scheme.num_classes,
                            batch_size=cfg.batch_size, head=head)
    report["split"] = split
    report["head"] = head
    return report


# --------------------------------------------------------------------------
# the fit loop
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    params: model.GLocalParams
    log: list[dict]
    best_epoch: int
    best_val_oa: float
    final_path: str | None
    best_path: str | None


def _grad_dict(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in named.items()}


def fit(manifest: DatasetManifest, cfg: TrainConfig, out_dir: str | None = None,
        base_dir: str | None = None, sp_fn=None, quiet: bool = True) -> FitResult:
    """Train on the manifest's train split, validate per epoch, checkpoint.

    Deterministic given cfg.seed: batch order, initialization, and optimizer
    state never consult any other entropy source.
    """
    sp_fn = sp_fn or default_superpixel_fn(cfg)
    n_classes = manifest.scheme.num_classes
    cache: dict[str, SuperpixelMap] = {}
    train_items = _load_split(manifest, "train", base_dir, cfg, sp_fn,
                              n_classes, cache)
    if not train_items:
        raise DataError("manifest has an empty train split")
    val_items = _load_split(manifest, "val", base_dir, cfg, sp_fn,
                            n_classes, cache)

    c_in = train_items[0].patch.bands.shape[0]
    params = model.init_glocal(c_in, d_hidden=cfg.d_hidden, n_classes=n_classes,
                               n_blocks=cfg.n_blocks, seed=cfg.seed,
                               n_state=cfg.n_state, conv_k=cfg.conv_k)
    named = params.named()
    arrays = {k: t.data for k, t in named.items()}
    adam = optim.Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    meta = {"config": cfg.to_dict(), "c_in": c_in, "n_classes": n_classes,
            "d_hidden": cfg.d_hidden, "n_blocks": cfg.n_blocks,
            "n_state": cfg.n_state, "conv_k": cfg.conv_k}
    log: list[dict] = []
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        open(log_path, "w").close()

    best_val_oa = -1.0
    best_epoch = -1
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.permutation(len(train_items))
        train_cm = metrics.ConfusionMatrix(n_classes)
        batch_losses, local_losses, global_losses = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start:start + cfg.batch_size]]
            x, labels, pixel_mask, tok_lab, tok_mask, sps = _batch_arrays(batch)
            with Tape() as tape:
                out = model.forward(Tensor(x), sps, params,
                                    n_max=tok_mask.shape[1])
                parts = multitask_loss(out.m_local, out.g_tokens, labels,
                                       tok_lab, pixel_mask, tok_mask,
                                       alpha=cfg.alpha, beta=cfg.beta)
                tape.backward(parts.total)
            grads = _grad_dict(named)
            gnorm = optim.global_norm(grads)
            if not np.isfinite(gnorm):
                raise NumericError(f"non-finite gradient norm at step {step}")
            grads = optim.clip_global_norm(grads, cfg.clip_norm)
            if not adam.step(arrays, grads):
                raise NumericError(f"optimizer rejected step {step}: "
                                   f"non-finite gradients")
            step += 1
            batch_losses.append(float(parts.total.data))
            local_losses.append(float(parts.local_term.data))
            global_losses.append(float(parts.global_term.data))
            train_cm.accumulate(np.argmax(out.m_final.data, axis=1),
                                labels, pixel_mask)

        row = {
            "epoch": epoch,
            "step": step,
            "train_loss": float(np.mean(batch_losses)),
            "train_loss_local": float(np.mean(local_losses)),
            "train_loss_global": float(np.mean(global_losses)),
            "train_oa": metrics.oa(train_cm),
            "time_s": round(time.time() - t0, 3),
        }
        if val_items and ((epoch + 1) % cfg.eval_every == 0
                          or epoch == cfg.epochs - 1):
            rep = evaluate_items(params, val_items, n_classes,
                                 batch_size=cfg.batch_size)
            row.update(val_oa=rep["oa"], val_aa=rep["aa"],
                       val_kappa=rep["kappa"], val_miou=rep["miou"])
            if rep["oa"] > best_val_oa:
                best_val_oa = rep["oa"]
                best_epoch = epoch
                if out_dir is not None:
                    model.save_checkpoint(
                        os.path.join(out_dir, "best.ckpt"), arrays,
                        {**meta, "epoch": epoch, "val_oa": rep["oa"]})
        log.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if not quiet:
            print(json.dumps(row, sort_keys=True), flush=True)

    final_path = best_path = None
    if out_dir is not None:
        final_path = os.path.join(out_dir, "final.ckpt")
        model.save_checkpoint(final_path, arrays, {**meta, "epoch": cfg.epochs - 1})
        best_path = os.path.join(out_dir, "best.ckpt")
        if best_epoch < 0:
            best_path = None
    return FitResult(params, log, best_epoch, best_val_oa, final_path, best_path)


# --------------------------------------------------------------------------
# ablations and the loss-ratio sweep
# --------------------------------------------------------------------------

SWEEP_GRID = ((0.7, 0.3), (0.6, 0.4), (0.5, 0.5), (0.4, 0.6), (0.3, 0.7),
              (1.0, 0.0), (0.0, 1.0))


def loss_ratio_sweep(manifest: DatasetManifest, cfg: TrainConfig,
                     out_dir: str | None = None, base_dir: str | None = None,
                     grid=SWEEP_GRID) -> list[dict]:
    """Refit per (alpha, beta) pair and report the best val OA of each run."""
    rows = []
    for alpha, beta in grid:
        sub = None
        if out_dir is not None:
            sub = os.path.join(out_dir, f"ab_{int(round(alpha * 100))}_"
                                        f"{int(round(beta * 100))}")
        run_cfg = replace(cfg, alpha=alpha, beta=beta)
        res = fit(manifest, run_cfg, out_dir=sub, base_dir=base_dir)
        rows.append({"alpha": alpha, "beta": beta,
                     "best_val_oa": res.best_val_oa,
                     "best_epoch": res.best_epoch,
                     "final_train_loss": res.log[-1]["train_loss"]})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows


def ablation_suite(manifest: DatasetManifest, cfg: TrainConfig,
                   out_dir: str | None = None, base_dir: str | None = None,
                   eval_split: str = "test") -> dict:
    """Score the three output heads of one trained model, plus a retrained
    variant whose tokens are single pixels (sequence length H*W)."""
    if not manifest.split_ids(eval_split):
        raise DataError(f"manifest has no entries in split '{eval_split}'")
    full_dir = os.path.join(out_dir, "full") if out_dir is not None else None
    res = fit(manifest, cfg, out_dir=full_dir, base_dir=base_dir)

    table: dict[str, dict] = {}
    for variant, head in (("local", "local"), ("global", "global"),
                          ("voting", "final")):
        rep = evaluate_manifest(res.params, manifest, eval_split, cfg,
                                base_dir=base_dir, head=head)
        table[variant] = {"oa": rep["oa"], "miou": rep["miou"],
                          "kappa": rep["kappa"]}

    # no-superpixel variant: every pixel is a token, so capacity must be H*W
    shape = None
    for entry in manifest.entries:
        if entry.split == "train":
            path = entry.path
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            shape = raster.read_patch(path).bands.shape
            break
    h, w = shape[1], shape[2]
    nosp_cfg = replace(cfg, n_max=h * w, n_sp_target=h * w)
    nosp_fn = lambda patch: trivial_superpixels(h, w)
    nosp_dir = os.path.join(out_dir, "no_superpixel") if out_dir is not None else None
    nosp = fit(manifest, nosp_cfg, out_dir=nosp_dir, base_dir=base_dir,
               sp_fn=nosp_fn)
    rep = evaluate_manifest(nosp.params, manifest, eval_split, nosp_cfg,
                            base_dir=base_dir, sp_fn=nosp_fn, head="final")
    table["no_superpixel"] = {"oa": rep["oa"], "miou": rep["miou"],
                              "kappa": rep["kappa"], "seq_len": h * w}

    result = {"metrics": ("oa", "miou", "kappa"), "split": eval_split,
              "rows": table}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result
