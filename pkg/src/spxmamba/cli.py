"""Command-line entry point wiring the whole pipeline.

Subcommands: ingest, segment, train, infer, eval, ablate, bench, render.
Every run ends with a one-line JSON summary on stdout; exit codes are
0 success, 1 usage error, 2 data error, 3 numeric failure. Config precedence
for train/ablate: explicit CLI flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import metrics, model, raster, superpixel, training
from .errors import DataError, NumericError, UsageError
from .raster import ClassScheme

log = logging.getLogger("spxmamba")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; route through UsageError for exit 1."""

    def error(self, message):
        raise UsageError(message)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True), flush=True)


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {path}: {e}")


def _load_scheme(path: str | None) -> ClassScheme:
    if path is None:
        return ClassScheme.default()
    doc = _load_json(path)
    if "scheme" in doc:  # accept a manifest as the palette source too
        doc = doc["scheme"]
    return ClassScheme.from_dict(doc)


def _auto_palette(k: int) -> ClassScheme:
    """Distinct deterministic colors for models without a stored scheme."""
    from .raster import ClassEntry
    entries = []
    for i in range(k):
        hue = (i * 0.6180339887498949) % 1.0
        h6 = hue * 6.0
        c, x = 255, int(255 * (1 - abs(h6 % 2 - 1)))
        rgb = [(c, x, 0), (x, c, 0), (0, c, x),
               (0, x, c), (x, 0, c), (c, 0, x)][int(h6) % 6]
        entries.append(ClassEntry(i, f"class_{i}", rgb))
    return ClassScheme(entries)


def _scheme_for(n_classes: int, scheme_path: str | None) -> ClassScheme:
    if scheme_path is not None:
        scheme = _load_scheme(scheme_path)
        if scheme.num_classes != n_classes:
            raise DataError(f"scheme has {scheme.num_classes} classes, model "
                            f"predicts {n_classes}")
        return scheme
    if n_classes == ClassScheme.default().num_classes:
        return ClassScheme.default()
    return _auto_palette(n_classes)


def render_to_png(class_raster: np.ndarray, scheme: ClassScheme,
                  path: str) -> None:
    """Pixel-exact palette mapping of a class raster to a PNG file."""
    from PIL import Image
    raster_arr = np.asarray(class_raster)
    if raster_arr.ndim != 2:
        raise DataError(f"class raster must be 2-d, got {raster_arr.shape}")
    if raster_arr.min() < 0 or raster_arr.max() >= scheme.num_classes:
        raise DataError(f"class value {int(raster_arr.max())} outside "
                        f"0..{scheme.num_classes - 1}")
    rgb = scheme.color_table()[raster_arr.astype(np.int64)]
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)


def palette_decode(png_path: str, scheme: ClassScheme) -> np.ndarray:
    """Inverse of render_to_png; colors must match the palette exactly."""
    from PIL import Image
    rgb = np.asarray(Image.open(png_path).convert("RGB"))
    table = scheme.color_table()
    out = np.full(rgb.shape[:2], -1, dtype=np.int64)
    for cid in range(table.shape[0]):
        out[(rgb == table[cid]).all(axis=-1)] = cid
    if (out < 0).any():
        raise DataError(f"{png_path} has colors outside the palette")
    return out.astype(np.uint8)


# --------------------------------------------------------------------------
# subcommand bodies
# --------------------------------------------------------------------------

def _cmd_ingest(args) -> int:
    scheme = _load_scheme(args.scheme)
    try:
        ratios = tuple(float(v) for v in args.ratios.split(","))
    except ValueError:
        raise UsageError(f"bad --ratios '{args.ratios}'")
    if len(ratios) != 3:
        raise UsageError(f"--ratios needs three values, got {len(ratios)}")
    if not os.path.exists(args.bands):
        raise DataError(f"file not found: {args.bands}")
    if not os.path.exists(args.labels):
        raise DataError(f"file not found: {args.labels}")
    bands, labels, valid = raster.load_scene(args.bands, args.labels)
    patches = raster.extract_patches(bands, labels, valid,
                                     size=args.patch_size,
                                     dominance=args.min_dominance)
    if not patches:
        raise DataError("no patch passed the validity and dominance filters")
    for p in patches:
        p.check_labels(scheme)
    manifest = raster.split_dataset(patches, ratios, seed=args.seed or 0,
                                    scheme=scheme)

    os.makedirs(os.path.join(args.out, "patches"), exist_ok=True)
    for p, entry in zip(patches, manifest.entries):
        rel = os.path.join("patches", f"{p.patch_id}.patch")
        raster.write_patch(os.path.join(args.out, rel), p)
        entry.path = rel
    manifest_path = os.path.join(args.out, "manifest.json")
    raster.save_manifest(manifest_path, manifest)

    counts = {s: len(manifest.split_ids(s)) for s in ("train", "val", "test")}
    _emit({"cmd": "ingest", "status": "ok", "manifest": manifest_path,
           "n_patches": len(patches), **counts})
    return 0


def _cmd_segment(args) -> int:
    patch = raster.read_patch(args.patch)
    pc = raster.pca_project(patch, n_components=args.pca_components)
    sp = superpixel.slic(pc, n_sp_target=args.nsp,
                         compactness=args.compactness)
    superpixel.write_superpixels(args.out, sp)
    h, w = sp.shape
    _emit({"cmd": "segment", "status": "ok", "out": args.out,
           "n_sp": sp.n_sp, "reduction": (h * w) / sp.n_sp})
    return 0


def _merge_config(args) -> training.TrainConfig:
    values = {}
    if args.config is not None:
        path = args.config
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            try:
                with open(path, "rb") as fh:
                    values = tomllib.load(fh)
            except FileNotFoundError:
                raise DataError(f"file not found: {path}")
        else:
            values = _load_json(path)
    for key in ("seed", "epochs", "batch_size", "lr", "alpha", "beta"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return training.TrainConfig.from_dict(values)


def _manifest_and_base(path: str) -> tuple[raster.DatasetManifest, str]:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    return raster.load_manifest(path), os.path.dirname(os.path.abspath(path))


def _cmd_train(args) -> int:
    cfg = _merge_config(args)
    manifest, base = _manifest_and_base(args.manifest)
    res = training.fit(manifest, cfg, out_dir=args.out, base_dir=base,
                       quiet=args.log_level not in ("debug", "info"))
    _emit({"cmd": "train", "status": "ok", "out": args.out,
           "epochs": cfg.epochs, "final": res.final_path,
           "best": res.best_path, "best_val_oa": res.best_val_oa,
           "final_train_loss": res.log[-1]["train_loss"]})
    return 0


def _cmd_infer(args) -> int:
    params, meta = model.build_from_checkpoint(args.ckpt)
    patch = raster.read_patch(args.patch)
    sp = superpixel.read_superpixels(args.sp)
    if sp.shape != patch.bands.shape[1:]:
        raise DataError(f"superpixels {sp.shape} do not match patch "
                        f"{patch.bands.shape[1:]}")
    out = model.forward(model.Tensor(patch.bands[None]), [sp], params)
    scheme = _scheme_for(meta.get("n_classes", out.m_local.shape[1]),
                         args.scheme)

    os.makedirs(args.out_maps, exist_ok=True)
    written = []
    for name, tensor in (("local", out.m_local), ("global", out.m_global_up),
                         ("final", out.m_final)):
        logits = tensor.data[0]
        np.save(os.path.join(args.out_maps, f"logits_{name}.npy"), logits)
        pred = np.argmax(logits, axis=0).astype(np.uint8)
        np.save(os.path.join(args.out_maps, f"pred_{name}.npy"), pred)
        render_to_png(pred, scheme, os.path.join(args.out_maps,
                                                 f"pred_{name}.png"))
        written.append(name)
    _emit({"cmd": "infer", "status": "ok", "out_maps": args.out_maps,
           "heads": written, "n_sp": sp.n_sp})
    return 0


def _cmd_eval(args) -> int:
    params, meta = model.build_from_checkpoint(args.ckpt)
    manifest, base = _manifest_and_base(args.manifest)
    cfg = training.TrainConfig.from_dict(meta.get("config", {}))
    report = training.evaluate_manifest(params, manifest, args.split, cfg,
                                        base_dir=base, head=args.head)
    if manifest.scheme is not None:
        report["class_names"] = [c.name for c in manifest.scheme.classes]
    if args.out is not None:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit({"cmd": "eval", "status": "ok", "split": args.split,
           "head": args.head, "oa": report["oa"], "aa": report["aa"],
           "kappa": report["kappa"], "miou": report["miou"],
           "out": args.out})
    return 0


def _cmd_ablate(args) -> int:
    cfg = _merge_config(args)
    manifest, base = _manifest_and_base(args.manifest)
    table = training.ablation_suite(manifest, cfg, out_dir=args.out,
                                    base_dir=base, eval_split=args.split)
    _emit({"cmd": "ablate", "status": "ok", "out": args.out,
           "rows": {k: v["oa"] for k, v in table["rows"].items()}})
    return 0


def _cmd_bench(args) -> int:
    try:
        sizes = [(int(s), int(s)) for s in args.sizes.split(",")]
    except ValueError:
        raise UsageError(f"bad --sizes '{args.sizes}'")
    report = bench_mod.run_bench(sizes, n_sp_target=args.nsp,
                                 repeats=args.repeats, d_model=args.d_model,
                                 n_blocks=args.n_blocks, seed=args.seed or 0,
                                 out_json=args.out, out_csv=args.csv)
    _emit({"cmd": "bench", "status": "ok", "out": args.out,
           "speedups": [round(r["speedup"], 3) for r in report["rows"]]})
    return 0


def _cmd_render(args) -> int:
    if not os.path.exists(args.raster):
        raise DataError(f"file not found: {args.raster}")
    arr = np.load(args.raster)
    scheme = _load_scheme(args.scheme)
    render_to_png(arr, scheme, args.out)
    _emit({"cmd": "render", "status": "ok", "out": args.out,
           "shape": list(arr.shape)})
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the run seed (default: config value)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-worker deterministic mode (always on; "
                             "flag recorded for compatibility)")
    common.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"),
                        help="stderr logging verbosity (default: warning)")

    p = _Parser(prog="spxmamba",
                description="Dual-branch superpixel-token segmentation "
                            "pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", parents=[common],
                        help="cut a scene into dominant-class patches")
    sp.add_argument("--bands", required=True, help="bands .npy [C,H,W]")
    sp.add_argument("--labels", required=True, help="labels .npy [H,W] uint8")
    sp.add_argument("--scheme", default=None,
                    help="class scheme JSON (default: built-in 13-class)")
    sp.add_argument("--patch-size", type=int, default=128)
    sp.add_argument("--min-dominance", type=float, default=0.5)
    sp.add_argument("--ratios", default="0.1,0.1,0.8",
                    help="train,val,test fractions (default 0.1,0.1,0.8)")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=_cmd_ingest)

    sp = sub.add_parser("segment", parents=[common],
                        help="superpixel map for one patch")
    sp.add_argument("--patch", required=True)
    sp.add_argument("--nsp", type=int, default=500)
    sp.add_argument("--compactness", type=float, default=10.0)
    sp.add_argument("--pca-components", type=int, default=3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_segment)

    helps = {"train": "fit the dual-branch model on a dataset manifest",
             "ablate": "branch / superpixel ablation table"}
    for name, fn in (("train", _cmd_train), ("ablate", _cmd_ablate)):
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--config", default=None,
                        help="JSON or TOML config; keys mirror TrainConfig")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--batch-size", dest="batch_size", type=int,
                        default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--beta", type=float, default=None)
        sp.add_argument("--out", required=True)
        if name == "ablate":
            sp.add_argument("--split", default="test")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("infer", parents=[common],
                        help="logits and class maps for one patch")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--patch", required=True)
    sp.add_argument("--sp", required=True, help="superpixel file from segment")
    sp.add_argument("--scheme", default=None)
    sp.add_argument("--out-maps", required=True)
    sp.set_defaults(func=_cmd_infer)

    sp = sub.add_parser("eval", parents=[common],
                        help="accuracy report for one split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--head", default="final",
                    choices=("local", "global", "final"))
    sp.add_argument("--out", default=None, help="report JSON path")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("bench", parents=[common],
                        help="token-scan timing vs per-pixel scan")
    sp.add_argument("--sizes", default="32,64,128",
                    help="comma-separated square sizes")
    sp.add_argument("--nsp", type=int, default=500)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--d-model", dest="d_model", type=int, default=64)
    sp.add_argument("--n-blocks", dest="n_blocks", type=int, default=4)
    sp.add_argument("--out", default=None)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=_cmd_bench)

    sp = sub.add_parser("render", parents=[common],
                        help="palette PNG from a class raster")
    sp.add_argument("--raster", required=True, help="class ids .npy")
    sp.add_argument("--scheme", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _emit({"status": "error", "kind": "usage", "message": str(e)})
        return 1
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        _emit({"status": "error", "kind": "usage", "message": str(e)})
        return 1
    except NumericError as e:
        _emit({"status": "error", "kind": "numeric", "message": str(e)})
        return 3
    except DataError as e:
        _emit({"status": "error", "kind": "data", "message": str(e)})
        return 2
    except OSError as e:
        _emit({"status": "error", "kind": "data", "message": str(e)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
