"""Throughput benchmark: scanning pixel sequences vs superpixel tokens.

The global branch owes its speed to sequence length: a dense scan walks H*W
positions while the token scan walks n_sp. This harness times the same stack
at both lengths and reports the measured speedup next to the exact reduction
factor H*W/n_sp.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
import time

import numpy as np

from . import ssm
from .engine import Tensor
from .errors import UsageError


def reduction_factor(h: int, w: int, n_sp: int) -> float:
    if n_sp < 1:
        raise UsageError(f"n_sp must be >= 1, got {n_sp}")
    return (h * w) / n_sp


def _median_seconds(fn, repeats: int) -> float:
    fn()  # warm-up pass, excluded from the measurement
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _environment() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
    }


def run_bench(sizes, n_sp_target: int = 500, repeats: int = 5,
              d_model: int = 64, n_blocks: int = 4, seed: int = 0,
              out_json: str | None = None, out_csv: str | None = None) -> dict:
    """Time the stack forward at L = H*W vs L = n_sp for each (H, W).

    n_sp is capped at H*W so degenerate sizes compare equal lengths.
    """
    if repeats < 3:
        raise UsageError(f"repeats must be >= 3 for a stable median, "
                         f"got {repeats}")
    rng = np.random.default_rng(seed)
    blocks = ssm.init_mamba_stack(d_model, n_blocks, rng)
    rows = []
    for h, w in sizes:
        n_px = h * w
        n_sp = min(n_sp_target, n_px)
        x_px = Tensor(rng.normal(size=(1, n_px, d_model)).astype(np.float32))
        x_sp = Tensor(rng.normal(size=(1, n_sp, d_model)).astype(np.float32))
        t_px = _median_seconds(lambda: ssm.mamba_stack(x_px, blocks), repeats)
        t_sp = _median_seconds(lambda: ssm.mamba_stack(x_sp, blocks), repeats)
        rows.append({
            "h": h, "w": w, "n_sp": n_sp,
            "reduction_factor": reduction_factor(h, w, n_sp),
            "scan_time_pixel": t_px,
            "scan_time_superpixel": t_sp,
            "speedup": t_px / t_sp,
        })
    report = {
        "environment": _environment(),
        "config": {"n_sp_target": n_sp_target, "repeats": repeats,
                   "d_model": d_model, "n_blocks": n_blocks, "seed": seed},
        "rows": rows,
    }
    if out_json is not None:
        with open(out_json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if out_csv is not None:
        fields = ["h", "w", "n_sp", "reduction_factor", "scan_time_pixel",
                  "scan_time_superpixel", "speedup"]
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    return report
