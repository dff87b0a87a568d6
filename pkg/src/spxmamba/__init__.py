"""Dual-branch land-cover segmentation over superpixel token sequences.

The package splits into a small stack of layers:

- engine: f32 tensors with a reverse-mode tape (conv, matmul, softmax, ...)
- ssm: selective-scan sequence blocks with masking and causal conv
- superpixel: SLIC segmentation and the token <-> pixel mapping
- raster: scenes, patches, class schemes, dataset manifests
- model: the two-branch network (pixel CNN + superpixel-token sequence)
- training: losses, the fit loop, sweeps, and the ablation harness
- metrics: confusion-matrix accumulation and the derived scores
- bench: sequence-length timing harness
- cli: `spxmamba` command-line entry point
"""

from .errors import DataError, NumericError, ShapeError, UsageError
from .metrics import ConfusionMatrix, metrics_report
from .model import GLocalOutputs, build_from_checkpoint, forward, init_glocal
from .raster import ClassScheme, DatasetManifest, Patch, load_manifest
from .superpixel import SuperpixelMap, slic
from .training import TrainConfig, ablation_suite, fit, loss_ratio_sweep

__version__ = "0.1.0"

__all__ = [
    "ClassScheme",
    "ConfusionMatrix",
    "DataError",
    "DatasetManifest",
    "GLocalOutputs",
    "NumericError",
    "Patch",
    "ShapeError",
    "SuperpixelMap",
    "TrainConfig",
    "UsageError",
    "__version__",
    "ablation_suite",
    "build_from_checkpoint",
    "fit",
    "forward",
    "init_glocal",
    "load_manifest",
    "loss_ratio_sweep",
    "metrics_report",
    "slic",
]
