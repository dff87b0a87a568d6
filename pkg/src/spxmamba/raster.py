"""Patches, class scheme, PCA projection, tiling, and dataset splitting.

A scene is a plain numpy stack: bands [C, Hs, Ws] float32, labels
[Hs, Ws] uint8 with 255 marking unlabeled pixels, and an optional boolean
validity mask. Patches are fixed-size tiles cut on a non-overlapping grid
and kept only when fully valid and dominated (> dominance fraction of the
labeled pixels) by a single class.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, UsageError

IGNORE_LABEL = 255  # sentinel in label rasters for pixels without reference


# --------------------------------------------------------------------------
# class scheme
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    color: tuple[int, int, int]


_DEFAULT_CLASSES = [
    ("Temp-needleleaf", (1, 62, 2)),
    ("Taiga-needleleaf", (149, 156, 112)),
    ("Broadleaf-dec.", (20, 139, 61)),
    ("Mixed-forest", (93, 117, 43)),
    ("Shrubland", (179, 137, 51)),
    ("Grassland", (226, 206, 136)),
    ("Polar-grassland", (200, 200, 200)),
    ("Wetland", (108, 163, 138)),
    ("Cropland", (231, 174, 103)),
    ("Barren", (166, 171, 174)),
    ("Urban", (221, 32, 38)),
    ("Water", (76, 112, 164)),
    ("Snow/Ice", (255, 255, 255)),
]


@dataclass
class ClassScheme:
    classes: list[ClassEntry]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise DataError(f"class ids must be contiguous from 0, got {ids}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DataError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def color_table(self) -> np.ndarray:
        """[K, 3] uint8 lookup table, row i = color of class id i."""
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def to_dict(self) -> dict:
        return {"classes": [{"id": c.id, "name": c.name, "color": list(c.color)}
                            for c in self.classes]}

    @staticmethod
    def from_dict(d: dict) -> "ClassScheme":
        return ClassScheme([ClassEntry(int(c["id"]), str(c["name"]), tuple(c["color"]))
                            for c in d["classes"]])

    @staticmethod
    def default() -> "ClassScheme":
        return ClassScheme([ClassEntry(i, n, c) for i, (n, c) in enumerate(_DEFAULT_CLASSES)])


# --------------------------------------------------------------------------
# patch
# --------------------------------------------------------------------------

@dataclass
class Patch:
    """One multiband chip; the unit of training and inference."""

    bands: np.ndarray                      # [C, H, W] float32
    labels: np.ndarray | None = None       # [H, W] uint8, 255 = unlabeled
    valid_mask: np.ndarray | None = None   # [H, W] bool
    patch_id: str = ""
    dominant_class: int | None = None

    def __post_init__(self):
        self.bands = np.ascontiguousarray(self.bands, dtype=np.float32)
        if self.bands.ndim != 3:
            raise DataError(f"patch bands must be [C,H,W], got shape {self.bands.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.bands.shape[1:]:
                raise DataError(f"labels {self.labels.shape} do not match "
                                f"bands {self.bands.shape}")
        if self.valid_mask is not None:
            self.valid_mask = np.ascontiguousarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.bands.shape[1:]:
                raise DataError(f"valid_mask {self.valid_mask.shape} does not match "
                                f"bands {self.bands.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bands.shape

    def check_labels(self, scheme: ClassScheme) -> None:
        if self.labels is None:
            return
        lab = self.labels[self.labels != IGNORE_LABEL]
        if lab.size and int(lab.max()) >= scheme.num_classes:
            raise DataError(f"label value {int(lab.max())} outside 0..{scheme.num_classes - 1}")


# --------------------------------------------------------------------------
# PCA projection
# --------------------------------------------------------------------------

@dataclass
class PCImage:
    """Top principal-component planes of a patch, pixels as samples."""

    components: np.ndarray          # [n, H, W] float64
    explained_variance: np.ndarray  # [n] float64, descending
    basis: np.ndarray               # [C, n] float64, columns = eigenvectors
    degenerate: bool = False


def pca_project(patch: Patch, n_components: int = 3) -> PCImage:
    """Project bands onto the top eigenvectors of the band covariance.

    Covariance is the sample covariance over pixels (divisor H*W - 1),
    bands mean-centered. Eigenvector signs are fixed so each vector's
    largest-magnitude entry is positive. Rank-deficient input pads the
    missing components with zeros and sets ``degenerate``.
    """
    C, H, W = patch.bands.shape
    if C < n_components:
        raise UsageError(f"need at least {n_components} bands, patch has {C}")
    if H * W <= n_components:
        raise UsageError(f"too few pixels ({H * W}) for {n_components} components")
    X = patch.bands.reshape(C, H * W).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite band values in PCA input")
    Xc = X - X.mean(axis=1, keepdims=True)
    cov = (Xc @ Xc.T) / (H * W - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    for j in range(C):
        k = int(np.argmax(np.abs(evecs[:, j])))
        if evecs[k, j] < 0:
            evecs[:, j] = -evecs[:, j]

    tol = evals[0] * 1e-12 if evals[0] > 0 else 0.0
    rank = int(np.sum(evals > tol))
    basis = evecs[:, :n_components].copy()
    ev = evals[:n_components].copy()
    comps = (basis.T @ Xc).reshape(n_components, H, W)
    degenerate = rank < n_components
    if degenerate:
        comps[rank:] = 0.0
        ev[rank:] = 0.0
    return PCImage(components=comps, explained_variance=ev, basis=basis,
                   degenerate=degenerate)


# --------------------------------------------------------------------------
# tiling
# --------------------------------------------------------------------------

def extract_patches(scene_bands: np.ndarray, scene_labels: np.ndarray,
                    scene_valid: np.ndarray | None = None, size: int = 128,
                    dominance: float = 0.5) -> list[Patch]:
    """Cut non-overlapping size x size tiles, keep the dominated, valid ones.

    A tile is kept iff every pixel is valid and some class strictly exceeds
    ``dominance`` of its *labeled* pixels (255 never counts). Tiles are
    returned in row-major grid order.
    """
    scene_bands = np.asarray(scene_bands)
    scene_labels = np.asarray(scene_labels)
    if scene_bands.ndim != 3 or scene_labels.shape != scene_bands.shape[1:]:
        raise DataError(f"scene bands {scene_bands.shape} vs labels {scene_labels.shape}")
    if not (0.0 <= dominance < 1.0):
        raise UsageError(f"dominance must be in [0, 1), got {dominance}")
    C, Hs, Ws = scene_bands.shape
    if Hs < size or Ws < size:
        raise DataError(f"scene {Hs}x{Ws} smaller than tile size {size}")
    if scene_valid is None:
        scene_valid = np.ones((Hs, Ws), dtype=bool)

    kept = []
    for r in range(Hs // size):
        for c in range(Ws // size):
            ys, xs = r * size, c * size
            val = scene_valid[ys:ys + size, xs:xs + size]
            if not val.all():
                continue
            lab = scene_labels[ys:ys + size, xs:xs + size]
            labeled = lab[lab != IGNORE_LABEL]
            if labeled.size == 0:
                continue
            counts = np.bincount(labeled.astype(np.int64))
            top = int(np.argmax(counts))
            if counts[top] <= dominance * labeled.size:
                continue
            kept.append(Patch(
                bands=scene_bands[:, ys:ys + size, xs:xs + size],
                labels=lab,
                valid_mask=val,
                patch_id=f"p{r:03d}_{c:03d}",
                dominant_class=top,
            ))
    return kept


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    patch_id: str
    path: str
    dominant_class: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scheme: ClassScheme
    seed: int
    warning: str | None = None

    def split_ids(self, split: str) -> list[str]:
        return [e.patch_id for e in self.entries if e.split == split]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "warning": self.warning,
            "scheme": self.scheme.to_dict(),
            "entries": [{"patch_id": e.patch_id, "path": e.path,
                         "dominant_class": e.dominant_class, "split": e.split}
                        for e in self.entries],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return DatasetManifest(
            entries=[ManifestEntry(e["patch_id"], e["path"],
                                   int(e["dominant_class"]), e["split"])
                     for e in doc["entries"]],
            scheme=ClassScheme.from_dict(doc["scheme"]),
            seed=int(doc["seed"]),
            warning=doc.get("warning"),
        )


def split_dataset(patches: list[Patch], ratios: tuple[float, float, float] = (0.1, 0.1, 0.8),
                  seed: int = 0, scheme: ClassScheme | None = None) -> DatasetManifest:
    """Shuffle by seed, then assign contiguous train/val/test slices.

    Sizes are floor(n*train), floor(n*val), remainder to test. Fewer than
    3 patches all land in train and the manifest carries a warning.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"split ratios must sum to 1, got {ratios}")
    scheme = scheme or ClassScheme.default()
    n = len(patches)
    order = np.random.default_rng(seed).permutation(n)
    warning = None
    if n < 3:
        splits = ["train"] * n
        warning = f"only {n} patches; all assigned to train"
    else:
        n_train = int(np.floor(n * ratios[0]))
        n_val = int(np.floor(n * ratios[1]))
        splits = ["test"] * n
        for i in range(n_train):
            splits[i] = "train"
        for i in range(n_train, n_train + n_val):
            splits[i] = "val"
    entries = [None] * n
    for pos, idx in enumerate(order):
        p = patches[idx]
        entries[idx] = ManifestEntry(
            patch_id=p.patch_id,
            path=p.patch_id + ".patch",
            dominant_class=-1 if p.dominant_class is None else int(p.dominant_class),
            split=splits[pos],
        )
    return DatasetManifest(entries=list(entries), scheme=scheme, seed=int(seed),
                           warning=warning)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def write_patch(path: str, patch: Patch) -> None:
    """One JSON header line, then raw f32le bands, then u8 labels/mask."""
    C, H, W = patch.bands.shape
    header = {
        "patch_id": patch.patch_id,
        "C": C, "H": H, "W": W,
        "has_labels": patch.labels is not None,
        "has_mask": patch.valid_mask is not None,
        "dtype": "f32le",
    }
    if patch.dominant_class is not None:
        header["dominant_class"] = int(patch.dominant_class)
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(patch.bands.astype("<f4").tobytes())
        if patch.labels is not None:
            f.write(patch.labels.astype(np.uint8).tobytes())
        if patch.valid_mask is not None:
            f.write(patch.valid_mask.astype(np.uint8).tobytes())


def read_patch(path: str) -> Patch:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
            C, H, W = int(header["C"]), int(header["H"]), int(header["W"])
        except (ValueError, KeyError) as e:
            raise DataError(f"bad patch header in {path}: {e}") from None
        if header.get("dtype") != "f32le":
            raise DataError(f"unsupported patch dtype {header.get('dtype')!r} in {path}")
        raw = f.read()
    nbytes = 4 * C * H * W
    plane = H * W
    expect = nbytes + plane * int(header["has_labels"]) + plane * int(header["has_mask"])
    if len(raw) != expect:
        raise DataError(f"truncated patch file {path}: {len(raw)} bytes, expected {expect}")
    bands = np.frombuffer(raw[:nbytes], dtype="<f4").reshape(C, H, W)
    off = nbytes
    labels = mask = None
    if header["has_labels"]:
        labels = np.frombuffer(raw[off:off + plane], dtype=np.uint8).reshape(H, W)
        off += plane
    if header["has_mask"]:
        mask = np.frombuffer(raw[off:off + plane], dtype=np.uint8).reshape(H, W).astype(bool)
    return Patch(bands=bands.copy(), labels=None if labels is None else labels.copy(),
                 valid_mask=mask, patch_id=str(header.get("patch_id", "")),
                 dominant_class=header.get("dominant_class"))


def save_manifest(path: str, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())


def load_manifest(path: str) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return DatasetManifest.from_json(f.read())
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"bad manifest {path}: {e}") from None


def load_scene(bands_path: str, labels_path: str | None = None,
               valid_path: str | None = None):
    """Load a scene stored as .npy arrays; shapes are cross-checked."""
    try:
        bands = np.load(bands_path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load scene bands {bands_path}: {e}") from None
    if bands.ndim != 3:
        raise DataError(f"scene bands must be [C,H,W], got {bands.shape}")
    labels = valid = None
    if labels_path is not None:
        labels = np.load(labels_path)
        if labels.shape != bands.shape[1:]:
            raise DataError(f"scene labels {labels.shape} vs bands {bands.shape}")
    if valid_path is not None:
        valid = np.load(valid_path).astype(bool)
        if valid.shape != bands.shape[1:]:
            raise DataError(f"scene valid mask {valid.shape} vs bands {bands.shape}")
    return bands.astype(np.float32), labels, valid
