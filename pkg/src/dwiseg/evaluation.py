"""View aggregation, soft-label resampling and segmentation similarity metrics.

Ties between classes always go to the lowest class index. Distances are
measured between voxel centres in world millimetres.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, ShapeError, ValidationError
from .volume import LabelVolume, Volume, voxel_to_world

DEFAULT_VIEW_WEIGHTS = (0.4, 0.4, 0.2)  # axial, coronal, sagittal


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-voxel class probabilities (X, Y, Z, C); class i means label ``class_labels[i]``."""

    probs: np.ndarray
    affine: np.ndarray
    class_labels: tuple = ()
    label_table: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 4:
            raise ShapeError(f"probabilities must be (X, Y, Z, C), got {p.shape}")
        labels = tuple(self.class_labels) or tuple(range(p.shape[-1]))
        if len(labels) != p.shape[-1]:
            raise ShapeError("class_labels length must equal the channel count")
        object.__setattr__(self, "class_labels", labels)
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))

    @property
    def dims(self):
        return tuple(self.probs.shape[:3])

    def is_simplex(self, tol: float = 1e-4) -> bool:
        p = self.probs
        return bool(np.all(p >= -tol) and np.all(p <= 1 + tol)
                    and np.allclose(p.sum(-1), 1.0, atol=tol))


def aggregate_views(axial: ProbabilityVolume, coronal: ProbabilityVolume,
                    sagittal: ProbabilityVolume, weights=DEFAULT_VIEW_WEIGHTS) -> ProbabilityVolume:
    """Weighted average of the three views' class probabilities."""
    vols = (axial, coronal, sagittal)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError(f"view weights must be 3 non-negative numbers, not all 0: {weights}")
    w = w / w.sum()
    shape = axial.probs.shape
    for v in vols[1:]:
        if v.probs.shape != shape or not np.allclose(v.affine, axial.affine):
            raise ShapeError("views must share grid and classes")
    out = np.zeros(shape, dtype=np.float64)
    for wi, v in zip(w, vols):
        if wi > 0:
            out += wi * v.probs
    return ProbabilityVolume(out.astype(axial.probs.dtype), axial.affine, axial.class_labels,
                             axial.label_table)


def argmax_labels(p: ProbabilityVolume) -> LabelVolume:
    idx = np.argmax(p.probs, axis=-1)  # first maximum = lowest class index
    lut = np.asarray(p.class_labels, dtype=np.int32)
    table = dict(p.label_table) or None
    labels = lut[idx]
    if table is None:
        table = {int(c): ("background" if c == 0 else f"label_{c}") for c in p.class_labels}
    return LabelVolume(labels, p.affine, table)


def _snap(coords: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(coords)
    return np.where(np.abs(coords - r) < tol, r, coords)


def trilinear(p: np.ndarray, coords: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Sample (X, Y, Z, C) at continuous voxel ``coords`` (M, 3).

    The grid is surrounded by one layer of ``background`` vectors, so samples
    leaving the volume blend towards (and beyond it equal) the background.
    """
    padded = np.empty(tuple(s + 2 for s in p.shape[:3]) + p.shape[3:], dtype=np.float64)
    padded[...] = background
    padded[1:-1, 1:-1, 1:-1] = p
    c = np.clip(coords + 1.0, 0.0, np.array(padded.shape[:3], dtype=np.float64) - 1.0)
    base = np.minimum(np.floor(c).astype(np.int64), np.array(padded.shape[:3]) - 2)
    base = np.maximum(base, 0)
    frac = c - base
    out = np.zeros((len(coords), p.shape[-1]))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                wgt = wx * wy * wz
                out += wgt[:, None] * padded[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
    return out


def resample_probabilities(p: ProbabilityVolume, target_dims, target_affine) -> ProbabilityVolume:
    target_affine = np.asarray(target_affine, dtype=np.float64)
    for a in (p.affine, target_affine):
        if abs(np.linalg.det(a[:3, :3])) < 1e-12:
            raise GeometryError("singular affine")
    dims = tuple(int(d) for d in target_dims)
    ijk = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1).reshape(-1, 3)
    src = np.linalg.solve(p.affine, target_affine)  # target voxel -> source voxel
    coords = _snap(ijk @ src[:3, :3].T + src[:3, 3])
    background = np.zeros(p.probs.shape[-1])
    if 0 in p.class_labels:
        background[p.class_labels.index(0)] = 1.0
    else:
        background[0] = 1.0
    out = trilinear(np.asarray(p.probs, dtype=np.float64), coords, background)
    return ProbabilityVolume(out.reshape(dims + (-1,)), target_affine, p.class_labels,
                             p.label_table)


def resample_soft_labels(p: ProbabilityVolume, target_dims, target_affine) -> LabelVolume:
    """Tri-linearly interpolate class probabilities onto a target grid, then argmax.

    Target voxel centres are mapped through the target affine and the inverse
    source affine. Probability mass from outside the source volume counts as
    background (label 0).
    """
    return argmax_labels(resample_probabilities(p, target_dims, target_affine))


# --- metrics -------------------------------------------------------------------

def _same_grid(a, b):
    if a.dims != b.dims:
        raise ShapeError(f"grid mismatch: {a.dims} vs {b.dims}")


def dice(pred: LabelVolume, ref: LabelVolume, label: int) -> float | None:
    """2|P & R| / (|P| + |R|); None when both sets are empty."""
    _same_grid(pred, ref)
    p, r = pred.labels == label, ref.labels == label
    denom = int(p.sum()) + int(r.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(p, r).sum()) / denom


def _directed_mean(src: np.ndarray, dst: np.ndarray) -> float:
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def mean_hausdorff_points(p_pts: np.ndarray, r_pts: np.ndarray) -> float | None:
    """Sum of both directed mean nearest-neighbour distances; None if a set is empty."""
    if len(p_pts) == 0 or len(r_pts) == 0:
        return None
    return _directed_mean(r_pts, p_pts) + _directed_mean(p_pts, r_pts)


def mean_hausdorff(pred: LabelVolume, ref: LabelVolume, label: int) -> float | None:
    """Voxel-based mean Hausdorff distance (mm) of one region."""
    _same_grid(pred, ref)
    p_pts = voxel_to_world(pred.affine, np.argwhere(pred.labels == label))
    r_pts = voxel_to_world(ref.affine, np.argwhere(ref.labels == label))
    return mean_hausdorff_points(p_pts, r_pts)


def threshold_tract(v, frac: float = 0.2) -> np.ndarray:
    data = np.asarray(getattr(v, "data", v), dtype=np.float64)
    peak = data.max() if data.size else 0.0
    if not peak > 0:
        return np.zeros(data.shape, dtype=bool)
    return data >= frac * peak


def compare_tracts(a: Volume, b: Volume, threshold_frac: float = 0.2) -> float | None:
    """Mean Hausdorff (mm) between two tract volumes, each binarised at a
    fraction of its own maximum. None if either is empty after thresholding."""
    if a.dims != b.dims:
        raise ShapeError(f"grid mismatch: {a.dims} vs {b.dims}")
    ma, mb = threshold_tract(a, threshold_frac), threshold_tract(b, threshold_frac)
    return mean_hausdorff_points(voxel_to_world(a.affine, np.argwhere(ma)),
                                 voxel_to_world(b.affine, np.argwhere(mb)))


# --- reports -------------------------------------------------------------------

@dataclass
class RegionRow:
    label: int
    name: str
    family: str
    dice: float | None
    hausdorff_mm: float | None
    n_pred: int
    n_ref: int


@dataclass
class MetricReport:
    rows: list[RegionRow]
    families: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def mean_dice(self, include_background: bool = False) -> float:
        vals = [r.dice for r in self.rows if r.dice is not None
                and (include_background or r.label != 0)]
        return float(np.mean(vals)) if vals else math.nan

    def mean_hausdorff(self, include_background: bool = False) -> float:
        vals = [r.hausdorff_mm for r in self.rows if r.hausdorff_mm is not None
                and (include_background or r.label != 0)]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, dest) -> None:
        """Write to a path, or to an open text stream."""
        if hasattr(dest, "write"):
            self._write(dest)
            return
        with open(dest, "w", newline="") as fh:
            self._write(fh)

    def _write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "name", "family", "dice", "hausdorff_mm", "n_pred", "n_ref"])
        for r in self.rows:
            w.writerow([r.label, r.name, r.family, _fmt(r.dice), _fmt(r.hausdorff_mm),
                        r.n_pred, r.n_ref])
        for fam, vals in self.families.items():
            w.writerow(["", f"mean:{fam}", fam, _fmt(vals["dice"]), _fmt(vals["hausdorff_mm"]),
                        "", ""])


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def evaluate(pred: LabelVolume, ref: LabelVolume, families: dict | None = None,
             labels=None, include_background: bool = False) -> MetricReport:
    """Per-region Dice and mean Hausdorff plus per-family means."""
    _same_grid(pred, ref)
    families = families or {}
    if labels is None:
        labels = sorted(set(ref.label_table) | set(np.unique(pred.labels).tolist())
                        | set(np.unique(ref.labels).tolist()))
    rows = []
    for c in labels:
        if c == 0 and not include_background:
            continue
        name = ref.label_table.get(c, pred.label_table.get(c, f"label_{c}"))
        rows.append(RegionRow(int(c), name, families.get(c, ""), dice(pred, ref, c),
                              mean_hausdorff(pred, ref, c), int((pred.labels == c).sum()),
                              int((ref.labels == c).sum())))
    fam_means = {}
    for fam in sorted({r.family for r in rows if r.family}):
        ds = [r.dice for r in rows if r.family == fam and r.dice is not None]
        hs = [r.hausdorff_mm for r in rows if r.family == fam and r.hausdorff_mm is not None]
        fam_means[fam] = {"dice": float(np.mean(ds)) if ds else None,
                          "hausdorff_mm": float(np.mean(hs)) if hs else None}
    return MetricReport(rows, fam_means)
