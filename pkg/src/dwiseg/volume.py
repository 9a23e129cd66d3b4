"""Volumetric data model, voxel/world geometry and gradient tables.

Arrays are indexed ``[i, j, k]`` (scalar) or ``[i, j, k, c]`` (multi-channel),
i.e. x varies fastest on disk, which is NIfTI's native order. Volumes are
treated as immutable: the constructor marks the backing array read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeError, ValidationError


def _check_affine(affine) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise GeometryError(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise GeometryError("affine has a singular 3x3 block")
    return affine


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.view()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar or 4D multi-channel grid.

    ``data`` has shape ``dims`` or ``dims + (channels,)``; 32-bit float storage.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (3, 4) or min(data.shape) < 1:
            raise ShapeError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "affine", _frozen(_check_affine(self.affine)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else int(self.data.shape[3])

    @property
    def voxel_size(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def channel(self, c: int) -> np.ndarray:
        if self.data.ndim == 3:
            if c != 0:
                raise IndexError(c)
            return self.data
        return self.data[..., c]

    def select_channels(self, indices) -> "Volume":
        idx = np.asarray(indices, dtype=int)
        if self.data.ndim == 3:
            base = self.data[..., None]
        else:
            base = self.data
        return Volume(np.ascontiguousarray(base[..., idx]), self.affine)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label map; label 0 is background."""

    labels: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    label_table: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeError(f"label volume must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValidationError("label volume holds non-integer values")
        labels = labels.astype(np.int32, copy=False)
        if labels.size and labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        table = {int(k): str(v) for k, v in self.label_table.items()}
        present = np.unique(labels)
        if not table:
            table = {int(v): ("background" if v == 0 else f"label_{v}") for v in present}
        missing = [int(v) for v in present if int(v) not in table]
        if missing:
            raise ValidationError(f"labels {missing} missing from label table")
        table.setdefault(0, "background")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "affine", _frozen(_check_affine(self.affine)))
        object.__setattr__(self, "label_table", dict(sorted(table.items())))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def voxel_to_world(affine, ijk) -> np.ndarray:
    """Map voxel coordinates (..., 3) to world mm."""
    affine = np.asarray(affine, dtype=np.float64)
    ijk = np.asarray(ijk, dtype=np.float64)
    return ijk @ affine[:3, :3].T + affine[:3, 3]


def world_to_voxel(v, point) -> np.ndarray:
    """Continuous voxel coordinates of a world point (or an (..., 3) array of points).

    ``v`` may be a Volume/LabelVolume or a bare 4x4 affine.
    """
    affine = np.asarray(getattr(v, "affine", v), dtype=np.float64)
    block = affine[:3, :3]
    if abs(np.linalg.det(block)) < 1e-12:
        raise GeometryError("cannot invert singular affine")
    point = np.asarray(point, dtype=np.float64)
    return np.linalg.solve(block, (point - affine[:3, 3]).T).T


@dataclass(frozen=True, eq=False)
class GradientTable:
    """Per-image b-values (s/mm^2) and gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise ValidationError(f"{len(bvals)} b-values but {len(bvecs)} directions")
        if np.any(bvals < 0):
            raise ValidationError("negative b-value")
        norms = np.linalg.norm(bvecs, axis=1)
        bad = (bvals > 0) & (np.abs(norms - 1.0) > 1e-3)
        if np.any(bad):
            raise ValidationError(f"non-unit directions at indices {np.flatnonzero(bad).tolist()}")
        object.__setattr__(self, "bvals", _frozen(bvals))
        object.__setattr__(self, "bvecs", _frozen(bvecs))

    @property
    def n(self) -> int:
        return len(self.bvals)

    def __len__(self):
        return self.n

    def b0_indices(self, tol: float = 50.0) -> np.ndarray:
        return np.flatnonzero(self.bvals <= tol)

    def shell_indices(self, shell_b: float, tol: float = 50.0) -> np.ndarray:
        return np.flatnonzero((np.abs(self.bvals - shell_b) <= tol) & (self.bvals > tol))

    def subset(self, indices) -> "GradientTable":
        idx = np.asarray(indices, dtype=int)
        return GradientTable(self.bvals[idx], self.bvecs[idx])


def normalized_table(bvals, bvecs) -> GradientTable:
    """Build a table, rescaling every nonzero direction to unit length."""
    bvecs = np.array(bvecs, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(bvecs, axis=1)
    nz = norms > 0
    bvecs[nz] /= norms[nz, None]
    return GradientTable(bvals, bvecs)


def fibonacci_hemisphere(n: int, rotation=None) -> np.ndarray:
    """``n`` approximately uniform unit directions on the upper hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rotation is not None:
        dirs = dirs @ np.asarray(rotation).T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _rotation_z_x(angle_z: float, angle_x: float) -> np.ndarray:
    cz, sz = np.cos(angle_z), np.sin(angle_z)
    cx, sx = np.cos(angle_x), np.sin(angle_x)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ rx


def multishell_table(shells=(1000.0, 2000.0, 3000.0), per_shell: int = 90,
                     n_b0: int = 18) -> GradientTable:
    """Multi-shell protocol with b=0 images interleaved evenly among the DWIs.

    The defaults give the 288-image layout of the HCP diffusion protocol
    (18 b=0 + 3 shells x 90 directions). Each shell's directions are rotated
    slightly so shells do not share directions.
    """
    dwi_b, dwi_g = [], []
    for s, b in enumerate(shells):
        rot = _rotation_z_x(0.37 * s, 0.11 * s)
        dwi_g.append(fibonacci_hemisphere(per_shell, rot))
        dwi_b.append(np.full(per_shell, float(b)))
    dwi_b = np.concatenate(dwi_b) if dwi_b else np.zeros(0)
    dwi_g = np.concatenate(dwi_g) if dwi_g else np.zeros((0, 3))
    n = len(dwi_b) + n_b0
    b0_slots = {i * n // n_b0 for i in range(n_b0)}
    bvals, bvecs = [], []
    k = 0
    for pos in range(n):
        if pos in b0_slots:
            bvals.append(0.0)
            bvecs.append(np.zeros(3))
        else:
            bvals.append(dwi_b[k])
            bvecs.append(dwi_g[k])
            k += 1
    return GradientTable(np.array(bvals), np.array(bvecs))
