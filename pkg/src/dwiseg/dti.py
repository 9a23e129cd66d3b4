"""Diffusion tensor estimation, eigen-analysis and direction subsets.

Tensor components are always ordered ``(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`` in
mm^2/s. The fit is ordinary least squares on log signals; all b=0 images are
averaged into a single row of the design matrix first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitDesignError, SelectionError, ShapeError, ValidationError
from .volume import GradientTable, Volume

COMPONENTS = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")
B0_TOL = 50.0
_CHUNK = 1 << 16


@dataclass(frozen=True, eq=False)
class TensorVolume:
    components: np.ndarray  # (X, Y, Z, 6) float64
    s0: np.ndarray  # (X, Y, Z)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    failed: np.ndarray | None = None  # voxels where every signal was <= 0

    @property
    def dims(self):
        return tuple(self.components.shape[:3])

    @property
    def voxel_size(self):
        return np.linalg.norm(np.asarray(self.affine)[:3, :3], axis=0)

    def matrices(self) -> np.ndarray:
        return components_to_matrix(self.components)


@dataclass(frozen=True, eq=False)
class EigenVolume:
    eigenvalues: np.ndarray  # (X, Y, Z, 3), descending
    principal_direction: np.ndarray  # (X, Y, Z, 3)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    n_nonfinite: int = 0


def components_to_matrix(comp) -> np.ndarray:
    comp = np.asarray(comp, dtype=np.float64)
    xx, xy, xz, yy, yz, zz = np.moveaxis(comp, -1, 0)
    return np.stack([
        np.stack([xx, xy, xz], -1),
        np.stack([xy, yy, yz], -1),
        np.stack([xz, yz, zz], -1),
    ], -2)


def matrix_to_components(mat) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    return np.stack([mat[..., 0, 0], mat[..., 0, 1], mat[..., 0, 2],
                     mat[..., 1, 1], mat[..., 1, 2], mat[..., 2, 2]], -1)


def tensor_design_rows(bvals, bvecs) -> np.ndarray:
    """Rows ``-b * [gx^2, 2gxgy, 2gxgz, gy^2, 2gygz, gz^2]`` so that ``rows @ D6 = -b g^T D g``."""
    b = np.asarray(bvals, dtype=np.float64)[:, None]
    g = np.asarray(bvecs, dtype=np.float64)
    gx, gy, gz = g[:, 0:1], g[:, 1:2], g[:, 2:3]
    quad = np.hstack([gx * gx, 2 * gx * gy, 2 * gx * gz, gy * gy, 2 * gy * gz, gz * gz])
    return -b * quad


def design_matrix(table: GradientTable) -> np.ndarray:
    """OLS design matrix for unknowns (ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz).

    Row 0 is the averaged b=0 measurement; the remaining rows are the DWIs in
    table order.
    """
    dwi = np.flatnonzero(table.bvals > B0_TOL)
    rows = tensor_design_rows(table.bvals[dwi], table.bvecs[dwi])
    top = np.zeros((1, 6))
    return np.hstack([np.ones((1 + len(dwi), 1)), np.vstack([top, rows])])


def _check_design(table: GradientTable) -> np.ndarray:
    b0 = table.b0_indices(B0_TOL)
    if len(b0) < 1:
        raise FitDesignError("tensor fit needs at least one b=0 image")
    X = design_matrix(table)
    if X.shape[0] < 7 or np.linalg.matrix_rank(X) < 7:
        raise FitDesignError(
            f"design matrix rank {np.linalg.matrix_rank(X)} < 7: directions do not span "
            "the six tensor components"
        )
    return X


def fit_tensor(dwi: Volume, table: GradientTable, mask=None) -> TensorVolume:
    """Log-linear OLS tensor fit at every masked voxel.

    ``mask`` is a LabelVolume (nonzero = fit), a boolean array, or None for all
    voxels. Signals <= 0 are clamped to ``1e-6 * S0`` before the log, where S0
    is the voxel's reference signal (mean b=0, or the largest signal when the
    b=0 mean is not positive). Voxels whose signals are all <= 0 are zeroed
    and reported in ``failed``.
    """
    if dwi.channels != table.n:
        raise ShapeError(f"DWI has {dwi.channels} channels but table has {table.n} entries")
    X = _check_design(table)
    pinv = np.linalg.pinv(X)  # (7, m)

    dims = dwi.dims
    if mask is None:
        m = np.ones(dims, dtype=bool)
    else:
        m = np.asarray(getattr(mask, "labels", mask)) != 0
        if m.shape != dims:
            raise ShapeError(f"mask dims {m.shape} do not match DWI dims {dims}")

    b0 = table.b0_indices(B0_TOL)
    dw = np.flatnonzero(table.bvals > B0_TOL)
    data = dwi.data.reshape(-1, table.n)
    idx = np.flatnonzero(m.reshape(-1, order="C"))
    flat_dims = int(np.prod(dims))

    comps = np.zeros((flat_dims, 6))
    lns0 = np.zeros(flat_dims)
    failed = np.zeros(flat_dims, dtype=bool)
    for start in range(0, len(idx), _CHUNK):
        sel = idx[start:start + _CHUNK]
        sig = data[sel].astype(np.float64)
        s = np.empty((len(sel), 1 + len(dw)))
        s[:, 0] = sig[:, b0].mean(axis=1)
        s[:, 1:] = sig[:, dw]
        bad = np.all(s <= 0, axis=1)
        ref = np.where(s[:, 0] > 0, s[:, 0], s.max(axis=1))
        floor = 1e-6 * np.where(ref > 0, ref, 1.0)
        logs = np.log(np.maximum(s, floor[:, None]))
        beta = logs @ pinv.T
        beta[bad] = 0.0
        comps[sel] = beta[:, 1:]
        lns0[sel] = np.where(bad, 0.0, beta[:, 0])
        failed[sel] = bad
    s0 = np.where(m.reshape(-1) & ~failed, np.exp(lns0), 0.0)
    return TensorVolume(
        components=comps.reshape(dims + (6,)),
        s0=s0.reshape(dims),
        affine=np.asarray(dwi.affine),
        failed=failed.reshape(dims),
    )


def eigen_decompose(t: TensorVolume) -> EigenVolume:
    """Per-voxel eigenvalues (descending) and principal eigenvector.

    The principal direction's sign is fixed so its largest-magnitude component
    is positive. Non-finite voxels yield NaN and are counted.
    """
    comp = np.asarray(t.components, dtype=np.float64)
    dims = comp.shape[:-1]
    flat = comp.reshape(-1, 6)
    finite = np.all(np.isfinite(flat), axis=1)
    evals = np.full((len(flat), 3), np.nan)
    evecs = np.full((len(flat), 3), np.nan)
    if finite.any():
        w, v = np.linalg.eigh(components_to_matrix(flat[finite]))
        evals[finite] = w[:, ::-1]
        pdir = v[:, :, -1]
        big = np.argmax(np.abs(pdir), axis=1)
        sign = np.sign(pdir[np.arange(len(pdir)), big])
        sign[sign == 0] = 1.0
        evecs[finite] = pdir * sign[:, None]
    return EigenVolume(
        eigenvalues=evals.reshape(dims + (3,)),
        principal_direction=evecs.reshape(dims + (3,)),
        affine=np.asarray(t.affine),
        n_nonfinite=int((~finite).sum()),
    )


def fractional_anisotropy(evals) -> np.ndarray:
    """FA = sqrt(3/2) * |lambda - mean(lambda)| / |lambda|, clamped to [0, 1]."""
    lam = np.asarray(evals, dtype=np.float64)
    norm = np.linalg.norm(lam, axis=-1)
    dev = np.linalg.norm(lam - lam.mean(axis=-1, keepdims=True), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(1.5) * dev / norm
    fa = np.where(norm > 0, fa, 0.0)
    return np.clip(fa, 0.0, 1.0)


def fa_map(e: EigenVolume) -> Volume:
    return Volume(fractional_anisotropy(e.eigenvalues).astype(np.float32), e.affine)


def md_map(e: EigenVolume) -> Volume:
    return Volume(np.asarray(e.eigenvalues, dtype=np.float64).mean(axis=-1).astype(np.float32),
                  e.affine)


def _angular(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(np.abs(u @ v.T), 0.0, 1.0))


def select_directions(table: GradientTable, shell_b: float, k: int,
                      tol: float = B0_TOL) -> list[int]:
    """Greedy farthest-point subset of ``k`` directions on one shell.

    Distances are antipodally symmetric, ``arccos(|u.v|)``. Every pick after
    the seed maximises the distance to the already chosen set, ties going to
    the lowest index. The seed does not depend on ``k`` (see
    :func:`farthest_point_order`), so the k-subset is always contained in the
    (k+1)-subset. Returns table indices in ascending order.
    """
    if k < 1:
        raise ValidationError("k must be positive")
    shell = table.shell_indices(shell_b, tol)
    if len(shell) < k:
        raise SelectionError(f"shell b={shell_b} has {len(shell)} directions, {k} requested")
    return sorted(int(i) for i in farthest_point_order(table.bvecs[shell], k, shell))


SEED_SUBSET = 6  # smallest subset that determines a tensor


def _greedy(dirs: np.ndarray, seed: int, k: int) -> list[int]:
    chosen = [seed]
    mind = _angular(dirs, dirs[seed:seed + 1])[:, 0]
    mind[seed] = -1.0
    while len(chosen) < k:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _angular(dirs, dirs[nxt:nxt + 1])[:, 0])
        mind[chosen] = -1.0
    return chosen


def farthest_point_order(dirs: np.ndarray, k: int, labels=None) -> list:
    """Selection order of the greedy antipodal farthest-point scheme.

    The seed is the direction whose greedy 6-subset has the largest minimum
    pairwise angle (lowest index on ties): the smallest usable tensor design
    is the one most sensitive to a poor start.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    labels = np.arange(len(dirs)) if labels is None else np.asarray(labels)
    m = min(SEED_SUBSET, len(dirs))
    seed, best = 0, -1.0
    if m > 1:
        for s in range(len(dirs)):
            score = min_pairwise_angle(dirs[_greedy(dirs, s, m)])
            if score > best + 1e-12:
                seed, best = s, score
    return [labels[i] for i in _greedy(dirs, seed, k)]


def min_pairwise_angle(dirs) -> float:
    dirs = np.asarray(dirs, dtype=np.float64)
    d = _angular(dirs, dirs)
    np.fill_diagonal(d, np.inf)
    return float(d.min())

