"""Synthetic multi-region brain phantoms with exact ground truth.

Geometry is specified in world millimetres; the phantom affine puts the world
origin at the centre of the grid. Every random draw (geometry jitter, Rician
noise) comes from ``numpy.random.Generator(numpy.random.Philox(seed))`` so a
phantom regenerates byte-identically on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import as_list, parse_text
from .dti import matrix_to_components, tensor_design_rows
from .errors import SpecError
from .volume import GradientTable, LabelVolume, Volume, multishell_table, voxel_to_world

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}
PRIMITIVES = ("sphere", "ellipsoid", "box", "cylinder")


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class TissueSpec:
    """Diffusion properties of one label.

    ``orientation`` is a 3-vector, an axis name (``"x"``, ``"y"``, ``"z"``),
    ``"radial"`` (principal axis pointing away from the origin) or
    ``"tangential"`` (circling the z axis).
    """

    label: int
    name: str
    evals: tuple = (0.7e-3, 0.7e-3, 0.7e-3)
    orientation: object = "z"
    s0: float = 1000.0
    family: str = ""

    def __post_init__(self):
        if len(self.evals) != 3 or min(self.evals) <= 0:
            raise SpecError(f"tissue {self.name!r}: eigenvalues must be three positive numbers")
        if not self.s0 > 0:
            raise SpecError(f"tissue {self.name!r}: s0 must be positive")
        if isinstance(self.orientation, str):
            if self.orientation not in (*_AXES, "radial", "tangential"):
                raise SpecError(f"tissue {self.name!r}: unknown orientation {self.orientation!r}")
        elif np.linalg.norm(self.orientation) == 0:
            raise SpecError(f"tissue {self.name!r}: zero orientation vector")

    @property
    def tensor(self) -> np.ndarray:
        """The 3x3 tensor for spatially fixed orientations."""
        if self.orientation in ("radial", "tangential"):
            raise SpecError(f"tissue {self.name!r} is spatially oriented; use tensor_at")
        return self.tensor_at(np.zeros((1, 3)))[0]

    def tensor_at(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        e1 = _principal_axis(self.orientation, points)
        # complete an orthonormal frame around e1
        helper = np.where(np.abs(e1[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
        e2 = np.cross(e1, helper)
        e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
        e3 = np.cross(e1, e2)
        l1, l2, l3 = self.evals
        return (l1 * e1[:, :, None] * e1[:, None, :]
                + l2 * e2[:, :, None] * e2[:, None, :]
                + l3 * e3[:, :, None] * e3[:, None, :])


def _principal_axis(orientation, points) -> np.ndarray:
    n = len(points)
    if isinstance(orientation, str) and orientation in _AXES:
        return np.tile(np.array(_AXES[orientation]), (n, 1))
    if isinstance(orientation, str):
        if orientation == "radial":
            v = points.copy()
            fallback = np.array([0.0, 0.0, 1.0])
        else:
            v = np.stack([-points[:, 1], points[:, 0], np.zeros(n)], axis=1)
            fallback = np.array([1.0, 0.0, 0.0])
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        small = norm[:, 0] < 1e-9
        v[small] = fallback
        norm[small] = 1.0
        return v / norm
    v = np.asarray(orientation, dtype=np.float64)
    return np.tile(v / np.linalg.norm(v), (n, 1))


@dataclass(frozen=True)
class Region:
    """A geometric primitive painting ``label``.

    sphere: ``radii[0]`` is the radius. ellipsoid: axis-aligned semi-axes.
    box: half-extents. cylinder: ``radii = (radius, half_length)`` along ``axis``.
    """

    kind: str
    center: tuple
    radii: tuple
    label: int
    axis: str = "z"

    def __post_init__(self):
        if self.kind not in PRIMITIVES:
            raise SpecError(f"unknown primitive {self.kind!r}")
        if any(r <= 0 for r in self.radii):
            raise SpecError(f"degenerate {self.kind}: non-positive radius {self.radii}")

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        d = xyz - np.asarray(self.center, dtype=np.float64)
        r = np.asarray(self.radii, dtype=np.float64)
        if self.kind == "sphere":
            return np.sum(d * d, axis=-1) <= r[0] ** 2
        if self.kind == "ellipsoid":
            return np.sum((d / r[:3]) ** 2, axis=-1) <= 1.0
        if self.kind == "box":
            return np.all(np.abs(d) <= r[:3], axis=-1)
        ax = "xyz".index(self.axis)
        radial = [i for i in range(3) if i != ax]
        return ((np.sum(d[..., radial] ** 2, axis=-1) <= r[0] ** 2)
                & (np.abs(d[..., ax]) <= r[1]))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    voxel_size: tuple = (1.25, 1.25, 1.25)
    regions: tuple = ()
    tissues: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def affine(self) -> np.ndarray:
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        affine = np.diag(list(vs) + [1.0])
        affine[:3, 3] = -(np.asarray(self.dims) - 1) / 2.0 * vs
        return affine

    @property
    def label_table(self) -> dict:
        table = {0: "background"}
        table.update({t.label: t.name for t in self.tissues})
        return dict(sorted(table.items()))

    @property
    def families(self) -> dict:
        return {t.label: t.family for t in self.tissues if t.family}

    def tissue_list(self) -> list[TissueSpec]:
        return list(self.tissues)


def generate_labels(spec: PhantomSpec) -> LabelVolume:
    """Paint the regions in order (later ones override earlier)."""
    if any(d < 1 for d in spec.dims):
        raise SpecError(f"dims must be positive, got {spec.dims}")
    if len(spec.regions) < 1:
        raise SpecError("phantom needs at least one region")
    ijk = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), axis=-1)
    xyz = voxel_to_world(spec.affine, ijk)
    labels = np.zeros(spec.dims, dtype=np.int32)
    for region in spec.regions:
        labels[region.contains(xyz)] = region.label
    table = spec.label_table
    for v in np.unique(labels):
        table.setdefault(int(v), f"label_{v}")
    return LabelVolume(labels, spec.affine, table)


def tensor_field(labels: LabelVolume, tissues) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel tensor components (X, Y, Z, 6) and s0 (X, Y, Z)."""
    by_label = {t.label: t for t in tissues}
    lab = labels.labels
    missing = sorted(int(v) for v in np.unique(lab) if int(v) not in by_label)
    if missing:
        raise SpecError(f"no tissue specified for labels {missing}")
    comps = np.zeros(lab.shape + (6,))
    s0 = np.zeros(lab.shape)
    for value, tissue in by_label.items():
        sel = lab == value
        if not sel.any():
            continue
        pts = voxel_to_world(labels.affine, np.argwhere(sel))
        comps[sel] = matrix_to_components(tissue.tensor_at(pts))
        s0[sel] = tissue.s0
    return comps, s0


def simulate_dwi(labels: LabelVolume, tissues, table: GradientTable,
                 noise_sigma: float = 0.0, seed: int = 0) -> Volume:
    """Gaussian-diffusion signals ``s0 * exp(-b g^T D g)`` with optional Rician noise.

    Noise is the magnitude of the signal plus two independent N(0, sigma)
    channels, drawn channel by channel in table order.
    """
    comps, s0 = tensor_field(labels, tissues)
    rows = tensor_design_rows(table.bvals, table.bvecs)  # (n, 6); b=0 rows are zero
    flat = comps.reshape(-1, 6)
    s0f = s0.reshape(-1)
    out = np.empty((flat.shape[0], table.n), dtype=np.float32)
    rng = rng_for(seed) if noise_sigma > 0 else None
    for i in range(table.n):
        s = s0f * np.exp(flat @ rows[i])
        if rng is not None:
            re = rng.normal(0.0, noise_sigma, size=s.shape)
            im = rng.normal(0.0, noise_sigma, size=s.shape)
            s = np.sqrt((s + re) ** 2 + im ** 2)
        out[:, i] = s
    return Volume(out.reshape(labels.dims + (table.n,)), labels.affine)


# --- default brain-like family -------------------------------------------------

FAMILIES = ("cortical", "wm", "subcortical")


def brain_tissues() -> tuple:
    """Eight-label tissue set mirroring cortical / white-matter / subcortical groups.

    The two tract labels share s0 and mean diffusivity with white matter (so a
    b=0 image cannot see them) and share FA with each other (so only the
    tensor orientation separates them).
    """
    return (
        TissueSpec(0, "background", (3.0e-3, 3.0e-3, 3.0e-3), "z", 1.0, ""),
        TissueSpec(1, "cortex", (1.0e-3, 0.8e-3, 0.75e-3), "radial", 1000.0, "cortical"),
        TissueSpec(2, "white_matter", (1.3e-3, 0.55e-3, 0.5e-3), "z", 750.0, "wm"),
        TissueSpec(3, "tract_lr", (1.6e-3, 0.4e-3, 0.35e-3), "x", 750.0, "wm"),
        TissueSpec(4, "tract_ap", (1.6e-3, 0.4e-3, 0.35e-3), "y", 750.0, "wm"),
        TissueSpec(5, "ventricles", (3.0e-3, 3.0e-3, 3.0e-3), "z", 1600.0, "subcortical"),
        TissueSpec(6, "thalamus", (1.0e-3, 0.75e-3, 0.65e-3), "z", 880.0, "subcortical"),
        TissueSpec(7, "putamen", (0.85e-3, 0.75e-3, 0.7e-3), "x", 1150.0, "subcortical"),
    )


def brain_phantom(seed: int = 0, dims=(64, 64, 64), voxel_size=1.25,
                  noise_sigma: float = 50.0) -> PhantomSpec:
    """One member of the default phantom family.

    The seed jitters the global scale and position and decides on which side of
    the midline each of the two equally shaped tract blobs sits.
    """
    dims = tuple(int(d) for d in np.broadcast_to(dims, 3))
    vs = tuple(float(v) for v in np.broadcast_to(voxel_size, 3))
    half = min(d * v for d, v in zip(dims, vs)) / 2.0
    rng = rng_for(seed)
    scale = rng.uniform(0.92, 1.04)
    shift = rng.uniform(-0.05, 0.05, size=3) * half
    swap = bool(rng.integers(0, 2))
    tract_z = rng.uniform(0.23, 0.27)

    def at(*p):
        return tuple(np.asarray(p) * half * scale + shift)

    def size(*r):
        return tuple(np.asarray(r) * half * scale)

    brain = np.array([0.85, 0.75, 0.70])
    left, right = (3, 4) if not swap else (4, 3)
    regions = (
        Region("ellipsoid", at(0, 0, 0), size(*brain), 1),
        Region("ellipsoid", at(0, 0, 0), size(*(brain * 0.76)), 2),
        Region("ellipsoid", at(-0.28, 0.0, tract_z), size(0.22, 0.22, 0.16), left),
        Region("ellipsoid", at(0.28, 0.0, tract_z), size(0.22, 0.22, 0.16), right),
        Region("ellipsoid", at(0, 0, 0.02), size(0.16, 0.34, 0.15), 5),
        Region("sphere", at(-0.20, -0.05, -0.24), size(0.17), 6),
        Region("sphere", at(0.20, -0.05, -0.24), size(0.17), 6),
        Region("ellipsoid", at(-0.47, 0.12, -0.12), size(0.10, 0.22, 0.15), 7),
        Region("ellipsoid", at(0.47, 0.12, -0.12), size(0.10, 0.22, 0.15), 7),
    )
    return PhantomSpec(dims, vs, regions, brain_tissues(), float(noise_sigma), int(seed))


@dataclass
class Phantom:
    spec: PhantomSpec
    labels: LabelVolume
    dwi: Volume
    table: GradientTable
    families: dict = field(default_factory=dict)


def make_phantom(spec: PhantomSpec, table: GradientTable | None = None) -> Phantom:
    table = table if table is not None else multishell_table()
    labels = generate_labels(spec)
    dwi = simulate_dwi(labels, spec.tissues, table, spec.noise_sigma, spec.seed)
    return Phantom(spec, labels, dwi, table, spec.families)


# --- spec files ----------------------------------------------------------------

def spec_to_dict(spec: PhantomSpec) -> dict:
    def orient(o):
        return o if isinstance(o, str) else [float(x) for x in o]

    return {
        "dims": list(spec.dims),
        "voxel_size": list(spec.voxel_size),
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "tissues": [
            {"label": t.label, "name": t.name, "evals": list(t.evals),
             "orientation": orient(t.orientation), "s0": t.s0, "family": t.family}
            for t in spec.tissues
        ],
        "regions": [
            {"kind": r.kind, "center": [float(c) for c in r.center],
             "radii": [float(x) for x in r.radii], "label": r.label, "axis": r.axis}
            for r in spec.regions
        ],
    }


def spec_from_dict(d: dict) -> PhantomSpec:
    """Build a spec from a parsed JSON document.

    ``{"preset": "brain", "seed": 3, ...}`` expands to :func:`brain_phantom`
    (optional keys: dims, voxel_size, noise_sigma); otherwise the explicit
    ``dims/voxel_size/tissues/regions`` form is expected.
    """
    try:
        if d.get("preset") == "brain":
            return brain_phantom(int(d.get("seed", 0)), d.get("dims", 64),
                                 d.get("voxel_size", 1.25), float(d.get("noise_sigma", 50.0)))
        if "preset" in d:
            raise SpecError(f"unknown preset {d['preset']!r}")
        tissues = tuple(
            TissueSpec(int(t["label"]), str(t["name"]), tuple(t["evals"]),
                       t.get("orientation", "z"), float(t.get("s0", 1000.0)),
                       str(t.get("family", "")))
            for t in d["tissues"]
        )
        regions = tuple(
            Region(r["kind"], tuple(r["center"]), tuple(r["radii"]), int(r["label"]),
                   r.get("axis", "z"))
            for r in d["regions"]
        )
        return PhantomSpec(tuple(int(x) for x in np.broadcast_to(d["dims"], 3)),
                           tuple(float(x) for x in np.broadcast_to(d["voxel_size"], 3)),
                           regions, tissues, float(d.get("noise_sigma", 0.0)),
                           int(d.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"invalid phantom spec: {exc}") from exc


def _kv_spec(text: str, source: str) -> dict:
    raw = parse_text(text, source)
    d: dict = dict(raw)
    for key in ("dims", "voxel_size", "shells"):
        if key in raw:
            vals = as_list(raw[key], float)
            d[key] = vals if len(vals) > 1 else vals[0]
    if "dims" in d:
        d["dims"] = [int(x) for x in np.atleast_1d(d["dims"])]
    for key, cast in (("seed", int), ("per_shell", int), ("n_b0", int), ("noise_sigma", float)):
        if key in raw:
            try:
                d[key] = cast(raw[key])
            except ValueError as exc:
                raise SpecError(f"{source}: bad {key}: {raw[key]!r}") from exc
    if "shells" in d:
        d["shells"] = [float(x) for x in np.atleast_1d(d["shells"])]
    return d


def load_spec(path) -> tuple[PhantomSpec, dict]:
    """Read a phantom spec file; returns the spec and the gradient-table options.

    JSON documents (see :func:`spec_from_dict`) and ``key = value`` files are
    accepted. The latter describe the preset only::

        preset = brain
        seed = 3
        dims = 64
        voxel_size = 1.25
        noise_sigma = 50
        shells = 1000, 2000, 3000   # gradient table
        per_shell = 90
        n_b0 = 18
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read phantom spec {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from exc
    else:
        d = _kv_spec(text, str(path))
        d.setdefault("preset", "brain")
    table_opts = {k: d[k] for k in ("shells", "per_shell", "n_b0") if k in d}
    return spec_from_dict(d), table_opts


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=int(seed))
