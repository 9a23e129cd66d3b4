"""Network input representations and per-view slice stacks.

Channel order of a representation: the mean b=0 image first, then FA, the six
tensor components (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) or the selected DWIs in
ascending table order. Every channel is rescaled to [0, 1] between its 0.5th
and 99.5th percentile (clamped); the bounds are recorded on the returned spec
so inference can reuse exactly the training transform.

Views map to array axes as SAGITTAL=0 (x), CORONAL=1 (y), AXIAL=2 (z). A slice
sample stacks 2k+1 neighbouring slices per base channel, contiguous per
channel, replicating the edge slice beyond the volume boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dti
from .errors import ContextError, DataError, ShapeError, ValidationError
from .volume import GradientTable, LabelVolume, Volume

KINDS = ("B0_ONLY", "B0_FA", "B0_TENSOR", "B0_DWI")
VIEWS = {"sagittal": 0, "coronal": 1, "axial": 2}
PERCENTILES = (0.5, 99.5)


@dataclass(frozen=True)
class RepresentationSpec:
    kind: str = "B0_TENSOR"
    ndirs: int = 30
    shell_b: float | None = 1000.0  # None: every diffusion-weighted image, all shells
    normalization: tuple | None = None  # ((lo, hi), ...) per channel

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown representation kind {self.kind!r}")
        if self.shell_b is None and self.kind not in ("B0_TENSOR", "B0_FA"):
            raise ValidationError(f"{self.kind} cannot use all shells")
        if self.shell_b is None:
            object.__setattr__(self, "ndirs", 0)
        elif self.kind != "B0_ONLY" and self.ndirs < (6 if self.kind != "B0_DWI" else 1):
            raise ValidationError(f"{self.kind} needs ndirs >= 6, got {self.ndirs}")
        if self.normalization is not None and len(self.normalization) != self.channel_count:
            raise ValidationError("normalization length does not match channel count")

    @property
    def channel_count(self) -> int:
        return {"B0_ONLY": 1, "B0_FA": 2, "B0_TENSOR": 7}.get(self.kind, 1 + self.ndirs)

    @property
    def name(self) -> str:
        if self.kind == "B0_ONLY":
            return self.kind
        return f"{self.kind}:{'all' if self.shell_b is None else self.ndirs}"

    @classmethod
    def parse(cls, text: str, shell_b: float = 1000.0) -> "RepresentationSpec":
        """``"B0_TENSOR:30"`` -> spec; a bare kind uses 30 directions and
        ``"B0_TENSOR:all"`` fits on every shell."""
        kind, _, n = text.strip().partition(":")
        n = n.strip().lower()
        try:
            if n == "all":
                return cls(kind.strip().upper(), 0, None)
            return cls(kind.strip().upper(), int(n) if n else 30, shell_b)
        except ValueError:
            raise ValidationError(f"bad representation {text!r}") from None


def rescale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def robust_bounds(x: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(x, PERCENTILES)
    lo, hi = float(lo), float(hi)
    if not hi > lo:
        hi = lo + 1.0
    return lo, hi


def channel_names(spec: RepresentationSpec, directions=()) -> list[str]:
    if spec.kind == "B0_ONLY":
        return ["b0_mean"]
    if spec.kind == "B0_FA":
        return ["b0_mean", "FA"]
    if spec.kind == "B0_TENSOR":
        return ["b0_mean", *dti.COMPONENTS]
    return ["b0_mean", *[f"dwi_{i}" for i in directions]]


def raw_channels(dwi: Volume, table: GradientTable, spec: RepresentationSpec):
    """Unnormalised channels (X, Y, Z, C) float64 and the direction indices used."""
    if dwi.channels != table.n:
        raise ShapeError(f"DWI has {dwi.channels} channels, table has {table.n}")
    b0 = table.b0_indices(dti.B0_TOL)
    if len(b0) == 0:
        raise DataError("representation needs at least one b=0 image")
    data = dwi.data
    mean_b0 = data[..., b0].astype(np.float64).mean(axis=-1)
    if spec.kind == "B0_ONLY":
        return mean_b0[..., None], []
    if spec.shell_b is None:
        dirs = sorted(set(range(table.n)) - set(b0.tolist()))
    else:
        dirs = dti.select_directions(table, spec.shell_b, spec.ndirs)
    if spec.kind == "B0_DWI":
        chans = [mean_b0[..., None], data[..., dirs].astype(np.float64)]
        return np.concatenate(chans, axis=-1), dirs
    keep = sorted(b0.tolist() + dirs)
    tensor = dti.fit_tensor(dwi.select_channels(keep), table.subset(keep))
    if spec.kind == "B0_TENSOR":
        return np.concatenate([mean_b0[..., None], tensor.components], axis=-1), dirs
    fa = dti.fractional_anisotropy(dti.eigen_decompose(tensor).eigenvalues)
    return np.stack([mean_b0, fa], axis=-1), dirs


def build_representation(dwi: Volume, table: GradientTable,
                         spec: RepresentationSpec) -> tuple[Volume, RepresentationSpec]:
    """Build and normalise the input channels for ``spec``.

    If ``spec.normalization`` is set it is applied as-is; otherwise bounds are
    estimated from this volume. Returns the volume and the spec carrying the
    bounds that were used.
    """
    raw, _ = raw_channels(dwi, table, spec)
    bounds = spec.normalization
    if bounds is None:
        bounds = tuple(robust_bounds(raw[..., c]) for c in range(raw.shape[-1]))
    out = np.empty(raw.shape, dtype=np.float32)
    for c, (lo, hi) in enumerate(bounds):
        out[..., c] = rescale(raw[..., c], lo, hi)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite values after normalisation")
    return Volume(out, dwi.affine), replace(spec, normalization=tuple(
        (float(lo), float(hi)) for lo, hi in bounds))


def write_sidecar(path, spec: RepresentationSpec, table: GradientTable | None = None) -> None:
    dirs = []
    if table is not None and spec.kind == "B0_DWI":
        dirs = dti.select_directions(table, spec.shell_b, spec.ndirs)
    doc = {
        "kind": spec.kind,
        "ndirs": spec.ndirs,
        "shell_b": spec.shell_b,
        "channels": channel_names(spec, dirs),
        "normalization": [list(b) for b in (spec.normalization or ())],
        "percentiles": list(PERCENTILES),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_sidecar(path) -> RepresentationSpec:
    doc = json.loads(Path(path).read_text())
    norm = doc.get("normalization") or None
    shell = doc.get("shell_b")
    return RepresentationSpec(doc["kind"], int(doc["ndirs"]),
                              None if shell is None else float(shell),
                              tuple(tuple(b) for b in norm) if norm else None)


# --- slices -------------------------------------------------------------------

@dataclass
class SliceSample:
    view: str
    index: int
    input: np.ndarray  # (C * (2k+1), H, W)
    label: np.ndarray  # (H, W)
    weight: np.ndarray  # (H, W)


def view_axis(view: str) -> int:
    try:
        return VIEWS[view.lower()]
    except KeyError:
        raise ValidationError(f"unknown view {view!r}; expected one of {list(VIEWS)}") from None


def to_view(arr: np.ndarray, view: str) -> np.ndarray:
    """Move the view axis first: (X, Y, Z, ...) -> (L, H, W, ...)."""
    return np.moveaxis(arr, view_axis(view), 0)


def from_view(arr: np.ndarray, view: str) -> np.ndarray:
    return np.moveaxis(arr, 0, view_axis(view))


def context_stack(channels: np.ndarray, view: str, k: int) -> np.ndarray:
    """All slice inputs along ``view``: (L, C*(2k+1), H, W), edge-replicated."""
    padded = _padded_view(channels, view, k)
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * k + 1, axis=0)
    # (L, C, H, W, 2k+1) -> (L, C, 2k+1, H, W)
    win = np.moveaxis(win, -1, 2)
    n, c, s, h, w = win.shape
    return win.reshape(n, c * s, h, w)


def extract_slices(rep: Volume, labels: LabelVolume, weights, view: str,
                   k: int = 3) -> list[SliceSample]:
    lab = labels.labels
    wts = np.asarray(getattr(weights, "data", weights), dtype=np.float32)
    if rep.dims != lab.shape or wts.shape != lab.shape:
        raise ShapeError("representation, labels and weights must share dims")
    inputs = context_stack(rep.data, view, k)
    lab_v, w_v = to_view(lab, view), to_view(wts, view)
    return [SliceSample(view, i, inputs[i], lab_v[i], w_v[i]) for i in range(len(inputs))]


def center_channels(samples: list[SliceSample], base_channels: int, k: int) -> np.ndarray:
    """Inverse of slicing for the centre slices: rebuild (X, Y, Z, C)."""
    view = samples[0].view
    stack = np.stack([s.input for s in samples])  # (L, C*(2k+1), H, W)
    centers = stack[:, k::2 * k + 1][:, :base_channels]  # (L, C, H, W)
    return from_view(np.moveaxis(centers, 1, -1), view)


def _padded_view(channels: np.ndarray, view: str, k: int) -> np.ndarray:
    data = channels if channels.ndim == 4 else channels[..., None]
    v = to_view(data, view)
    if k < 0 or k >= v.shape[0]:
        raise ContextError(f"context half-width {k} invalid for axis of length {v.shape[0]}")
    v = np.ascontiguousarray(np.moveaxis(v, -1, 1))  # (L, C, H, W)
    return np.concatenate([np.repeat(v[:1], k, 0), v, np.repeat(v[-1:], k, 0)], axis=0)


class SliceDataset:
    """Subjects sliced along one view; context stacks are gathered per batch."""

    def __init__(self, subjects, view: str, k: int = 3):
        # subjects: iterable of (rep (X,Y,Z,C), class-index labels (X,Y,Z), weights (X,Y,Z))
        self.view, self.k = view, k
        self.padded, self.targets, self.weights = [], [], []
        shape = None
        for rep, lab, wts in subjects:
            padded = _padded_view(np.asarray(rep, dtype=np.float32), view, k)
            if shape is None:
                shape = padded.shape[1:]
            elif padded.shape[1:] != shape:
                raise ShapeError("all subjects must share dims and channels")
            self.padded.append(padded)
            self.targets.append(np.ascontiguousarray(to_view(np.asarray(lab), view))
                                .astype(np.int64))
            self.weights.append(np.ascontiguousarray(to_view(np.asarray(wts), view))
                                .astype(np.float32))
        self.index = [(s, i) for s, t in enumerate(self.targets) for i in range(len(t))]

    def __len__(self):
        return len(self.index)

    @property
    def channels(self) -> int:
        return self.padded[0].shape[1] * (2 * self.k + 1)

    def _input(self, s: int, i: int) -> np.ndarray:
        win = self.padded[s][i:i + 2 * self.k + 1]  # (2k+1, C, H, W)
        win = win.transpose(1, 0, 2, 3)
        return win.reshape(-1, *win.shape[2:])

    def batch(self, positions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sel = [self.index[p] for p in positions]
        x = np.stack([self._input(s, i) for s, i in sel])
        y = np.stack([self.targets[s][i] for s, i in sel])
        w = np.stack([self.weights[s][i] for s, i in sel])
        return x, y, w
