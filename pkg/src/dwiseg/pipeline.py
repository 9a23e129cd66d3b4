"""Glue between the modules: training three view networks and segmenting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .evaluation import (DEFAULT_VIEW_WEIGHTS, ProbabilityVolume, aggregate_views,
                         argmax_labels)
from .errors import ShapeError, ValidationError
from .features import (RepresentationSpec, SliceDataset, build_representation, context_stack,
                       from_view)
from .modelfile import ViewModel
from .network import ArchSpec, predict_proba
from .training import History, TrainConfig, class_weights, train, weight_map
from .volume import GradientTable, LabelVolume, Volume

log = logging.getLogger(__name__)

VIEW_ORDER = ("axial", "coronal", "sagittal")


@dataclass
class Subject:
    rep: Volume
    labels: LabelVolume


def class_lut(class_labels) -> np.ndarray:
    lut = np.full(max(class_labels) + 1, -1, dtype=np.int64)
    lut[list(class_labels)] = np.arange(len(class_labels))
    return lut


def prepare_representations(items, rep_spec: RepresentationSpec):
    """Build representations for ``(dwi, table, labels)`` items.

    Normalisation bounds come from the first item and are reused for the rest.
    Returns the subjects and the spec with the bounds filled in.
    """
    subjects, spec = [], rep_spec
    for dwi, table, labels in items:
        rep, spec = build_representation(dwi, table, spec)
        subjects.append(Subject(rep, labels))
    return subjects, spec


def _dataset(subjects, view, k, lut, class_w, edge_gain):
    triples = []
    for s in subjects:
        targets = lut[s.labels.labels]
        if np.any(targets < 0):
            raise ValidationError("labels outside the model's class list")
        triples.append((s.rep.data, targets, weight_map(s.labels, class_w, edge_gain)))
    return SliceDataset(triples, view, k)


def train_views(train_subjects, val_subjects, rep_spec: RepresentationSpec, label_table: dict,
                arch_kwargs: dict | None = None, cfg: TrainConfig = TrainConfig(),
                context: int = 3, views=VIEW_ORDER, families=None
                ) -> dict[str, tuple[ViewModel, History]]:
    class_labels = tuple(sorted(label_table))
    lut = class_lut(class_labels)
    cw_by_label = class_weights([s.labels for s in train_subjects], class_labels)
    cw = {int(lut[c]): w for c, w in cw_by_label.items() if c < len(lut) and lut[c] >= 0}
    in_ch = rep_spec.channel_count * (2 * context + 1)
    out = {}
    for view in views:
        i = VIEW_ORDER.index(view)  # seed offset fixed per view, whatever subset is trained
        arch = ArchSpec(in_channels=in_ch, num_classes=len(class_labels),
                        **{"seed": cfg.seed + i, **(arch_kwargs or {})})
        tr = _dataset(train_subjects, view, context, lut, cw, cfg.edge_gain)
        va = _dataset(val_subjects, view, context, lut, cw, cfg.edge_gain)
        net, hist = train(view, tr, va, arch, replace(cfg, seed=cfg.seed + i))
        log.info("%s: best epoch %d of %d", view, hist.best_epoch, len(hist.records))
        out[view] = (ViewModel(net, view, context, rep_spec, class_labels, dict(label_table),
                               dict(families or {})), hist)
    return out


def predict_view(model: ViewModel, rep: Volume, batch_size: int = 32) -> ProbabilityVolume:
    if rep.channels != model.rep.channel_count:
        raise ShapeError(f"representation has {rep.channels} channels, model expects "
                         f"{model.rep.channel_count}")
    stack = context_stack(rep.data, model.view, model.context)
    probs = predict_proba(model.net, stack, batch_size)  # (L, C, H, W)
    vol = from_view(np.moveaxis(probs, 1, -1), model.view)
    return ProbabilityVolume(np.ascontiguousarray(vol, dtype=np.float32), rep.affine,
                             model.class_labels, model.label_table)


def segment_representation(models: dict[str, ViewModel], rep: Volume,
                           weights=DEFAULT_VIEW_WEIGHTS) -> tuple[ProbabilityVolume, LabelVolume]:
    """Run the three view networks on a prepared representation and aggregate."""
    probs = {v: predict_view(models[v], rep) for v in VIEW_ORDER}
    agg = aggregate_views(probs["axial"], probs["coronal"], probs["sagittal"], weights)
    return agg, argmax_labels(agg)


def segment_dwi(models: dict[str, ViewModel], dwi: Volume, table: GradientTable,
                weights=DEFAULT_VIEW_WEIGHTS) -> tuple[ProbabilityVolume, LabelVolume]:
    """Build the stored representation (with the training normalisation) and segment."""
    spec = models["axial"].rep
    rep, _ = build_representation(dwi, table, spec)
    return segment_representation(models, rep, weights)


def set_threads(n: int | None) -> None:
    """Cap torch's intra-op threads and insist on deterministic kernels."""
    if n:
        torch.set_num_threads(int(n))
    torch.use_deterministic_algorithms(True)
