"""Phantom-scale experiment runner.

For every seed a fresh phantom family (train / validation / test subjects) is
simulated. Each training representation gets its own three view networks;
they are evaluated on the test subjects with the matching representation, and
tensor networks listed in ``cross`` are also evaluated on tensors fitted from
a different number of directions (using the training normalisation).

Outputs in ``out``:

* ``metrics.csv``: seed, train_rep, eval_rep, label, name, family, metric,
  value (region metrics averaged over the test subjects).
* ``summary.csv``: per (train_rep, eval_rep, metric) the mean and standard
  error over seeds of the non-background region mean, plus one ``trend`` row
  per metric with the Spearman correlation against direction count.
* ``events.jsonl``: stage timings (not deterministic, hence not CSV).

Config keys (``key = value``; lists are comma separated)::

    phantom          brain | path to a JSON phantom spec   (brain)
    dims, voxel_size preset grid                          (32, 2.5)
    noise_sigma      Rician noise sigma                   (50)
    shells           b-values of the acquisition          (1000, 2000, 3000)
    per_shell, n_b0  directions per shell, b=0 images     (60, 6)
    representations  e.g. B0_ONLY, B0_TENSOR:30, B0_TENSOR:all, B0_FA:30, B0_DWI:30
    trend_dirs       direction counts for the trend row   (12, 30, 60, 90 up to per_shell)
    cross            n:m pairs, tensor nets trained on n evaluated on m  (30:60)
    seeds            experiment seeds                     (1, 2, 3, 4, 5)
    n_train, n_val, n_test                                 (4, 1, 2)
    depth, filters, kernel_size, convs_per_block, context (3; 8,16,32; 3; 3; 3)
    epochs, lr, lr_decay, lr_step, patience, batch_size, momentum, edge_gain
    view_weights     axial, coronal, sagittal             (0.4, 0.4, 0.2)
    out              output directory                     (experiment_out)
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import config as cfgmod
from .errors import SpecError
from .evaluation import DEFAULT_VIEW_WEIGHTS, evaluate
from .features import RepresentationSpec, build_representation
from .phantom import brain_phantom, load_spec, make_phantom, with_seed
from .pipeline import Subject, segment_representation, train_views
from .training import TrainConfig
from .volume import multishell_table

DEFAULT_REPS = ("B0_ONLY", "B0_TENSOR:12", "B0_TENSOR:30", "B0_TENSOR:60", "B0_TENSOR:all",
                "B0_FA:30", "B0_DWI:30")
METRICS = ("dice", "hausdorff_mm")
ROLE_OFFSET = {"train": 0, "val": 100, "test": 200}


def _floats(v):
    return tuple(cfgmod.as_list(v, float))


def _ints(v):
    return tuple(cfgmod.as_list(v, int))


def _pairs(v):
    out = []
    for item in cfgmod.as_list(v):
        n, sep, m = item.partition(":")
        if not sep:
            raise ValueError(f"cross pair {item!r} is not n:m")
        out.append((int(n), int(m)))
    return tuple(out)


SCHEMA = {
    "phantom": (str, "brain"),
    "dims": (int, 32),
    "voxel_size": (float, 2.5),
    "noise_sigma": (float, 50.0),
    "shells": (_floats, (1000.0, 2000.0, 3000.0)),
    "per_shell": (int, 60),
    "n_b0": (int, 6),
    "representations": (lambda v: tuple(cfgmod.as_list(v)), DEFAULT_REPS),
    "trend_dirs": (_ints, None),
    "cross": (_pairs, ((30, 60),)),
    "seeds": (_ints, (1, 2, 3, 4, 5)),
    "n_train": (int, 4),
    "n_val": (int, 1),
    "n_test": (int, 2),
    "depth": (int, 3),
    "filters": (_ints, (8, 16, 32)),
    "kernel_size": (int, 3),
    "convs_per_block": (int, 3),
    "context": (int, 3),
    "epochs": (int, 30),
    "lr": (float, 0.01),
    "lr_decay": (float, 0.2),
    "lr_step": (int, 10),
    "patience": (int, 15),
    "batch_size": (int, 4),
    "momentum": (float, 0.0),
    "edge_gain": (float, 5.0),
    "view_weights": (_floats, DEFAULT_VIEW_WEIGHTS),
    "out": (str, "experiment_out"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: str
    dims: int
    voxel_size: float
    noise_sigma: float
    shells: tuple
    per_shell: int
    n_b0: int
    representations: tuple
    trend_dirs: tuple
    cross: tuple
    seeds: tuple
    n_train: int
    n_val: int
    n_test: int
    depth: int
    filters: tuple
    kernel_size: int
    convs_per_block: int
    context: int
    epochs: int
    lr: float
    lr_decay: float
    lr_step: int
    patience: int
    batch_size: int
    momentum: float
    edge_gain: float
    view_weights: tuple
    out: str

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise SpecError("n_train, n_val and n_test must be >= 1")
        if not self.seeds:
            raise SpecError("at least one seed is needed")
        if len(self.view_weights) != 3:
            raise SpecError("view_weights needs three values")
        if self.trend_dirs is None:
            dirs = sorted({min(d, self.per_shell) for d in (12, 30, 60, 90)})
            object.__setattr__(self, "trend_dirs", tuple(dirs))
        for rep in self.rep_specs():
            n = rep.ndirs if rep.kind != "B0_ONLY" and rep.shell_b is not None else 0
            if n > self.per_shell:
                raise SpecError(f"{rep.name} needs {n} directions, the table has "
                                f"{self.per_shell} per shell")
            if rep.shell_b is not None and rep.kind != "B0_ONLY" and rep.shell_b not in self.shells:
                raise SpecError(f"{rep.name}: shell b={rep.shell_b} not acquired")
        for n, m in self.cross:
            if max(n, m) > self.per_shell:
                raise SpecError(f"cross pair {n}:{m} exceeds {self.per_shell} directions")

    def rep_specs(self) -> list[RepresentationSpec]:
        shell = float(self.shells[0])
        return [RepresentationSpec.parse(r, shell) for r in self.representations]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(initial_lr=self.lr, lr_decay=self.lr_decay, lr_step=self.lr_step,
                           patience=self.patience, batch_size=self.batch_size,
                           max_epochs=self.epochs, seed=seed, momentum=self.momentum,
                           edge_gain=self.edge_gain)

    def arch_kwargs(self) -> dict:
        return dict(depth=self.depth, filters=self.filters, kernel_size=self.kernel_size,
                    convs_per_block=self.convs_per_block)


def load_config(path, **overrides) -> ExperimentConfig:
    raw = cfgmod.read_config(path)
    values = cfgmod.typed(raw, SCHEMA, str(path))
    if values["phantom"] != "brain":
        p = Path(values["phantom"])
        if not p.is_absolute():
            values["phantom"] = str((Path(path).parent / p).resolve())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def make_config(**values) -> ExperimentConfig:
    base = {k: d for k, (_, d) in SCHEMA.items()}
    unknown = set(values) - set(base)
    if unknown:
        raise SpecError(f"unknown experiment keys {sorted(unknown)}")
    return ExperimentConfig(**{**base, **values})


# --- data ----------------------------------------------------------------------

def _phantom_spec(cfg: ExperimentConfig, seed: int):
    if cfg.phantom == "brain":
        return brain_phantom(seed, cfg.dims, cfg.voxel_size, cfg.noise_sigma)
    spec, _ = load_spec(cfg.phantom)
    return with_seed(spec, seed)


def family_data(cfg: ExperimentConfig, seed: int):
    """Simulated (dwi, labels) per role for one experiment seed."""
    table = multishell_table(cfg.shells, cfg.per_shell, cfg.n_b0)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    data = {}
    for role, n in counts.items():
        data[role] = []
        for j in range(n):
            ph = make_phantom(_phantom_spec(cfg, seed * 1000 + ROLE_OFFSET[role] + j), table)
            data[role].append((ph.dwi, ph.labels))
    spec = _phantom_spec(cfg, seed * 1000)
    return table, data, spec.label_table, spec.families


def _reps(items, table, spec):
    subjects = []
    for dwi, labels in items:
        rep, spec = build_representation(dwi, table, spec)
        subjects.append(Subject(rep, labels))
    return subjects, spec


# --- run -----------------------------------------------------------------------

def _region_means(reports) -> list[tuple]:
    """Average each region's metrics over test subjects (undefined values skipped)."""
    rows = {}
    for rep in reports:
        for r in rep.rows:
            entry = rows.setdefault(r.label, {"name": r.name, "family": r.family,
                                              "dice": [], "hausdorff_mm": []})
            for m in METRICS:
                val = getattr(r, m)
                if val is not None:
                    entry[m].append(val)
    out = []
    for label in sorted(rows):
        e = rows[label]
        for m in METRICS:
            out.append((label, e["name"], e["family"], m,
                        float(np.mean(e[m])) if e[m] else math.nan))
    return out


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and not math.isfinite(x)) else f"{x:.6f}"


def run_experiment(cfg: ExperimentConfig, events=None) -> dict:
    """Run every seed and write the CSV outputs; returns their paths."""
    emit = events or (lambda **kw: None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_specs = {r.name: r for r in cfg.rep_specs()}
    shell = float(cfg.shells[0])
    for n, _ in cfg.cross:
        rep = RepresentationSpec("B0_TENSOR", n, shell)
        train_specs.setdefault(rep.name, rep)
    rows = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        table, data, label_table, families = family_data(cfg, seed)
        emit(stage="simulate", seed=seed, seconds=time.perf_counter() - t0)
        for name, rspec in train_specs.items():
            t0 = time.perf_counter()
            train_s, rspec_n = _reps(data["train"], table, rspec)
            val_s, _ = _reps(data["val"], table, rspec_n)
            models = train_views(train_s, val_s, rspec_n, label_table, cfg.arch_kwargs(),
                                 cfg.train_config(seed), cfg.context, families=families)
            emit(stage="train", seed=seed, rep=name, seconds=time.perf_counter() - t0,
                 best_epochs={v: h.best_epoch for v, (_, h) in models.items()})
            views = {v: m for v, (m, _) in models.items()}
            eval_specs = [rspec_n]
            if rspec.kind == "B0_TENSOR" and rspec.shell_b is not None:
                eval_specs += [replace(rspec_n, ndirs=m) for n, m in cfg.cross
                               if n == rspec.ndirs and m != n]
            for espec in eval_specs:
                t0 = time.perf_counter()
                reports = []
                for dwi, labels in data["test"]:
                    rep, _ = build_representation(dwi, table, espec)
                    _, pred = segment_representation(views, rep, cfg.view_weights)
                    reports.append(evaluate(pred, labels, families))
                emit(stage="segment", seed=seed, train_rep=name, eval_rep=espec.name,
                     subjects=len(reports), seconds=time.perf_counter() - t0)
                for label, rname, fam, metric, value in _region_means(reports):
                    rows.append((seed, name, espec.name, label, rname, fam, metric, value))
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "train_rep", "eval_rep", "label", "name", "family", "metric",
                    "value"])
        for r in rows:
            w.writerow([*r[:-1], _fmt(r[-1])])
    summary_path = out / "summary.csv"
    write_summary(summarize(rows, cfg.trend_dirs, shell), summary_path)
    return {"metrics": metrics_path, "summary": summary_path}


@dataclass
class SummaryRow:
    kind: str  # "matched", "cross" or "trend"
    train_rep: str
    eval_rep: str
    metric: str
    mean: float
    se: float
    n: int


def summarize(rows, trend_dirs=(12, 30, 60), shell_b: float = 1000.0) -> list[SummaryRow]:
    """Per-seed non-background means, then mean and standard error over seeds."""
    per_seed: dict = {}
    for seed, tr, ev, label, _, _, metric, value in rows:
        if label == 0 or not math.isfinite(value):
            continue
        per_seed.setdefault((tr, ev, metric), {}).setdefault(seed, []).append(value)
    out = []
    for (tr, ev, metric), by_seed in per_seed.items():
        vals = np.array([np.mean(v) for _, v in sorted(by_seed.items())])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        out.append(SummaryRow("matched" if tr == ev else "cross", tr, ev, metric,
                              float(vals.mean()), se, len(vals)))
    for metric in METRICS:
        pts = []
        for d in trend_dirs:
            name = RepresentationSpec("B0_TENSOR", d, shell_b).name
            match = [r for r in out if r.kind == "matched" and r.train_rep == name
                     and r.metric == metric]
            if match:
                pts.append((d, match[0].mean))
        if len(pts) >= 2:
            x, y = zip(*pts)
            rho = spearmanr(x, y).statistic if len(set(y)) > 1 else math.nan
            out.append(SummaryRow("trend", ",".join(str(d) for d in x), "", metric,
                                  float(rho), math.nan, len(pts)))
    return out


def write_summary(summary: list[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "train_rep", "eval_rep", "metric", "mean", "se", "n"])
        for r in summary:
            w.writerow([r.kind, r.train_rep, r.eval_rep, r.metric, _fmt(r.mean), _fmt(r.se), r.n])


def read_summary(path) -> list[SummaryRow]:
    with open(path, newline="") as fh:
        return [SummaryRow(r["kind"], r["train_rep"], r["eval_rep"], r["metric"],
                           math.nan if r["mean"] == "NA" else float(r["mean"]),
                           math.nan if r["se"] == "NA" else float(r["se"]), int(r["n"]))
                for r in csv.DictReader(fh)]
