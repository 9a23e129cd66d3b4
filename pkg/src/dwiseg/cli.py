"""``dwiseg`` command line.

Every stage writes one JSON line (``stage``, ``status``, ``seconds`` and
stage details) to ``--log`` (default: stderr). Exit codes: 0 success,
2 usage, 3 data/format problems, 4 numeric or training failures.
The only environment variable read is ``DWISEG_THREADS`` (default for
``--threads``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, DwisegError, FormatError, UsageError

VIEWS = ("axial", "coronal", "sagittal")


class EventLog:
    def __init__(self, stream):
        self.stream = stream

    def emit(self, **fields) -> None:
        self.stream.write(json.dumps(fields, sort_keys=True, default=_jsonable) + "\n")
        self.stream.flush()

    @contextmanager
    def stage(self, name: str, **fields):
        t0 = time.perf_counter()
        info: dict = {}
        try:
            yield info
        except Exception as exc:
            self.emit(stage=name, status="error", error=type(exc).__name__, message=str(exc),
                      seconds=round(time.perf_counter() - t0, 6), **fields, **info)
            exc.dwiseg_stage = name
            raise
        self.emit(stage=name, status="ok", seconds=round(time.perf_counter() - t0, 6),
                  **fields, **info)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, Path):
        return str(x)
    return repr(x)


def sidecar_path(path) -> Path:
    p = Path(path)
    name = p.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return p.with_name(name[: -len(ext)] + ".json")
    return p.with_name(name + ".json")


def _stem(path: Path) -> str:
    return sidecar_path(path).stem


def _floats(text: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} numbers, got {text!r}")
    return vals


def _read_families(path) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read families file {path}: {exc}") from exc
    return {int(k): str(v) for k, v in doc.items()}


# --- subcommands -----------------------------------------------------------------

def cmd_phantom(args, log: EventLog) -> int:
    from .io import write_gradient_table, write_nifti
    from .phantom import load_spec, make_phantom, spec_to_dict, with_seed
    from .volume import multishell_table

    with log.stage("phantom", spec=args.spec) as info:
        spec, topts = load_spec(args.spec)
        if args.seed is not None:
            spec = with_seed(spec, args.seed)
        table = multishell_table(**topts)
        ph = make_phantom(spec, table)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_nifti(ph.labels, out / "labels.nii.gz")
        write_nifti(ph.dwi, out / "dwi.nii.gz")
        write_gradient_table(table, out / "bvals", out / "bvecs")
        (out / "families.json").write_text(json.dumps(
            {str(k): v for k, v in ph.families.items()}, indent=2) + "\n")
        (out / "phantom.json").write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")
        info.update(seed=spec.seed, dims=list(spec.dims), volumes=table.n)
    return 0


def _load_dwi(args):
    from .io import read_gradient_table, read_nifti

    dwi = read_nifti(args.dwi)
    table = read_gradient_table(args.bvals, args.bvecs)
    return dwi, table


def cmd_fit_tensor(args, log: EventLog) -> int:
    from . import dti
    from .io import read_nifti, write_nifti
    from .volume import Volume

    with log.stage("fit-tensor", dwi=args.dwi) as info:
        dwi, table = _load_dwi(args)
        keep = list(range(table.n))
        if args.shell is not None:
            shell = table.shell_indices(args.shell, dti.B0_TOL)
            k = args.ndirs or len(shell)
            dirs = dti.select_directions(table, args.shell, k)
            keep = sorted(table.b0_indices(dti.B0_TOL).tolist() + dirs)
        elif args.ndirs:
            raise UsageError("--ndirs needs --shell")
        mask = read_nifti(args.mask, as_labels=True) if args.mask else None
        fit = dti.fit_tensor(dwi.select_channels(keep), table.subset(keep), mask)
        eig = dti.eigen_decompose(fit)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_nifti(Volume(fit.components.astype(np.float32), fit.affine), out / "tensor.nii.gz")
        write_nifti(Volume(np.asarray(fit.s0, dtype=np.float32), fit.affine), out / "s0.nii.gz")
        write_nifti(dti.fa_map(eig), out / "fa.nii.gz")
        write_nifti(dti.md_map(eig), out / "md.nii.gz")
        write_nifti(Volume(np.nan_to_num(eig.principal_direction).astype(np.float32),
                           fit.affine), out / "v1.nii.gz")
        info.update(volumes_used=len(keep), failed_voxels=int(np.sum(fit.failed)))
    return 0


def cmd_build_input(args, log: EventLog) -> int:
    from .features import RepresentationSpec, build_representation, read_sidecar, write_sidecar
    from .io import write_nifti

    with log.stage("build-input", kind=args.kind, ndirs=args.ndirs) as info:
        dwi, table = _load_dwi(args)
        if args.all_shells:
            spec = RepresentationSpec(args.kind.upper(), 0, None)
        else:
            spec = RepresentationSpec(args.kind.upper(), args.ndirs, args.shell)
        if args.norm_from:
            ref = read_sidecar(args.norm_from)
            if ref.channel_count != spec.channel_count:
                raise DataError(f"{args.norm_from} has {ref.channel_count} channels, "
                                f"{spec.name} needs {spec.channel_count}")
            spec = RepresentationSpec(spec.kind, spec.ndirs, spec.shell_b, ref.normalization)
        rep, spec = build_representation(dwi, table, spec)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_nifti(rep, out)
        write_sidecar(sidecar_path(out), spec, table)
        info.update(representation=spec.name, channels=rep.channels)
    return 0


TRAIN_SCHEMA_DEFAULTS = {
    "epochs": (int, 60), "lr": (float, 0.01), "lr_decay": (float, 0.2), "lr_step": (int, 10),
    "patience": (int, 15), "min_delta": (float, 1e-6), "batch_size": (int, 16),
    "momentum": (float, 0.0), "edge_gain": (float, 5.0), "seed": (int, 0),
    "depth": (int, 3), "filters": (lambda v: tuple(int(x) for x in v.split(",")), (16, 32, 64)),
    "kernel_size": (int, 5), "convs_per_block": (int, 3), "context": (int, 3),
    "val_subjects": (lambda v: tuple(x.strip() for x in v.split(",") if x.strip()), ()),
}


def _train_settings(path) -> dict:
    from .config import read_config, typed

    raw = read_config(path) if path else {}
    return typed(raw, TRAIN_SCHEMA_DEFAULTS, str(path or "<defaults>"))


def _subjects(rep_dir: Path, labels_dir: Path):
    from .features import read_sidecar
    from .io import read_nifti

    reps = sorted(p for p in rep_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    if not reps:
        raise DataError(f"no representation NIfTI files in {rep_dir}")
    out, spec = [], None
    for p in reps:
        name = _stem(p)
        cand = [labels_dir / f"{name}.nii.gz", labels_dir / f"{name}.nii",
                labels_dir / name / "labels.nii.gz"]
        lab = next((c for c in cand if c.exists()), None)
        if lab is None:
            raise DataError(f"no labels for subject {name!r} in {labels_dir}")
        s = read_sidecar(sidecar_path(p))
        if spec is None:
            spec = s
        elif s != spec:
            raise DataError(f"{p.name}: representation or normalisation differs from "
                            f"{reps[0].name}; build all inputs with the same --norm-from")
        out.append((name, read_nifti(p), read_nifti(lab, as_labels=True)))
    return out, spec


def cmd_train(args, log: EventLog) -> int:
    from .modelfile import save_model
    from .pipeline import Subject, train_views
    from .training import TrainConfig

    with log.stage("train", view=args.view) as info:
        st = _train_settings(args.config)
        subjects, spec = _subjects(Path(args.rep_dir), Path(args.labels))
        if len(subjects) < 2:
            raise DataError("training needs at least two subjects (one for validation)")
        names = [n for n, _, _ in subjects]
        val_names = set(st["val_subjects"] or names[-1:])
        missing = val_names - set(names)
        if missing:
            raise DataError(f"validation subjects not found: {sorted(missing)}")
        train_s = [Subject(r, l) for n, r, l in subjects if n not in val_names]
        val_s = [Subject(r, l) for n, r, l in subjects if n in val_names]
        if not train_s:
            raise DataError("no training subjects left after the validation split")
        table: dict = {}
        for s in train_s + val_s:
            table.update(s.labels.label_table)
        cfg = TrainConfig(initial_lr=st["lr"], lr_decay=st["lr_decay"], lr_step=st["lr_step"],
                          patience=st["patience"], min_delta=st["min_delta"],
                          batch_size=st["batch_size"], max_epochs=st["epochs"], seed=st["seed"],
                          momentum=st["momentum"], edge_gain=st["edge_gain"])
        arch = dict(depth=st["depth"], filters=st["filters"], kernel_size=st["kernel_size"],
                    convs_per_block=st["convs_per_block"])
        res = train_views(train_s, val_s, spec, table, arch, cfg, st["context"],
                          views=(args.view,), families=_read_families(args.families))
        model, hist = res[args.view]
        out = Path(args.out_model)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_model(out, model)
        hist_path = Path(args.history) if args.history else out.with_name(
            out.stem + "_history.csv")
        hist.write_csv(hist_path)
        info.update(train_subjects=len(train_s), val_subjects=sorted(val_names),
                    epochs=len(hist.records), best_epoch=hist.best_epoch, seed=cfg.seed)
    return 0


def _load_models(model_dir: Path) -> dict:
    from .modelfile import load_model

    models = {}
    for v in VIEWS:
        p = model_dir / f"{v}.npz"
        if not p.exists():
            raise DataError(f"missing {p}")
        models[v] = load_model(p)
        if models[v].view != v:
            raise DataError(f"{p} holds a {models[v].view} network")
    return models


def cmd_segment(args, log: EventLog) -> int:
    from .evaluation import resample_soft_labels
    from .io import read_gradient_table, read_nifti, write_nifti
    from .pipeline import segment_dwi, segment_representation

    with log.stage("segment", input=args.input) as info:
        models = _load_models(Path(args.model_dir))
        weights = _floats(args.weights, 3)
        vol = read_nifti(args.input)
        t0 = time.perf_counter()
        if args.bvals or args.bvecs:
            if not (args.bvals and args.bvecs):
                raise UsageError("--bvals and --bvecs go together")
            probs, labels = segment_dwi(models, vol, read_gradient_table(args.bvals, args.bvecs),
                                        weights)
        else:
            probs, labels = segment_representation(models, vol, weights)
        if args.target:
            target = read_nifti(args.target)
            labels = resample_soft_labels(probs, target.dims, target.affine)
        info["segment_seconds"] = round(time.perf_counter() - t0, 6)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_nifti(labels, out)
        if args.probs_out:
            from .volume import Volume

            write_nifti(Volume(np.asarray(probs.probs, dtype=np.float32), probs.affine),
                        args.probs_out)
        info.update(dims=list(labels.dims), classes=len(probs.class_labels))
    return 0


def cmd_evaluate(args, log: EventLog) -> int:
    from .evaluation import evaluate
    from .io import read_nifti

    with log.stage("evaluate", pred=args.pred, ref=args.ref) as info:
        pred = read_nifti(args.pred, as_labels=True)
        ref = read_nifti(args.ref, as_labels=True)
        report = evaluate(pred, ref, _read_families(args.families),
                          include_background=args.include_background)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            report.write_csv(args.out)
        else:
            report.write_csv(sys.stdout)
        info.update(mean_dice=report.mean_dice(), mean_hausdorff_mm=report.mean_hausdorff(),
                    regions=len(report.rows))
    return 0


def cmd_compare_tracts(args, log: EventLog) -> int:
    from .evaluation import compare_tracts
    from .io import read_nifti

    with log.stage("compare-tracts", a=args.a, b=args.b) as info:
        a, b = read_nifti(args.a), read_nifti(args.b)
        if a.channels != 1 or b.channels != 1:
            raise DataError("tract volumes must be single-channel")
        d = compare_tracts(a, b, args.threshold)
        info["mean_hausdorff_mm"] = d
        text = json.dumps({"a": args.a, "b": args.b, "threshold": args.threshold,
                           "mean_hausdorff_mm": d}) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    return 0


def cmd_experiment(args, log: EventLog) -> int:
    from .experiment import load_config, run_experiment

    with log.stage("experiment", config=args.config) as info:
        overrides = {"out": args.out}
        if args.seeds:
            overrides["seeds"] = tuple(int(s) for s in _floats(args.seeds))
        cfg = load_config(args.config, **overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "events.jsonl", "w") as fh:
            inner = EventLog(fh)

            def emit(**fields):
                fields["seconds"] = round(fields.get("seconds", 0.0), 6)
                inner.emit(**fields)
                log.emit(**fields)

            paths = run_experiment(cfg, emit)
        info.update(out=str(out), seeds=list(cfg.seeds), **{k: str(v) for k, v in paths.items()})
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwiseg", description="Anatomical segmentation of "
                                "diffusion MRI with view-wise 2D networks (phantom toolkit).")
    p.add_argument("--version", action="version", version=f"dwiseg {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: $DWISEG_THREADS or torch default)")
    p.add_argument("--log", default=None, help="JSON-lines event log file (default stderr)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="simulate a labelled DWI phantom")
    s.add_argument("--spec", required=True, help="phantom spec (JSON or key = value)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    s.set_defaults(func=cmd_phantom)

    def dwi_args(s):
        s.add_argument("--dwi", required=True)
        s.add_argument("--bvals", required=True)
        s.add_argument("--bvecs", required=True)

    s = sub.add_parser("fit-tensor", help="log-linear tensor fit; writes tensor, s0, FA, MD, V1")
    dwi_args(s)
    s.add_argument("--mask", default=None)
    s.add_argument("--shell", type=float, default=None, help="restrict to one shell (+ b=0)")
    s.add_argument("--ndirs", type=int, default=None, help="directions on --shell")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fit_tensor)

    s = sub.add_parser("build-input", help="network input representation + sidecar")
    dwi_args(s)
    s.add_argument("--kind", required=True,
                   choices=["B0_ONLY", "B0_FA", "B0_TENSOR", "B0_DWI"], type=str.upper)
    s.add_argument("--ndirs", type=int, default=30)
    s.add_argument("--shell", type=float, default=1000.0)
    s.add_argument("--all-shells", action="store_true", help="fit on every shell")
    s.add_argument("--norm-from", default=None, help="reuse a sidecar's normalisation")
    s.add_argument("--out", required=True, help="output .nii.gz (sidecar written alongside)")
    s.set_defaults(func=cmd_build_input)

    s = sub.add_parser("train", help="train one view network")
    s.add_argument("--view", required=True, choices=VIEWS)
    s.add_argument("--rep-dir", required=True, help="directory of <subject>.nii.gz inputs")
    s.add_argument("--labels", required=True, help="directory of <subject>.nii.gz labels")
    s.add_argument("--config", default=None, help="key = value training settings")
    s.add_argument("--families", default=None, help="JSON {label: family}")
    s.add_argument("--out-model", required=True)
    s.add_argument("--history", default=None, help="history CSV (default next to model)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="run the three view networks and aggregate")
    s.add_argument("--model-dir", required=True, help="holds axial/coronal/sagittal.npz")
    s.add_argument("--input", required=True, help="representation, or DWI with --bvals/--bvecs")
    s.add_argument("--bvals", default=None)
    s.add_argument("--bvecs", default=None)
    s.add_argument("--weights", default="0.4,0.4,0.2", help="axial,coronal,sagittal")
    s.add_argument("--target", default=None, help="resample soft labels onto this grid")
    s.add_argument("--probs-out", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="per-region Dice and mean Hausdorff")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--families", default=None)
    s.add_argument("--include-background", action="store_true")
    s.add_argument("--out", default=None, help="report CSV (default stdout)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare-tracts", help="mean Hausdorff of thresholded tract volumes")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_compare_tracts)

    s = sub.add_parser("experiment", help="phantom-scale representation experiments")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="override the config's output directory")
    s.add_argument("--seeds", default=None, help="override seeds, e.g. 1,2")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("DWISEG_THREADS"):
        try:
            threads = int(os.environ["DWISEG_THREADS"])
        except ValueError:
            parser.error("DWISEG_THREADS must be an integer")
    if threads is not None and threads < 1:
        parser.error("--threads must be >= 1")
    stream = open(args.log, "a") if args.log else sys.stderr
    log = EventLog(stream)
    try:
        from .pipeline import set_threads

        set_threads(threads)
        return args.func(args, log)
    except UsageError as exc:
        print(f"dwiseg: usage error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DwisegError as exc:
        print(f"dwiseg {getattr(exc, 'dwiseg_stage', args.command)}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        # missing files, unreadable archives and the like count as data problems
        print(f"dwiseg {getattr(exc, 'dwiseg_stage', args.command)}: {exc}", file=sys.stderr)
        return DataError.exit_code
    finally:
        if stream is not sys.stderr:
            stream.close()


if __name__ == "__main__":
    sys.exit(main())
