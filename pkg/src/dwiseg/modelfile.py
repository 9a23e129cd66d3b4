"""One self-describing ``.npz`` file per view network.

Contents:

- ``meta``: UTF-8 JSON with ``format``, ``view``, ``context`` (slices either
  side), ``arch`` (ArchSpec fields), ``representation`` (kind, ndirs, shell_b,
  channel manifest, per-channel normalisation bounds), ``class_labels`` (label
  id of each output channel) and ``label_table``.
- ``param/<name>``: learnable arrays, float32.
- ``buffer/<name>``: batch-norm running statistics, float32 (counters int64).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .features import RepresentationSpec, channel_names
from .network import ArchSpec, SegNet

FORMAT = "dwiseg-model-1"


@dataclass
class ViewModel:
    net: SegNet
    view: str
    context: int
    rep: RepresentationSpec
    class_labels: tuple
    label_table: dict
    families: dict = field(default_factory=dict)


def save_model(path, model: ViewModel) -> None:
    rep = model.rep
    meta = {
        "format": FORMAT,
        "view": model.view,
        "context": model.context,
        "arch": model.net.spec.to_dict(),
        "representation": {
            "kind": rep.kind, "ndirs": rep.ndirs, "shell_b": rep.shell_b,
            "channels": channel_names(rep),
            "normalization": [list(b) for b in (rep.normalization or ())],
        },
        "class_labels": [int(c) for c in model.class_labels],
        "label_table": {str(k): v for k, v in model.label_table.items()},
        "families": {str(k): v for k, v in model.families.items()},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.net.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy().astype(np.float32)
    for name, b in model.net.named_buffers():
        arr = b.detach().cpu().numpy()
        arrays[f"buffer/{name}"] = arr.astype(np.float32) if arr.dtype.kind == "f" else arr
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> ViewModel:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise FormatError(f"{path}: unknown model format {meta.get('format')!r}")
    net = SegNet(ArchSpec.from_dict(meta["arch"]))
    state = {}
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind in ("param", "buffer"):
            state[name] = torch.from_numpy(np.array(arr))
    net.load_state_dict(state)
    net.eval()
    r = meta["representation"]
    norm = tuple(tuple(b) for b in r["normalization"]) or None
    shell = None if r["shell_b"] is None else float(r["shell_b"])
    rep = RepresentationSpec(r["kind"], int(r["ndirs"]), shell, norm)
    return ViewModel(net, meta["view"], int(meta["context"]), rep,
                     tuple(meta["class_labels"]),
                     {int(k): v for k, v in meta["label_table"].items()},
                     {int(k): v for k, v in meta.get("families", {}).items()})
