"""Parameter tables, JSON outputs and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .acquisition import FormatError
from .model import N_PARAMS, PARAM_NAMES


def write_params(path, params, voxel_index=None, extra=None) -> Path:
    """CSV with an optional leading ``voxel`` column, the 7 parameters, then ``extra`` columns."""
    path = Path(path)
    params = np.asarray(params, dtype=float).reshape(-1, N_PARAMS)
    extra = extra or {}
    header = (["voxel"] if voxel_index is not None else []) + list(PARAM_NAMES) + list(extra)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(params):
            out = [int(voxel_index[i])] if voxel_index is not None else []
            out += [repr(float(v)) for v in row]
            out += [repr(float(np.asarray(col)[i])) for col in extra.values()]
            w.writerow(out)
    return path


def read_params(path):
    """Returns ``(params (n, 7), voxel_index or None, extra columns dict)``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty parameter file")
        header = [h.strip() for h in header]
        missing = [n for n in PARAM_NAMES if n not in header]
        if missing:
            raise FormatError(f"{path}: missing parameter columns {missing}")
        rows = [[float(c) for c in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    params = data[:, [header.index(n) for n in PARAM_NAMES]]
    voxel = data[:, header.index("voxel")].astype(np.int64) if "voxel" in header else None
    extra = {h: data[:, i] for i, h in enumerate(header) if h not in PARAM_NAMES and h != "voxel"}
    return params, voxel, extra


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_history(path, losses) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(losses, start=1):
            fh.write(f"{epoch},{float(loss)!r}\n")
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def input_digests(paths) -> dict:
    """Digest every existing input, including sidecars that travel with it."""
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        out[str(p)] = file_digest(p)
        side = p.with_suffix(".json")
        if p.suffix in (".f32", ".csv") and side.exists() and side != p:
            out[str(side)] = file_digest(side)
    return out
