"""Slice rendering of parameter maps as binary PGM/PPM images."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .acquisition import ValidationError, VoxelMask
from .evaluation import dec_color
from .model import DEFAULT_BOUNDS, PARAM_NAMES, PHI, SCALAR_PARAMS, THETA, ParamBounds

AXES = {"x": 0, "y": 1, "z": 2}


def window(values, lo, hi) -> np.ndarray:
    """Linear map of [lo, hi] onto 0..255, clipped."""
    return np.clip(np.rint(255.0 * (np.asarray(values, float) - lo) / (hi - lo)), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> Path:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    return Path(path)


def write_ppm(path, img) -> Path:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())
    return Path(path)


def read_pnm(path) -> np.ndarray:
    """Read back a binary PGM (h, w) or PPM (h, w, 3) written by this module."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM ({magic!r}, maxval {maxval})")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(data[pos:], dtype=np.uint8).reshape(shape)


def _slice_coords(dims, axis: str, index: int):
    """Volume coordinates of every pixel in the slice plus the image shape.

    Image rows/cols: z-slice -> (y, x); y-slice -> (z, x); x-slice -> (z, y).
    """
    a = AXES[axis]
    if not 0 <= index < dims[a]:
        raise ValidationError(f"slice index {index} out of range for axis {axis} (size {dims[a]})")
    row_axis, col_axis = {"z": (1, 0), "y": (2, 0), "x": (2, 1)}[axis]
    rr, cc = np.meshgrid(np.arange(dims[row_axis]), np.arange(dims[col_axis]), indexing="ij")
    coords = [None, None, None]
    coords[a] = np.full(rr.shape, index)
    coords[row_axis] = rr
    coords[col_axis] = cc
    return coords, rr.shape


def render_maps(params, voxel_index, mask: VoxelMask, out_dir, slice_axis="z", slice_index=None,
                bounds: ParamBounds = DEFAULT_BOUNDS, dec_weight="f", prefix="") -> dict:
    """Write one PGM per scalar parameter, a DEC PPM, and a per-slice CSV.

    ``voxel_index`` gives each params row's linear volume index; pass ``None``
    to take the mask's indices in row order. Default slice is the middle one.
    """
    params = np.asarray(params, dtype=float)
    dims = tuple(mask.dims)
    if voxel_index is None:
        if params.shape[0] != mask.index.size:
            raise ValidationError(f"{params.shape[0]} parameter rows but mask has {mask.index.size} voxels")
        voxel_index = mask.index
    voxel_index = np.asarray(voxel_index, dtype=np.int64)
    if not np.all(np.isin(voxel_index, mask.index)):
        raise ValidationError("parameter rows reference voxels outside the mask")
    if slice_axis not in AXES:
        raise ValidationError(f"slice axis must be one of x, y, z (got {slice_axis!r})")
    if slice_index is None:
        slice_index = dims[AXES[slice_axis]] // 2

    n_total = int(np.prod(dims))
    row_of = np.full(n_total, -1, dtype=np.int64)
    row_of[voxel_index] = np.arange(voxel_index.size)
    coords, shape = _slice_coords(dims, slice_axis, slice_index)
    lin = np.ravel_multi_index(coords, dims, order="F")
    rows = row_of[lin]
    inside = rows >= 0

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{slice_axis}{slice_index}"
    written = {}
    pixels = {}
    for i, name in enumerate(SCALAR_PARAMS):
        img = np.zeros(shape, dtype=np.uint8)
        img[inside] = window(params[rows[inside], i], bounds.lower[i], bounds.upper[i])
        pixels[name] = img
        written[name] = write_pgm(out_dir / f"{prefix}{name}_{tag}.pgm", img)

    dec = np.zeros(shape + (3,), dtype=np.uint8)
    if np.any(inside):
        sel = params[rows[inside]]
        w = np.ones(sel.shape[0]) if dec_weight is None else np.clip(sel[:, PARAM_NAMES.index(dec_weight)], 0.0, 1.0)
        dec[inside] = dec_color(sel[:, THETA], sel[:, PHI], w).reshape(-1, 3)
    written["dec"] = write_ppm(out_dir / f"{prefix}dec_{tag}.ppm", dec)

    csv_path = out_dir / f"{prefix}slice_{tag}.csv"
    with csv_path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        header = ["row", "col", "voxel", "in_mask"]
        for name in PARAM_NAMES:
            header += [name, f"{name}_pixel"] if name in SCALAR_PARAMS else [name]
        wr.writerow(header + ["dec_r", "dec_g", "dec_b"])
        for r in range(shape[0]):
            for c in range(shape[1]):
                k = rows[r, c]
                line = [r, c, int(lin[r, c]), int(k >= 0)]
                for i, name in enumerate(PARAM_NAMES):
                    line.append(repr(float(params[k, i])) if k >= 0 else "")
                    if name in SCALAR_PARAMS:
                        line.append(int(pixels[name][r, c]))
                line += [int(v) for v in dec[r, c]]
                wr.writerow(line)
    written["csv"] = csv_path
    return written
