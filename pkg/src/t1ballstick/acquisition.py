"""Acquisition protocols and voxel signal matrices.

Files carry b in s/mm^2 and times in ms; in memory everything is in
canonical units (b in ms/um^2, times in s).
"""

from __future__ import annotations

import csv
import decimal
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PROTOCOL_HEADER = ("b_s_per_mm2", "gx", "gy", "gz", "ti_ms", "te_ms", "tr_ms")
GRADIENT_TOL = 1e-6
# file value -> canonical value is division by this
_B_SCALE = decimal.Decimal(1000)  # s/mm^2 per ms/um^2
_T_SCALE = decimal.Decimal(1000)  # ms per s
# wide enough to hold any double exactly, so file <-> canonical units round-trips bit for bit
_EXACT = decimal.Context(prec=1200)


class FormatError(ValueError):
    """Input file does not have the expected layout."""


class ValidationError(ValueError):
    """Input parsed, but violates a domain invariant."""


class NormalizationError(ValidationError):
    def __init__(self, voxels, message=None):
        self.voxels = list(int(v) for v in voxels)
        shown = self.voxels[:20]
        more = "" if len(self.voxels) <= 20 else f" (+{len(self.voxels) - 20} more)"
        super().__init__(message or f"non-positive or non-finite reference signal in voxels {shown}{more}")


@dataclass(frozen=True)
class Measurement:
    b: float
    g: tuple
    ti: float
    te: float
    tr: float

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(v) for v in self.g))


class AcquisitionProtocol:
    """Ordered measurements stored column-wise.

    ``reference_index`` points at the b=0 measurement with the longest TI
    (first such entry if several tie).
    """

    def __init__(self, b, g, ti, te, tr, validate=True):
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.g = np.asarray(g, dtype=float).reshape(-1, 3)
        self.ti = np.asarray(ti, dtype=float).reshape(-1)
        self.te = np.asarray(te, dtype=float).reshape(-1)
        self.tr = np.asarray(tr, dtype=float).reshape(-1)
        n = self.b.size
        if not (self.g.shape[0] == self.ti.size == self.te.size == self.tr.size == n):
            raise ValidationError("protocol columns have inconsistent lengths")
        for arr in (self.b, self.g, self.ti, self.te, self.tr):
            arr.setflags(write=False)
        self.reference_index = _reference_index(self.b, self.ti) if validate else None
        if validate:
            self.validate()

    @classmethod
    def from_measurements(cls, measurements, validate=True) -> "AcquisitionProtocol":
        ms = list(measurements)
        return cls(
            [m.b for m in ms], [m.g for m in ms], [m.ti for m in ms], [m.te for m in ms], [m.tr for m in ms],
            validate=validate,
        )

    def validate(self) -> None:
        if self.b.size == 0:
            raise ValidationError("protocol is empty")
        for name in ("b", "ti", "te", "tr"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite {name} in protocol")
        if np.any(self.b < 0):
            raise ValidationError(f"negative b-value in row {int(np.flatnonzero(self.b < 0)[0])}")
        for name in ("ti", "te", "tr"):
            bad = np.flatnonzero(getattr(self, name) <= 0)
            if bad.size:
                raise ValidationError(f"{name} must be positive (row {int(bad[0])})")
        norms = np.linalg.norm(self.g, axis=1)
        bad = np.flatnonzero((self.b > 0) & (np.abs(norms - 1.0) > GRADIENT_TOL))
        if bad.size:
            raise ValidationError(f"non-unit gradient direction with b>0 in row {int(bad[0])} (|g|={norms[bad[0]]:.6g})")

    def __len__(self) -> int:
        return self.b.size

    @property
    def measurements(self) -> list:
        return [Measurement(*row) for row in zip(self.b, map(tuple, self.g), self.ti, self.te, self.tr)]

    def subset(self, keep) -> "AcquisitionProtocol":
        keep = np.asarray(keep)
        return AcquisitionProtocol(self.b[keep], self.g[keep], self.ti[keep], self.te[keep], self.tr[keep])

    def __eq__(self, other) -> bool:
        if not isinstance(other, AcquisitionProtocol):
            return NotImplemented
        return self.reference_index == other.reference_index and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("b", "g", "ti", "te", "tr")
        )

    def __repr__(self) -> str:
        return f"AcquisitionProtocol(n_meas={len(self)}, reference_index={self.reference_index})"


def _reference_index(b, ti) -> int:
    b0 = np.flatnonzero(b == 0)
    if b0.size == 0:
        raise ValidationError("protocol has no b=0 measurement")
    return int(b0[np.argmax(ti[b0])])


@dataclass
class SignalMatrix:
    """Voxels x measurements signal amplitudes.

    ``voxel_index`` holds each row's linear index in the source volume (or
    simply its row number when no mask was used).
    """

    values: np.ndarray
    normalized: bool = False
    voxel_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ValidationError("signal matrix must be 2-D")
        if self.voxel_index is None:
            self.voxel_index = np.arange(self.values.shape[0])
        self.voxel_index = np.asarray(self.voxel_index, dtype=np.int64)
        if self.voxel_index.shape != (self.values.shape[0],):
            raise ValidationError("voxel_index length does not match the number of rows")
        bad = np.argwhere(~np.isfinite(self.values))
        if bad.size:
            r, c = bad[0]
            raise ValidationError(f"non-finite signal at row {r}, column {c}")

    @property
    def n_voxels(self) -> int:
        return self.values.shape[0]

    @property
    def n_meas(self) -> int:
        return self.values.shape[1]

    def check_paired(self, protocol: AcquisitionProtocol) -> None:
        if self.n_meas != len(protocol):
            raise ValidationError(f"signals have {self.n_meas} measurements but protocol has {len(protocol)}")

    def rows(self, keep) -> "SignalMatrix":
        keep = np.asarray(keep)
        return SignalMatrix(self.values[keep], self.normalized, self.voxel_index[keep])


# ---------------------------------------------------------------- protocol io


def load_protocol(path) -> AcquisitionProtocol:
    """Read a protocol CSV with header ``b_s_per_mm2,gx,gy,gz,ti_ms,te_ms,tr_ms``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty protocol file") from None
        if tuple(header) != PROTOCOL_HEADER:
            missing = [h for h in PROTOCOL_HEADER if h not in header]
            extra = [h for h in header if h not in PROTOCOL_HEADER]
            raise FormatError(
                f"{path}: protocol header must be {','.join(PROTOCOL_HEADER)} (missing {missing}, unexpected {extra})"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PROTOCOL_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(PROTOCOL_HEADER)} fields, got {len(row)}")
            try:
                [float(c) for c in row]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            rows.append([c.strip() for c in row])
    if not rows:
        raise ValidationError(f"{path}: protocol has no measurements")
    try:
        return _protocol_from_file_rows(rows)
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def _canonical(text, scale: decimal.Decimal) -> float:
    """File value (decimal text) divided by ``scale`` with a single rounding."""
    return float(_EXACT.divide(decimal.Decimal(text), scale))


def _file_value(x: float, scale: decimal.Decimal) -> str:
    """Shortest decimal text that ``_canonical`` maps back to ``x`` exactly."""
    short = repr(float(x) * float(scale))
    if _canonical(short, scale) == x:
        return short
    return format(_EXACT.multiply(decimal.Decimal(float(x)), scale).normalize(_EXACT), "f")


def _protocol_from_file_rows(rows) -> AcquisitionProtocol:
    """Rows of file-unit values (text or numbers) in header order."""
    cols = list(zip(*rows))
    b, ti, te, tr = (np.array([_canonical(str(v), sc) for v in cols[k]]) for k, sc in
                     ((0, _B_SCALE), (4, _T_SCALE), (5, _T_SCALE), (6, _T_SCALE)))
    g = np.array([[float(v) for v in cols[k]] for k in (1, 2, 3)]).T
    return AcquisitionProtocol(b, g, ti, te, tr)


def write_protocol(protocol: AcquisitionProtocol, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROTOCOL_HEADER)
        for i in range(len(protocol)):
            gx, gy, gz = protocol.g[i]
            w.writerow(
                [
                    _file_value(protocol.b[i], _B_SCALE),
                    repr(float(gx)), repr(float(gy)), repr(float(gz)),
                    _file_value(protocol.ti[i], _T_SCALE),
                    _file_value(protocol.te[i], _T_SCALE),
                    _file_value(protocol.tr[i], _T_SCALE),
                ]
            )
    return path


# ----------------------------------------------------------------- filtering


def filter_measurements(protocol, signals, te_keep, ti_min, ti_max, tol=1e-9):
    """Keep measurements at echo time ``te_keep`` with TI in ``[ti_min, ti_max]`` (seconds).

    ``signals`` may be ``None`` to filter the protocol alone.
    """
    if signals is not None:
        signals.check_paired(protocol)
    keep = (
        (np.abs(protocol.te - te_keep) <= tol * max(1.0, abs(te_keep)))
        & (protocol.ti >= ti_min - tol)
        & (protocol.ti <= ti_max + tol)
    )
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValidationError(f"no measurements left after filtering (te={te_keep}, ti in [{ti_min}, {ti_max}])")
    if not np.any(protocol.b[idx] == 0):
        raise ValidationError("no b=0 measurement survives the filter")
    new_protocol = protocol.subset(idx)
    if signals is None:
        return new_protocol, None
    new_signals = SignalMatrix(signals.values[:, idx], signals.normalized, signals.voxel_index)
    return new_protocol, new_signals


def normalize_signals(protocol, signals, drop_invalid=False):
    """Divide each voxel row by its own reference (b=0, longest TI) entry.

    Rows whose reference value is not positive raise :class:`NormalizationError`,
    or are dropped (and logged) with ``drop_invalid=True``.
    """
    if signals.normalized:
        raise ValidationError("signals are already normalized")
    signals.check_paired(protocol)
    ref = signals.values[:, protocol.reference_index]
    bad = ~(np.isfinite(ref) & (ref > 0))
    if np.any(bad):
        bad_vox = signals.voxel_index[bad]
        if not drop_invalid:
            raise NormalizationError(bad_vox)
        log.warning("dropping %d voxels with invalid reference signal: %s", bad.sum(), bad_vox[:20].tolist())
        signals = signals.rows(np.flatnonzero(~bad))
        ref = ref[~bad]
    return SignalMatrix(signals.values / ref[:, None], True, signals.voxel_index)


# ------------------------------------------------------------------ signals io


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def read_matrix(path, n_cols=None) -> np.ndarray:
    """Read a headerless numeric CSV or a ``.f32`` raw matrix with JSON sidecar."""
    path = Path(path)
    if path.suffix == ".f32":
        meta = json.loads(_sidecar(path).read_text())
        try:
            n_vox, n_meas = int(meta["n_voxels"]), int(meta["n_meas"])
        except KeyError as e:
            raise FormatError(f"{_sidecar(path)}: missing key {e}") from None
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != n_vox * n_meas:
            raise FormatError(f"{path}: {raw.size} values, sidecar says {n_vox}x{n_meas}")
        values = raw.reshape(n_vox, n_meas).astype(float)
    else:
        rows = []
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: {e}") from None
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise FormatError(f"{path}: rows have differing column counts {sorted(widths)}")
        values = np.array(rows, dtype=float).reshape(len(rows), -1)
    if n_cols is not None and values.shape[1] != n_cols:
        raise ValidationError(f"{path}: expected {n_cols} measurements, found {values.shape[1]}")
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        raise ValidationError(f"{path}: non-finite value at row {bad[0][0]}, column {bad[0][1]}")
    return values


@dataclass(frozen=True)
class VoxelMask:
    """Linear voxel indices (Fortran order, x fastest) of retained voxels in an (nx, ny, nz) volume."""

    index: np.ndarray
    dims: tuple

    def coords(self) -> tuple:
        return np.unravel_index(self.index, self.dims, order="F")


def load_mask(path) -> VoxelMask:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index"]:
            raise FormatError(f"{path}: mask CSV must have the single header 'index'")
        idx = [int(row[0]) for row in reader if row]
    meta = json.loads(_sidecar(path).read_text())
    dims = (int(meta["nx"]), int(meta["ny"]), int(meta["nz"]))
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.prod(dims)):
        raise ValidationError(f"{path}: mask index outside volume {dims}")
    return VoxelMask(idx, dims)


def write_mask(mask: VoxelMask, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("index\n")
        for i in mask.index:
            fh.write(f"{int(i)}\n")
    nx, ny, nz = mask.dims
    _sidecar(path).write_text(json.dumps({"nx": nx, "ny": ny, "nz": nz}))
    return path


def load_signals(path, mask_path=None, protocol=None) -> SignalMatrix:
    """Load a voxel signal matrix; rows selected by the mask's indices when given."""
    values = read_matrix(path, None if protocol is None else len(protocol))
    if mask_path is None:
        return SignalMatrix(values)
    mask = load_mask(mask_path)
    if np.any(mask.index >= values.shape[0]):
        raise ValidationError(f"mask selects row {int(mask.index.max())} but {path} has {values.shape[0]} rows")
    return SignalMatrix(values[mask.index], False, mask.index)


def write_signals(signals, path) -> Path:
    """Write as headerless CSV, or raw little-endian float32 plus sidecar for ``.f32`` paths."""
    path = Path(path)
    values = signals.values if isinstance(signals, SignalMatrix) else np.asarray(signals, dtype=float)
    if path.suffix == ".f32":
        values.astype("<f4").tofile(path)
        _sidecar(path).write_text(json.dumps({"n_voxels": values.shape[0], "n_meas": values.shape[1]}))
    else:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in values:
                w.writerow([repr(float(v)) for v in row])
    return path


# --------------------------------------------------------- synthetic protocols


def hemisphere_directions(n: int) -> np.ndarray:
    """Near-uniform unit vectors with z >= 0 (Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z**2)
    ang = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)


def mudi_like_protocol(
    n_ti=26,
    ti_range_ms=(176.0, 4673.0),
    outlier_tis_ms=(),
    shells_s_per_mm2=(0.0, 500.0, 1000.0, 2000.0, 3000.0),
    n_dirs=16,
    te_ms=(80.0,),
    tr_ms=7500.0,
) -> AcquisitionProtocol:
    """A desk-scale stand-in for the combined inversion-recovery / diffusion scan.

    Every TI gets ``n_dirs`` measurements whose shells cycle through
    ``shells_s_per_mm2`` and whose directions rotate with the TI index, so
    all shells and directions are covered across TIs. With the defaults this
    gives 26 x 16 = 416 measurements; passing ``outlier_tis_ms=(20, 7322)``
    adds the two extreme inversion times of the raw acquisition.
    """
    tis = list(np.round(np.geomspace(*ti_range_ms, n_ti)))
    tis[0], tis[-1] = ti_range_ms
    all_tis = sorted(set(tis) | set(outlier_tis_ms))
    dirs = hemisphere_directions(n_dirs)
    shells = np.asarray(shells_s_per_mm2, float)
    rows = []
    # rotation keyed on the regular TIs only, so dropping outliers leaves the rest unchanged
    rot = {ti: t for t, ti in enumerate(sorted(tis))}
    rot.update({ti: len(tis) + k for k, ti in enumerate(outlier_tis_ms) if ti not in rot})
    for te in te_ms:
        for ti in all_tis:
            t = rot[ti]
            for j in range(n_dirs):
                b = shells[j % shells.size]
                g = (0.0, 0.0, 0.0) if b == 0 else tuple(dirs[(j + 5 * t) % n_dirs])
                rows.append((repr(float(b)), *g, repr(float(ti)), repr(float(te)), repr(float(tr_ms))))
    return _protocol_from_file_rows(rows)
