"""T1-ball-stick forward model.

A stick compartment (volume fraction ``f``) with parallel diffusivity
``lambda_par`` and orientation ``(theta, phi)``, plus an isotropic ball with
diffusivity ``lambda_iso``. Each compartment carries its own inversion
recovery factor with relaxation time ``t1_stick`` / ``t1_ball``.

Units are chosen so parameters sit near 1: b in ms/um^2, diffusivities in
um^2/ms, times in seconds.

Parameters are handled as float arrays whose last axis follows
:data:`PARAM_NAMES`; :class:`TissueParams` is the per-voxel record.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .acquisition import AcquisitionProtocol, Measurement

PARAM_NAMES = ("f", "lambda_par", "lambda_iso", "t1_stick", "t1_ball", "theta", "phi")
SCALAR_PARAMS = PARAM_NAMES[:5]
N_PARAMS = len(PARAM_NAMES)

F, LAMBDA_PAR, LAMBDA_ISO, T1_STICK, T1_BALL, THETA, PHI = range(N_PARAMS)


@dataclass(frozen=True)
class TissueParams:
    f: float
    lambda_par: float
    lambda_iso: float
    t1_stick: float
    t1_ball: float
    theta: float
    phi: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "TissueParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameter values, got shape {values.shape}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ParamBounds:
    """Per-parameter box constraints, ordered as :data:`PARAM_NAMES`.

    The defaults are the physically plausible ranges used both for sampling
    synthetic tissue and for constraining every fit.
    """

    lower: tuple = (0.0, 0.1, 0.1, 0.01, 0.01, 0.0, -np.pi)
    upper: tuple = (1.0, 3.0, 3.0, 5.0, 5.0, np.pi, np.pi)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (N_PARAMS,) or hi.shape != (N_PARAMS,):
            raise ValueError("bounds need one (min, max) pair per parameter")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    def validate(self, allow_degenerate: bool = False) -> None:
        lo, hi = self.lo, self.hi
        bad = lo > hi if allow_degenerate else lo >= hi
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(bad):
            names = [PARAM_NAMES[i] for i in np.flatnonzero(bad)]
            raise ValueError(f"invalid bounds for {names or 'non-finite entries'}")

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    def as_dict(self) -> dict:
        return {name: [lo, hi] for name, lo, hi in zip(PARAM_NAMES, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        return cls(tuple(d[n][0] for n in PARAM_NAMES), tuple(d[n][1] for n in PARAM_NAMES))


DEFAULT_BOUNDS = ParamBounds()


@dataclass(frozen=True)
class ModelOptions:
    """Switches between the two readings of the stick and inversion terms.

    ``stick_exponent``: ``"squared"`` attenuates with (g.n)^2, ``"linear"``
    with (g.n).  ``ir_form``: ``"product"`` uses |1 - 2 e^{-TI/T1} e^{-TR/T1}|,
    ``"standard"`` uses |1 - 2 e^{-TI/T1} + e^{-TR/T1}|.
    """

    stick_exponent: str = "squared"
    ir_form: str = "product"

    def __post_init__(self):
        if self.stick_exponent not in ("squared", "linear"):
            raise ValueError(f"stick_exponent must be 'squared' or 'linear', got {self.stick_exponent!r}")
        if self.ir_form not in ("product", "standard"):
            raise ValueError(f"ir_form must be 'product' or 'standard', got {self.ir_form!r}")

    @property
    def power(self) -> int:
        return 2 if self.stick_exponent == "squared" else 1

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DEFAULT_OPTIONS = ModelOptions()


def polar_to_cartesian(theta, phi) -> np.ndarray:
    """Unit vector(s) ``[sin t cos p, sin t sin p, cos t]``; broadcasts, last axis is xyz."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def _as_param_array(params) -> np.ndarray:
    if isinstance(params, TissueParams):
        return params.to_array()
    return np.asarray(params, dtype=float)


def clamp_params(params, bounds: ParamBounds = DEFAULT_BOUNDS):
    """Clip each parameter to the nearest value inside its bounds.

    Accepts a :class:`TissueParams` (returns one) or an array whose last
    axis holds the 7 parameters (returns an array).
    """
    arr = _as_param_array(params)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot clamp non-finite parameters")
    out = np.clip(arr, bounds.lo, bounds.hi)
    if isinstance(params, TissueParams):
        return TissueParams.from_array(out)
    return out


def _dot3(n, g):
    # elementwise, so each row is bit-identical regardless of batch size
    return n[:, None, 0] * g[:, 0] + n[:, None, 1] * g[:, 1] + n[:, None, 2] * g[:, 2]


def _ir_terms(ti, tr, t1, ir_form):
    """Signed inversion factor and its derivative with respect to T1."""
    if ir_form == "product":
        e = np.exp(-(ti + tr) / t1)
        a = 1.0 - 2.0 * e
        da = -2.0 * e * (ti + tr) / t1**2
    else:
        ei = np.exp(-ti / t1)
        er = np.exp(-tr / t1)
        a = 1.0 - 2.0 * ei + er
        da = -2.0 * ei * ti / t1**2 + er * tr / t1**2
    return a, da


def _compartments(P, b, g, ti, tr, opts):
    """Everything needed for the signal and its Jacobian.

    ``P`` is (k, 7); protocol arrays are (n,) / (n, 3). Returns (k, n) arrays.
    """
    p = opts.power
    n = polar_to_cartesian(P[:, THETA], P[:, PHI])  # (k, 3)
    u = _dot3(n, g)  # (k, n)
    lam_par = P[:, LAMBDA_PAR, None]
    lam_iso = P[:, LAMBDA_ISO, None]
    e_stick = np.exp(-b * lam_par * u**p)
    e_ball = np.exp(-b * lam_iso)
    a_stick, da_stick = _ir_terms(ti, tr, P[:, T1_STICK, None], opts.ir_form)
    a_ball, da_ball = _ir_terms(ti, tr, P[:, T1_BALL, None], opts.ir_form)
    return n, u, e_stick, e_ball, a_stick, da_stick, a_ball, da_ball


def predict_batch(P, protocol: "AcquisitionProtocol", opts: ModelOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Signals for a (k, 7) parameter array over the protocol, shape (k, n_meas)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    _, _, e_s, e_b, a_s, _, a_b, _ = _compartments(P, protocol.b, protocol.g, protocol.ti, protocol.tr, opts)
    f = P[:, F, None]
    return f * (e_s * np.abs(a_s)) + (1.0 - f) * (e_b * np.abs(a_b))


def predict_signals(params, protocol: "AcquisitionProtocol", opts: ModelOptions = DEFAULT_OPTIONS) -> np.ndarray:
    return predict_batch(_as_param_array(params)[None, :], protocol, opts)[0]


def predict_signal(params, m: "Measurement", opts: ModelOptions = DEFAULT_OPTIONS) -> float:
    from .acquisition import AcquisitionProtocol

    return float(predict_signals(params, AcquisitionProtocol.from_measurements([m], validate=False), opts)[0])


def jacobian_batch(P, protocol: "AcquisitionProtocol", opts: ModelOptions = DEFAULT_OPTIONS):
    """Signals (k, n) and their derivatives (k, n, 7) with respect to each parameter.

    The absolute value in the inversion factors is differentiated as
    ``sign(a) * da``, which gives 0 exactly at a zero crossing.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    b, g = protocol.b, protocol.g
    n, u, e_s, e_b, a_s, da_s, a_b, da_b = _compartments(P, b, g, protocol.ti, protocol.tr, opts)
    f = P[:, F, None]
    r_s, r_b = np.abs(a_s), np.abs(a_b)
    stick = e_s * r_s
    ball = e_b * r_b

    theta, phi = P[:, THETA], P[:, PHI]
    dn_dtheta = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=-1)
    dn_dphi = np.stack([-np.sin(theta) * np.sin(phi), np.sin(theta) * np.cos(phi), np.zeros_like(theta)], axis=-1)
    p = opts.power
    # d(u^p)/du
    dup = 2.0 * u if p == 2 else np.ones_like(u)
    d_stick_du = f * stick * (-b * P[:, LAMBDA_PAR, None]) * dup

    J = np.empty(u.shape + (N_PARAMS,))
    J[..., F] = stick - ball
    J[..., LAMBDA_PAR] = f * stick * (-b * u**p)
    J[..., LAMBDA_ISO] = (1.0 - f) * ball * (-b)
    J[..., T1_STICK] = f * e_s * np.sign(a_s) * da_s
    J[..., T1_BALL] = (1.0 - f) * e_b * np.sign(a_b) * da_b
    J[..., THETA] = d_stick_du * _dot3(dn_dtheta, g)
    J[..., PHI] = d_stick_du * _dot3(dn_dphi, g)
    return f * stick + (1.0 - f) * ball, J


def signal_jacobian(params, protocol: "AcquisitionProtocol", opts: ModelOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """(n_meas, 7) matrix of partial derivatives of the signal at ``params``."""
    _, J = jacobian_batch(_as_param_array(params)[None, :], protocol, opts)
    return J[0]
