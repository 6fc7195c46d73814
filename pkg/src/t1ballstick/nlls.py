"""Grid search followed by bounded Levenberg-Marquardt, voxel by voxel."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionProtocol, SignalMatrix, hemisphere_directions
from .model import (
    DEFAULT_BOUNDS,
    DEFAULT_OPTIONS,
    N_PARAMS,
    ModelOptions,
    ParamBounds,
    TissueParams,
    jacobian_batch,
    predict_batch,
    _as_param_array,
    _compartments,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    points_per_scalar_param: int = 5
    n_orientations: int = 30

    def __post_init__(self):
        if self.points_per_scalar_param < 2 or self.n_orientations < 1:
            raise ValueError("need >= 2 points per scalar parameter and >= 1 orientation")


@dataclass(frozen=True)
class NllsConfig:
    grid: GridSpec = field(default=GridSpec())
    max_iterations: int = 200
    convergence_tol: float = 1e-8
    bounds: ParamBounds = field(default=DEFAULT_BOUNDS)
    opts: ModelOptions = field(default=DEFAULT_OPTIONS)
    damping_init: float = 1e-3
    damping_factor: float = 10.0
    damping_max: float = 1e10

    def __post_init__(self):
        if self.max_iterations < 0 or not self.convergence_tol > 0:
            raise ValueError("max_iterations must be >= 0 and convergence_tol > 0")

    def as_dict(self) -> dict:
        return {
            "grid": {"points_per_scalar_param": self.grid.points_per_scalar_param, "n_orientations": self.grid.n_orientations},
            "max_iterations": self.max_iterations,
            "convergence_tol": self.convergence_tol,
            "bounds": self.bounds.as_dict(),
            "model_options": self.opts.as_dict(),
            "damping_init": self.damping_init,
            "damping_factor": self.damping_factor,
            "damping_max": self.damping_max,
        }


def residuals(params, signal, protocol: AcquisitionProtocol, opts: ModelOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Model minus data."""
    return predict_batch(_as_param_array(params)[None, :], protocol, opts)[0] - np.asarray(signal, dtype=float)


def cost(params, signal, protocol, opts=DEFAULT_OPTIONS) -> float:
    r = residuals(params, signal, protocol, opts)
    return 0.5 * float(np.sum(r * r))


# ---------------------------------------------------------------- grid search


class ParameterGrid:
    """Cartesian grid, enumerated with ``f`` slowest and orientation fastest.

    Axes: f, lambda_par, lambda_iso, t1_stick, t1_ball, orientation.
    """

    def __init__(self, grid: GridSpec = GridSpec(), bounds: ParamBounds = DEFAULT_BOUNDS):
        k = grid.points_per_scalar_param
        self.scalar_axes = [np.linspace(lo, hi, k) for lo, hi in zip(bounds.lower[:5], bounds.upper[:5])]
        d = hemisphere_directions(grid.n_orientations)
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        phi = np.arctan2(d[:, 1], d[:, 0])
        self.orientations = np.clip(np.stack([theta, phi], axis=1), bounds.lo[5:], bounds.hi[5:])
        self.shape = (k,) * 5 + (grid.n_orientations,)
        self.size = int(np.prod(self.shape))

    def points(self, flat_index) -> np.ndarray:
        """Parameter rows for flat enumeration indices."""
        idx = np.unravel_index(np.asarray(flat_index), self.shape)
        out = np.empty(np.shape(flat_index) + (N_PARAMS,))
        for axis in range(5):
            out[..., axis] = self.scalar_axes[axis][idx[axis]]
        out[..., 5:] = self.orientations[idx[5]]
        return out

    def all_points(self) -> np.ndarray:
        return self.points(np.arange(self.size))


class GridSearcher:
    """Exhaustive grid minimisation using the stick/ball split of the model.

    For fixed compartment shapes the cost is quadratic in ``f``, so every grid
    cost follows from inner products of the data with 750 stick and 25 ball
    vectors. Candidates within rounding distance of the minimum are then
    re-scored with the plain residual so ties resolve in enumeration order.
    """

    def __init__(self, protocol, grid: GridSpec = GridSpec(), bounds=DEFAULT_BOUNDS, opts=DEFAULT_OPTIONS):
        self.protocol = protocol
        self.opts = opts
        self.grid = ParameterGrid(grid, bounds)
        self.k = grid.points_per_scalar_param
        fs, lam_par, lam_iso, t1s, t1b = self.grid.scalar_axes
        ors = self.grid.orientations
        n_or = ors.shape[0]
        k = self.k

        # stick table over (lambda_par, t1_stick, orientation), ball over (lambda_iso, t1_ball)
        P = np.zeros((k, k, n_or, N_PARAMS))
        P[..., 1] = lam_par[:, None, None]
        P[..., 3] = t1s[None, :, None]
        P[..., 5:] = ors[None, None, :, :]
        P[..., 2] = lam_iso[0]
        P[..., 4] = t1b[0]
        _, _, e_s, _, a_s, _, _, _ = _compartments(P.reshape(-1, N_PARAMS), protocol.b, protocol.g, protocol.ti, protocol.tr, opts)
        self.A = (e_s * np.abs(a_s)).reshape(k, k, n_or, -1)
        Q = np.zeros((k, k, N_PARAMS))
        Q[..., 2] = lam_iso[:, None]
        Q[..., 4] = t1b[None, :]
        Q[..., 1] = lam_par[0]
        Q[..., 3] = t1s[0]
        _, _, _, e_b, _, _, a_b, _ = _compartments(Q.reshape(-1, N_PARAMS), protocol.b, protocol.g, protocol.ti, protocol.tr, opts)
        self.B = (e_b * np.abs(a_b)).reshape(k, k, -1)

        A2 = self.A.reshape(-1, self.A.shape[-1])
        B2 = self.B.reshape(-1, self.B.shape[-1])
        AA = np.einsum("jm,jm->j", A2, A2).reshape(k, k, n_or)  # (lp, t1s, o)
        BB = np.einsum("jm,jm->j", B2, B2).reshape(k, k)  # (li, t1b)
        AB = (A2 @ B2.T).reshape(k, k, n_or, k, k)  # (lp, t1s, o, li, t1b)
        f = fs.reshape(k, 1, 1, 1, 1, 1)
        # enumeration layout (f, lp, li, t1s, t1b, o)
        AA_e = AA[None, :, None, :, None, :]
        BB_e = BB[None, None, :, None, :, None]
        AB_e = AB.transpose(0, 3, 1, 4, 2)[None]
        self._quad = f**2 * AA_e + 2 * f * (1 - f) * AB_e + (1 - f) ** 2 * BB_e
        self._f = f

    def _expanded_costs(self, S):
        k = self.k
        n_or = self.A.shape[2]
        sA = (S @ self.A.reshape(-1, self.A.shape[-1]).T).reshape(-1, 1, k, 1, k, 1, n_or)
        sB = (S @ self.B.reshape(-1, self.B.shape[-1]).T).reshape(-1, 1, 1, k, 1, k, 1)
        ss = np.einsum("cm,cm->c", S, S).reshape(-1, 1, 1, 1, 1, 1, 1)
        f = self._f[None]
        c = 0.5 * (self._quad[None] - 2 * f * sA - 2 * (1 - f) * sB + ss)
        return c.reshape(S.shape[0], -1), ss.reshape(-1)

    def search(self, signals, chunk: int = 32):
        """Best grid point per voxel: ``(params (k, 7), cost (k,), flat_index (k,))``."""
        S_all = np.atleast_2d(np.asarray(signals, dtype=float))
        n = S_all.shape[0]
        best_idx = np.empty(n, dtype=np.int64)
        best_cost = np.empty(n)
        for start in range(0, n, chunk):
            S = S_all[start : start + chunk]
            costs, ss = self._expanded_costs(S)
            cmin = costs.min(axis=1)
            tol = 1e-10 * (1.0 + ss) + 1e-12 * np.abs(cmin)
            for row in range(S.shape[0]):
                cand = np.flatnonzero(costs[row] <= cmin[row] + tol[row])
                pred = predict_batch(self.grid.points(cand), self.protocol, self.opts)
                d = pred - S[row]
                direct = 0.5 * np.sum(d * d, axis=1)
                j = int(np.argmin(direct))  # first occurrence; cand is sorted
                best_idx[start + row] = cand[j]
                best_cost[start + row] = direct[j]
        return self.grid.points(best_idx), best_cost, best_idx


def grid_search(signal, protocol, grid: GridSpec = GridSpec(), bounds=DEFAULT_BOUNDS, opts=DEFAULT_OPTIONS) -> TissueParams:
    params, _, _ = GridSearcher(protocol, grid, bounds, opts).search(np.asarray(signal, dtype=float)[None, :])
    return TissueParams.from_array(params[0])


# ------------------------------------------------------------------ refinement


@dataclass
class RefineOutcome:
    params: np.ndarray
    cost: float
    n_iter: int
    status: str  # converged | max_iterations | damping_overflow | zero_cost | non_finite
    costs: list = field(default_factory=list)  # cost at the start and after each accepted step


def _refine(signal, protocol, x0, config: NllsConfig) -> RefineOutcome:
    lo, hi = config.bounds.lo, config.bounds.hi
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    r = predict_batch(x[None], protocol, config.opts)[0] - signal
    c = 0.5 * float(r @ r)
    if not np.isfinite(c):
        log.warning("non-finite initial cost; returning initialization")
        return RefineOutcome(x, c, 0, "non_finite")
    if config.max_iterations == 0:
        return RefineOutcome(x, c, 0, "max_iterations", [c])
    if c == 0.0:
        return RefineOutcome(x, c, 0, "zero_cost", [c])
    x_init, c_init = x.copy(), c
    lam = config.damping_init
    status = "max_iterations"
    n_iter = 0
    trace = [c]
    for it in range(config.max_iterations):
        n_iter = it + 1
        _, J = jacobian_batch(x[None], protocol, config.opts)
        J = J[0]
        g = J.T @ r
        H = J.T @ J
        # bound-active parameters whose descent direction points outward stay put
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        d = np.diag(Hf).copy()
        d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1e-300))
        accepted = False
        while lam <= config.damping_max:
            try:
                step_f = np.linalg.solve(Hf + lam * np.diag(d), -gf)
            except np.linalg.LinAlgError:
                lam *= config.damping_factor
                continue
            step = np.zeros(N_PARAMS)
            step[free] = step_f
            x_new = np.clip(x + step, lo, hi)
            r_new = predict_batch(x_new[None], protocol, config.opts)[0] - signal
            c_new = 0.5 * float(r_new @ r_new)
            if not np.isfinite(c_new):
                log.warning("non-finite cost during refinement at iteration %d; returning initialization", n_iter)
                return RefineOutcome(x_init, c_init, n_iter, "non_finite", trace)
            if c_new < c:
                accepted = True
                lam /= config.damping_factor
                break
            lam *= config.damping_factor
        if not accepted:
            status = "damping_overflow"
            break
        decrease = (c - c_new) / c
        x, r, c = x_new, r_new, c_new
        trace.append(c)
        if c == 0.0:
            status = "zero_cost"
            break
        if decrease < config.convergence_tol:
            status = "converged"
            break
    return RefineOutcome(x, c, n_iter, status, trace)


def refine(signal, protocol, init, config: NllsConfig = NllsConfig()):
    """Projected Levenberg-Marquardt from ``init``: ``(TissueParams, final_cost, n_iter)``."""
    out = _refine(np.asarray(signal, dtype=float), protocol, _as_param_array(init), config)
    return TissueParams.from_array(out.params), out.cost, out.n_iter


# --------------------------------------------------------------------- volume


@dataclass
class NllsResult:
    params: np.ndarray
    cost: np.ndarray
    n_iter: np.ndarray
    status: list
    grid_params: np.ndarray
    grid_time: float
    refine_time: float

    @property
    def wall_time(self) -> float:
        return self.grid_time + self.refine_time


def _refine_chunk(job):
    signals, protocol, inits, config = job
    return [_refine(s, protocol, x0, config) for s, x0 in zip(signals, inits)]


def fit_volume_nlls(signals: SignalMatrix, protocol: AcquisitionProtocol, config: NllsConfig = NllsConfig(), n_workers: int = 1) -> NllsResult:
    """Grid search then refinement for every voxel, in voxel order.

    Output does not depend on ``n_workers``: each voxel's fit only sees its own row.
    """
    if not signals.normalized:
        raise ValueError("fit_volume_nlls expects normalized signals")
    signals.check_paired(protocol)
    S = signals.values
    t0 = time.perf_counter()
    grid_params, _, _ = GridSearcher(protocol, config.grid, config.bounds, config.opts).search(S)
    t1 = time.perf_counter()
    if n_workers > 1 and S.shape[0] > 1:
        import multiprocessing as mp

        bounds = np.linspace(0, S.shape[0], min(S.shape[0], 4 * n_workers) + 1).astype(int)
        jobs = [(S[a:b], protocol, grid_params[a:b], config) for a, b in zip(bounds[:-1], bounds[1:])]
        with mp.get_context("spawn").Pool(n_workers) as pool:
            outcomes = [o for part in pool.map(_refine_chunk, jobs) for o in part]
    else:
        outcomes = _refine_chunk((S, protocol, grid_params, config))
    t2 = time.perf_counter()
    failed = [i for i, o in enumerate(outcomes) if o.status == "non_finite"]
    if failed:
        log.warning("%d voxels failed refinement and keep their grid estimate", len(failed))
    return NllsResult(
        params=np.array([o.params for o in outcomes]).reshape(-1, N_PARAMS),
        cost=np.array([o.cost for o in outcomes]),
        n_iter=np.array([o.n_iter for o in outcomes], dtype=int),
        status=[o.status for o in outcomes],
        grid_params=grid_params,
        grid_time=t1 - t0,
        refine_time=t2 - t1,
    )
