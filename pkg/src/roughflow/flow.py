"""Approximate-flow engine: one-step maps from frozen fields, composition over
oriented partitions, dyadic convergence to the limiting flow, and the
quantitative diagnostics (mesh errors, flow-property and observable residuals,
Lipschitz monitoring, driver-continuity comparisons, remainder identities).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .algebra import DomainError, hom_norm
from .observables import graded_apply, tensor_apply
from .roughpath import chen_lift

FLOOR = 1e-14  # below this, sup distances are arithmetic noise


class IntegrationError(RuntimeError):
    """One-step integration diverged; carries the offending point."""

    def __init__(self, message, point_index=None, point=None):
        super().__init__(message)
        self.point_index = point_index
        self.point = point


class NumericalDiagnostic(RuntimeError):
    """A convergence study failed its own consistency checks."""

    def __init__(self, message, worst_point_index=None, report=None):
        super().__init__(message)
        self.worst_point_index = worst_point_index
        self.report = report


def thread_count() -> int:
    raw = os.environ.get("ROUGHFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when ROUGHFLOW_THREADS > 1."""
    n = thread_count()
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Oriented partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrientedPartition:
    knots: tuple

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        if len(knots) < 2:
            raise DomainError("partition needs at least 2 knots")
        diffs = np.diff(knots)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise DomainError("knots must be strictly monotone in the oriented direction")
        object.__setattr__(self, "knots", knots)

    @property
    def s(self) -> float:
        return self.knots[0]

    @property
    def t(self) -> float:
        return self.knots[-1]

    @property
    def count(self) -> int:
        return len(self.knots) - 1

    @property
    def mesh(self) -> float:
        return float(np.max(np.abs(np.diff(self.knots))))

    def split_at(self, index: int):
        return (OrientedPartition(self.knots[: index + 1]),
                OrientedPartition(self.knots[index:]))


def uniform_partition(s: float, t: float, n: int) -> OrientedPartition:
    if n < 1:
        raise DomainError("n must be >= 1")
    if s == t:
        raise DomainError("degenerate interval")
    return OrientedPartition(tuple(s + (i / n) * (t - s) for i in range(n + 1)))


def dyadic_partition(s: float, t: float, level: int) -> OrientedPartition:
    return uniform_partition(s, t, 2 ** level)


def is_epsilon_special(pi: OrientedPartition, epsilon: float) -> bool:
    """Recursive middle-window splitting test, memoized over knot-index intervals
    (cubic worst case instead of the exponential naive recursion)."""
    if not 0 < epsilon <= 0.5:
        raise DomainError("epsilon must lie in (0, 1/2]")
    knots = pi.knots
    memo: dict[tuple, bool] = {}

    def window_ok(i, j, p):
        a, b = knots[i], knots[j]
        lo = a + epsilon * (b - a)
        hi = b - epsilon * (b - a)
        lo, hi = min(lo, hi), max(lo, hi)
        slack = 1e-12 * abs(b - a)
        return lo - slack <= knots[p] <= hi + slack

    def special(i, j):
        if j - i == 1:
            return True
        key = (i, j)
        hit = memo.get(key)
        if hit is not None:
            return hit
        out = False
        for p in range(i + 1, j):
            if window_ok(i, j, p) and special(i, p) and special(p, j):
                out = True
                break
        memo[key] = out
        return out

    return special(0, len(knots) - 1)


# ---------------------------------------------------------------------------
# One-step maps
# ---------------------------------------------------------------------------

class FrozenStep:
    """Time-1 flow of the field frozen at log X_{s,t}.

    Euclidean backends integrate with classical 4th-order steps whose substep
    count scales with the homogeneous size of the increment; left-invariant
    systems use the exact matrix exponential.
    """

    def __init__(self, sys, xi, substep_scale=64, substep_min=16, substep_max=4096,
                 label=None):
        self.sys = sys
        self.xi = xi
        self.label = label
        self.hom = hom_norm(xi)
        self.substeps = int(np.clip(math.ceil(substep_scale * self.hom),
                                    substep_min, substep_max))
        self.field = sys.extension(xi)
        self.matrix = sys.frozen_matrix(xi)
        self._exp = expm(self.matrix) if self.matrix is not None else None
        if self._exp is None and sys.backend.kind == "group":
            raise DomainError("matrix-group flows need a left-invariant system")

    def apply(self, pts):
        pts = np.asarray(pts, float)
        if self._exp is not None:
            out = pts @ self._exp
            backend = self.sys.backend
            batch, single = backend.as_batch(out)
            worst = max(backend.orthogonality_drift(g) for g in batch)
            if worst > backend.drift_tol:
                out = backend.renormalize(out)
            return out
        return self._rk4(pts)

    def _rk4(self, pts):
        single = pts.ndim == 1
        y = pts[None, :].copy() if single else pts.copy()
        h = 1.0 / self.substeps
        f = self.field
        for _ in range(self.substeps):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            bad = int(np.argmax(~np.isfinite(y).all(axis=-1)))
            raise IntegrationError(
                f"one-step integration diverged over {self.label or 'interval'}",
                point_index=bad, point=pts[bad] if not single else pts)
        return y[0] if single else y

    def apply_with_jacobian(self, pts):
        """Pointwise differentials propagated by the variational equation; on
        left-invariant systems the step is a right translation, hence an isometry
        with unit differential in frame coordinates."""
        pts = np.asarray(pts, float)
        if self._exp is not None:
            n = pts.shape[0] if pts.ndim == 3 else 1
            eye = np.broadcast_to(np.eye(self.sys.backend.n), (n, self.sys.backend.n, self.sys.backend.n))
            return self.apply(pts), eye.copy()
        single = pts.ndim == 1
        y = pts[None, :].copy() if single else pts.copy()
        npts, dim = y.shape
        J = np.broadcast_to(np.eye(dim), (npts, dim, dim)).copy()
        h = 1.0 / self.substeps
        f = self.field
        jac = f.jacobian if f.jac_fn is not None else (lambda q: _fd_jac_batch(f, q))
        for _ in range(self.substeps):
            k1 = f(y); K1 = np.einsum("nij,njk->nik", jac(y), J)
            y2 = y + 0.5 * h * k1; J2 = J + 0.5 * h * K1
            k2 = f(y2); K2 = np.einsum("nij,njk->nik", jac(y2), J2)
            y3 = y + 0.5 * h * k2; J3 = J + 0.5 * h * K2
            k3 = f(y3); K3 = np.einsum("nij,njk->nik", jac(y3), J3)
            y4 = y + h * k3; J4 = J + h * K3
            k4 = f(y4); K4 = np.einsum("nij,njk->nik", jac(y4), J4)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            J = J + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        if single:
            return y[0], J[0]
        return y, J

    def grad_bound(self, pts) -> float:
        """max over the cloud of the frozen field's Jacobian operator norm."""
        if self.matrix is not None:
            return 0.0
        f = self.field
        J = f.jacobian(pts) if f.jac_fn is not None else _fd_jac_batch(f, np.asarray(pts, float))
        return float(max(np.linalg.norm(j, 2) for j in J))


def _fd_jac_batch(fld, pts):
    from .systems import fd_jacobian

    return fd_jacobian(fld.fn, pts)


class ApproximateFlow:
    """One-step maps indexed by (s, t), built from a dynamical system and a
    rough-path driver, with composition over oriented partitions."""

    def __init__(self, sys, path, substep_scale=64, substep_min=16,
                 substep_max=4096, theta_override=None, lie_tol=1e-6):
        self.sys = sys
        self.path = path
        self.substep_scale = substep_scale
        self.substep_min = substep_min
        self.substep_max = substep_max
        self.theta_override = theta_override
        self.lie_tol = lie_tol
        self._steps: dict[tuple, FrozenStep] = {}

    @property
    def theta(self) -> float:
        if self.theta_override is not None:
            return self.theta_override
        cert = getattr(self.path, "certificate", None)
        if cert is None:
            raise DomainError("driver carries no Hoelder certificate and no theta override")
        return cert.theta

    @property
    def alpha(self) -> float:
        cert = getattr(self.path, "certificate", None)
        if cert is None:
            raise DomainError("driver carries no Hoelder certificate")
        return cert.alpha

    def step(self, s: float, t: float) -> FrozenStep:
        key = (float(s), float(t))
        hit = self._steps.get(key)
        if hit is None:
            xi = self.path.log_at(s, t)
            hit = FrozenStep(self.sys, xi, self.substep_scale, self.substep_min,
                             self.substep_max, label=f"[{s:.6g},{t:.6g}]")
            self._steps[key] = hit
        return hit

    def apply(self, s: float, t: float, pts):
        if s == t:
            return np.asarray(pts, float).copy()
        return self.step(s, t).apply(pts)

    def compose(self, pi: OrientedPartition, pts):
        out = np.asarray(pts, float)
        for a, b in zip(pi.knots[:-1], pi.knots[1:]):
            out = self.step(a, b).apply(out)
        return out

    def compose_dyadic(self, s: float, t: float, level: int, pts):
        if s == t:
            return np.asarray(pts, float).copy()
        return self.compose(dyadic_partition(s, t, level), pts)

    def distances(self, A, B) -> np.ndarray:
        backend = self.sys.backend
        if backend.kind == "group":
            return backend.distances(A, B)
        return np.linalg.norm(np.asarray(A) - np.asarray(B), axis=-1)


# ---------------------------------------------------------------------------
# Dyadic convergence
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    levels: list
    d_sups: list
    theta: float
    expected_rate: float
    rate_slope: float | None
    stop_level: int
    stop_reason: str
    tol: float
    c_fit: float | None = None
    c_pairs: list = field(default_factory=list)
    lip_by_level: list = field(default_factory=list)

    def rate_points(self):
        return [(lv, d) for lv, d in zip(self.levels, self.d_sups) if d > 0]


@dataclass
class FlowSolution:
    flow: ApproximateFlow
    s: float
    t: float
    cloud: np.ndarray
    level: int
    maps: np.ndarray
    report: ConvergenceReport

    def map(self, s2: float, t2: float, pts=None, level=None):
        """Limit-flow evaluation: dyadic composition at the converged level."""
        pts = self.cloud if pts is None else pts
        level = self.level if level is None else level
        return self.flow.compose_dyadic(s2, t2, level, pts)

    def sub_level(self, gap: float) -> int:
        """Level whose mesh on a subinterval of this gap matches the converged
        full-interval mesh."""
        span = abs(self.t - self.s)
        if gap <= 0 or gap >= span:
            return self.level
        return max(0, self.level - int(math.floor(math.log2(span / gap))))

    def trajectory(self, times, start_point, base_time=None) -> dict:
        """phi(base -> t)(start) for a sorted family of times, composed
        sequentially at mesh-equivalent levels."""
        base = self.s if base_time is None else base_time
        start = np.asarray(start_point, float)
        pts = start[None] if start.ndim == 1 else start
        times = sorted({float(base)} | {float(t) for t in times})
        out = {}
        cur_t, cur = float(base), pts
        out[cur_t] = cur[0]
        for tt in times:
            if tt == cur_t:
                continue
            cur = self.flow.compose_dyadic(cur_t, tt, self.sub_level(abs(tt - cur_t)), cur)
            cur_t = tt
            out[cur_t] = cur[0]
        return out


def solve_flow(flow: ApproximateFlow, s: float, t: float, cloud, tol: float,
               max_level: int = 14, fit_subpairs: int = 6,
               raise_on_non_cauchy: bool = True) -> FlowSolution:
    """Iterate dyadic compositions until successive levels agree within tol.

    Stops when d_n <= tol and (d_n <= 0.9 d_{n-1} or d_n is at the arithmetic
    floor); fits the level-rate slope and the theta-power constant afterwards.
    """
    theta = flow.theta
    cloud = np.asarray(cloud, float)
    levels, d_sups = [], []
    prev = flow.compose_dyadic(s, t, 0, cloud)
    maps = prev
    stop_reason = "max_level"
    stop_level = max_level
    worst_idx = None
    for n in range(1, max_level + 1):
        cur = flow.compose_dyadic(s, t, n, cloud)
        dists = flow.distances(prev, cur)
        d = float(np.max(dists))
        worst_idx = int(np.argmax(dists))
        levels.append(n - 1)
        d_sups.append(d)
        maps = cur
        if d <= tol and (len(d_sups) < 2 or d <= 0.9 * d_sups[-2] or d <= FLOOR):
            stop_reason = "converged"
            stop_level = n
            break
        prev = cur
    else:
        stop_level = max_level
        if (len(d_sups) >= 3 and d_sups[-1] > tol
                and d_sups[-1] >= d_sups[-2] >= d_sups[-3]):
            msg = (f"dyadic distances not decreasing: last three are "
                   f"{d_sups[-3]:.3e}, {d_sups[-2]:.3e}, {d_sups[-1]:.3e}; "
                   f"worst cloud point index {worst_idx}")
            if raise_on_non_cauchy:
                raise NumericalDiagnostic(msg, worst_point_index=worst_idx)
            stop_reason = "non_cauchy"

    rate_slope = fit_rate_slope(levels, d_sups)
    report = ConvergenceReport(
        levels=levels, d_sups=d_sups, theta=theta,
        expected_rate=-(theta - 1.0), rate_slope=rate_slope,
        stop_level=stop_level, stop_reason=stop_reason, tol=tol,
    )
    solution = FlowSolution(flow=flow, s=s, t=t, cloud=cloud, level=stop_level,
                            maps=maps, report=report)
    report.c_fit, report.c_pairs = fit_theta_constant(solution, fit_subpairs)
    return solution


@dataclass
class RateStudy:
    levels: list
    d_sups: list
    theta: float
    expected_rate: float
    slope: float | None
    fit_window: tuple
    floor_levels: list

    def slope_over(self, lo: int, hi: int):
        pts = [(lv, d) for lv, d in zip(self.levels, self.d_sups)
               if lo <= lv <= hi]
        return fit_rate_slope([p[0] for p in pts], [p[1] for p in pts])


def convergence_study(flow: ApproximateFlow, s: float, t: float, cloud,
                      max_level: int, fit_window: tuple | None = None) -> RateStudy:
    """d_n = sup-cloud distance between consecutive dyadic compositions for every
    level 0..max_level-1 (no early stopping), with a log2 rate fit.

    Levels whose d_n sits at the arithmetic floor are excluded from the fit and
    listed separately; a one-step-multiplicative system puts every level there.
    """
    theta = flow.theta
    cloud = np.asarray(cloud, float)
    prev = flow.compose_dyadic(s, t, 0, cloud)
    levels, d_sups = [], []
    for n in range(1, max_level + 1):
        cur = flow.compose_dyadic(s, t, n, cloud)
        d_sups.append(float(np.max(flow.distances(prev, cur))))
        levels.append(n - 1)
        prev = cur
    lo, hi = fit_window if fit_window is not None else (0, max_level - 1)
    pts = [(lv, d) for lv, d in zip(levels, d_sups) if lo <= lv <= hi]
    slope = fit_rate_slope([p[0] for p in pts], [p[1] for p in pts])
    floor_levels = [lv for lv, d in zip(levels, d_sups) if d <= 10 * FLOOR]
    return RateStudy(levels=levels, d_sups=d_sups, theta=theta,
                     expected_rate=-(theta - 1.0), slope=slope,
                     fit_window=(lo, hi), floor_levels=floor_levels)


def fit_rate_slope(levels, d_sups, floor: float = 10 * FLOOR):
    pts = [(lv, d) for lv, d in zip(levels, d_sups) if d > floor]
    if len(pts) < 2:
        return None
    xs = np.array([p[0] for p in pts], float)
    ys = np.log2([p[1] for p in pts])
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return float(coef[0])


def fit_theta_constant(solution: FlowSolution, subpairs: int = 6):
    """Constant of the theta-power closeness bound, via the max ratio
    d(limit, one-step) / |t-s|^theta over dyadic subintervals."""
    flow = solution.flow
    theta = flow.theta
    s, t = solution.s, solution.t
    rows = []
    best = 0.0
    for j in range(1, subpairs + 1):
        for offset in (0, 2 ** j // 2):
            a = s + (t - s) * offset / 2 ** j
            b = a + (t - s) / 2 ** j
            ref = solution.map(a, b, level=solution.sub_level(abs(b - a)))
            one = flow.apply(a, b, solution.cloud)
            dist = float(np.max(flow.distances(ref, one)))
            ratio = dist / abs(b - a) ** theta
            rows.append({"s": a, "t": b, "distance": dist, "ratio": ratio})
            best = max(best, ratio)
    return best, rows


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MeshRow:
    count: int
    mesh: float
    sup_error: float
    bound_ratio: float


def mesh_error_report(solution: FlowSolution, partitions) -> list[MeshRow]:
    """Sup-cloud distance from composing each partition to the converged flow,
    with the ratio against mesh^(theta-1) |t-s|."""
    flow = solution.flow
    theta = flow.theta
    ref = solution.maps
    rows = []
    span = abs(solution.t - solution.s)

    def run(pi):
        out = flow.compose(pi, solution.cloud)
        err = float(np.max(flow.distances(out, ref)))
        denom = pi.mesh ** (theta - 1.0) * span
        return MeshRow(count=pi.count, mesh=pi.mesh, sup_error=err,
                       bound_ratio=err / denom if denom > 0 else math.inf)

    rows = parallel_map(run, partitions)
    return rows


def flow_property_residual(solution: FlowSolution, r: float, s: float, t: float,
                           cloud=None) -> float:
    """sup over the cloud of d(phi_{t,s}(phi_{s,r}(m)), phi_{t,r}(m))."""
    flow = solution.flow
    pts = solution.cloud if cloud is None else np.asarray(cloud, float)
    inner = solution.map(r, s, pts)
    two_step = solution.map(s, t, inner)
    direct = solution.map(r, t, pts)
    return float(np.max(flow.distances(two_step, direct)))


def inverse_residual(solution: FlowSolution, s: float, t: float, cloud=None) -> float:
    flow = solution.flow
    pts = solution.cloud if cloud is None else np.asarray(cloud, float)
    there = solution.map(s, t, pts)
    back = solution.map(t, s, there)
    return float(np.max(flow.distances(back, pts)))


def preflow_residual(flow: ApproximateFlow, s: float, t: float, cloud) -> float:
    """One-step inverse identity: mu_{s,t} after mu_{t,s} returns the cloud."""
    pts = np.asarray(cloud, float)
    return float(np.max(flow.distances(flow.apply(t, s, flow.apply(s, t, pts)), pts)))


@dataclass
class DavieFit:
    slope: float
    log_constant: float | None
    n_used: int
    n_total: int
    at_floor: bool
    floor: float
    max_residual: float
    rows: list

    @property
    def constant(self):
        return math.exp(self.log_constant) if self.log_constant is not None else 0.0


def davie_residual(solution: FlowSolution, obs, pairs, start_point, base_time=None,
                   floor: float = 1e-12) -> DavieFit:
    """Residuals |f(y_t) - (V_{X_{s,t}} f)(y_s)| along y = phi(., base)(start_point),
    with a log-log regression of residual against |t-s|.

    Pairs at or below the floor are excluded from the fit; if every pair sits at
    the floor the data satisfies the power bound for every exponent and the fit
    reports slope = +inf with at_floor set.
    """
    flow = solution.flow
    base = solution.s if base_time is None else base_time
    times = sorted({float(s) for s, _ in pairs} | {float(t) for _, t in pairs})
    traj = solution.trajectory(times, start_point, base_time=base)
    rows = []
    for s, t in pairs:
        y_s, y_t = traj[float(s)], traj[float(t)]
        g = flow.path.at(s, t)
        predicted = tensor_apply(obs, g, y_s)
        actual = float(obs.value(y_t))
        rows.append({"s": float(s), "t": float(t), "gap": abs(t - s),
                     "residual": abs(actual - predicted)})
    usable = [(r["gap"], r["residual"]) for r in rows if r["residual"] > floor]
    max_res = max(r["residual"] for r in rows) if rows else 0.0
    if not usable:
        return DavieFit(slope=math.inf, log_constant=None, n_used=0, n_total=len(rows),
                        at_floor=True, floor=floor, max_residual=max_res, rows=rows)
    xs = np.log([u[0] for u in usable])
    ys = np.log([u[1] for u in usable])
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return DavieFit(slope=float(coef[0]), log_constant=float(coef[1]),
                    n_used=len(usable), n_total=len(rows), at_floor=False,
                    floor=floor, max_residual=max_res, rows=rows)


@dataclass
class LipEstimate:
    per_map: list
    composite: float
    predicted_single: list

    @property
    def max_per_map(self):
        return max(self.per_map) if self.per_map else 1.0


def tangent_lip_estimate(flow: ApproximateFlow, pi: OrientedPartition, cloud) -> LipEstimate:
    """Operator norms of the propagated differentials along the partition,
    per map and composite, against the single-step prediction exp(|grad W|)."""
    pts = np.asarray(cloud, float)
    if flow.sys.backend.kind == "group":
        # left-invariant one-step maps are right translations: isometries
        ones = [1.0] * pi.count
        return LipEstimate(per_map=ones, composite=1.0, predicted_single=ones)
    npts, dim = pts.shape
    total = np.broadcast_to(np.eye(dim), (npts, dim, dim)).copy()
    per_map, predicted = [], []
    cur = pts
    for a, b in zip(pi.knots[:-1], pi.knots[1:]):
        step = flow.step(a, b)
        predicted.append(math.exp(step.grad_bound(cur)))
        cur, J = step.apply_with_jacobian(cur)
        per_map.append(float(max(np.linalg.norm(j, 2) for j in J)))
        total = np.einsum("nij,njk->nik", J, total)
    composite = float(max(np.linalg.norm(j, 2) for j in total))
    return LipEstimate(per_map=per_map, composite=composite, predicted_single=predicted)


def lip_by_level(flow: ApproximateFlow, s: float, t: float, cloud, levels) -> list[float]:
    return [tangent_lip_estimate(flow, dyadic_partition(s, t, lv), cloud).composite
            for lv in levels]


# ---------------------------------------------------------------------------
# Driver continuity
# ---------------------------------------------------------------------------

@dataclass
class ContinuityRow:
    label: str
    epsilon: float
    phi_distance: float


def driver_closeness(flow1: ApproximateFlow, flow2: ApproximateFlow, grid, cloud,
                     alpha: float) -> float:
    """Measured eps with d(mu1_{t,s}, mu2_{t,s}) <= eps |t-s|^alpha on the grid."""
    if flow1.path.shape.kappa != flow2.path.shape.kappa:
        raise DomainError("drivers lifted at different truncation steps")
    pts = np.asarray(cloud, float)
    eps = 0.0
    for s, t in grid:
        d = float(np.max(flow1.distances(flow1.apply(s, t, pts), flow2.apply(s, t, pts))))
        eps = max(eps, d / abs(t - s) ** alpha)
    return eps


def continuity_compare(sol1: FlowSolution, sol2: FlowSolution, grid, alpha: float,
                       label: str = "") -> ContinuityRow:
    flow1, flow2 = sol1.flow, sol2.flow
    eps = driver_closeness(flow1, flow2, grid, sol1.cloud, alpha)
    phi_d = float(np.max(flow1.distances(sol1.maps, sol2.maps)))
    return ContinuityRow(label=label, epsilon=eps, phi_distance=phi_d)


def continuity_exponent(rows) -> float | None:
    """Fitted slope of log(phi distance) against log(measured eps)."""
    pts = [(r.epsilon, r.phi_distance) for r in rows if r.epsilon > 0 and r.phi_distance > 0]
    if len(pts) < 2:
        return None
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return float(coef[0])


def continuity_bound_constant(rows, theta: float, alpha: float, span: float) -> float:
    """Smallest constant making phi_distance <= const * eps^((theta-1)/(theta-alpha))
    * span^alpha over the measured rows."""
    expo = (theta - 1.0) / (theta - alpha)
    best = 0.0
    for r in rows:
        if r.epsilon > 0:
            best = max(best, r.phi_distance / (r.epsilon ** expo * span ** alpha))
    return best


# ---------------------------------------------------------------------------
# Remainder identity for smooth drivers
# ---------------------------------------------------------------------------

@dataclass
class TaylorReport:
    lhs: float
    rhs: float
    expansion: float
    integral: float
    mismatch: float
    nodes: int


def taylor_remainder(sys, path, obs, kappa: int, s: float, t: float, start_point,
                     nodes: int = 1000, substeps_per_node: int = 4) -> TaylorReport:
    """Both sides of the order-kappa expansion of f along the driven flow: the
    truncated tensor action at (s, t) plus the quadrature of the remainder
    integrand, against the ODE value f(y_t).

    The driver must be piecewise linear (velocity defined off knots) and the
    observable must support iterated derivatives to order kappa + 1.
    """
    if kappa < 0:
        raise DomainError("kappa must be >= 0")
    lift = chen_lift(path, max(kappa, 1))
    m0 = np.asarray(start_point, float)

    # sigma grid: per-segment Simpson panels (even node counts), so every panel
    # has a single constant driver velocity
    seg_bounds = [s] + [float(u) for u in path.times if s < u < t] + [t]
    total_nodes = max(nodes, 2 * len(seg_bounds))
    span = t - s
    panels = []
    for a, b in zip(seg_bounds[:-1], seg_bounds[1:]):
        m = max(2, 2 * round((b - a) / span * total_nodes / 2))
        panels.append((a, b, int(m), path.velocity(0.5 * (a + b))))

    # integrate the driven ODE y' = V_{xdot}(y), storing y at panel nodes
    y_at: dict[float, np.ndarray] = {float(s): m0.copy()}
    y = m0.copy()
    for a, b, m, vel in panels:
        fld = sys.combination(vel)
        grid = np.linspace(a, b, m + 1)
        for u0, u1 in zip(grid[:-1], grid[1:]):
            h = (u1 - u0) / substeps_per_node
            for _ in range(substeps_per_node):
                k1 = fld(y)
                k2 = fld(y + 0.5 * h * k1)
                k3 = fld(y + 0.5 * h * k2)
                k4 = fld(y + h * k3)
                y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            y_at[float(u1)] = y.copy()
    lhs = float(obs.value(y))

    # truncated expansion at (s, t)
    g = lift.at(s, t)
    expansion = (float(obs.value(m0)) if kappa == 0
                 else _partial_tensor_apply(obs, g, m0, kappa))

    # remainder integrand: velocity (x) top-grade block of X_{sigma, t}
    shape = lift.shape

    def integrand(sigma, vel):
        ysig = y_at[float(sigma)]
        if kappa == 0:
            return sum(float(vel[i]) * float(obs.word_derivative((i + 1,))(ysig))
                       for i in range(len(vel)) if vel[i] != 0.0)
        block = lift.at(sigma, t).tensor.levels[kappa]
        acc = 0.0
        for i in range(len(vel)):
            if vel[i] != 0.0:
                acc += float(vel[i]) * graded_apply(obs, shape, block, kappa, i + 1, ysig)
        return acc

    integral = 0.0
    n_nodes = 0
    for a, b, m, vel in panels:
        grid = np.linspace(a, b, m + 1)
        vals = np.array([integrand(u, vel) for u in grid])
        h = (b - a) / m
        integral += h / 3.0 * (vals[0] + vals[-1] + 4 * vals[1:-1:2].sum()
                               + 2 * vals[2:-2:2].sum())
        n_nodes += m + 1

    rhs = float(expansion + integral)
    return TaylorReport(lhs=lhs, rhs=rhs, expansion=float(expansion),
                        integral=float(integral), mismatch=abs(lhs - rhs),
                        nodes=n_nodes)


def _partial_tensor_apply(obs, g, m, kappa):
    total = float(obs.value(m))
    shape = g.shape
    for k in range(1, min(kappa, shape.kappa) + 1):
        block = g.tensor.levels[k]
        if not np.any(block):
            continue
        for word in shape.words(k):
            c = block[shape.word_index(word)]
            if c != 0.0:
                total += c * float(obs.word_derivative(word)(m))
    return total
