"""Geodesic integration, boundary-normal fibers and volume distortion.

Geodesics integrate with a classical fourth-order scheme and stop with a
flag when they leave the slab.  Straight-line closed forms replace the
integrator whenever the ambient metric is flat in coordinates (flat
family, or a product over a flat base).  Fibers along inward boundary
normals carry the volume distortion of the normal map, computed by
differencing neighboring fibers; a matrix Jacobi-field integration of
the same quantity is kept alongside as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import value_of
from .domains import DomainSpec, unit_normal, second_fundamental_form
from .metrics import MetricField, christoffel, curvature_at, eval_metric, orthonormal_frame

__all__ = [
    "GeodesicState",
    "GeodesicPath",
    "FiberData",
    "integrate_geodesic",
    "normal_fiber",
    "normal_exp",
    "volume_distortion",
    "fiber_distortions",
    "jacobi_distortion",
    "conjugate_scan",
    "cut_function",
]


@dataclass(frozen=True)
class GeodesicState:
    position: np.ndarray
    velocity: np.ndarray
    s: float


class GeodesicPath:
    """Dense geodesic record with cubic Hermite interpolation."""

    def __init__(self, states, exited: bool, exit_which: Optional[str]):
        self.states = states
        self.exited = exited
        self.exit_which = exit_which

    @property
    def length(self) -> float:
        return self.states[-1].s

    def _bracket(self, s: float):
        states = self.states
        if s <= states[0].s:
            return states[0], states[0], 0.0
        if s >= states[-1].s:
            return states[-1], states[-1], 0.0
        lo, hi = 0, len(states) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if states[mid].s <= s:
                lo = mid
            else:
                hi = mid
        a, b = states[lo], states[hi]
        return a, b, (s - a.s) / (b.s - a.s)

    def position_at(self, s: float) -> np.ndarray:
        a, b, u = self._bracket(s)
        if a is b:
            return a.position.copy()
        h = b.s - a.s
        h00 = (1 + 2 * u) * (1 - u) ** 2
        h10 = u * (1 - u) ** 2
        h01 = u * u * (3 - 2 * u)
        h11 = u * u * (u - 1)
        return (
            h00 * a.position
            + h10 * h * a.velocity
            + h01 * b.position
            + h11 * h * b.velocity
        )

    def velocity_at(self, s: float) -> np.ndarray:
        a, b, u = self._bracket(s)
        if a is b:
            return a.velocity.copy()
        return (1 - u) * a.velocity + u * b.velocity


def _is_coordinate_flat(metric: MetricField) -> bool:
    if metric.family == "flat":
        return True
    return metric.family == "product" and metric.base is not None and metric.base.family == "flat"


def _acceleration(metric: MetricField, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    gam = christoffel(metric, pos)
    return -np.einsum("kij,i,j->k", gam, vel, vel)


def integrate_geodesic(
    metric: MetricField,
    start: GeodesicState,
    length: float,
    step: float = 2e-3,
    domain: Optional[DomainSpec] = None,
) -> GeodesicPath:
    """Integrate the geodesic equation up to arclength, stopping on exit.

    With a domain supplied, the path ends on the boundary (located by
    bisecting the final step) and carries the exited flag together with
    the face it left through.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    pos = np.asarray(start.position, dtype=float).copy()
    vel = np.asarray(start.velocity, dtype=float).copy()
    s = float(start.s)
    flat = _is_coordinate_flat(metric)

    if flat:
        return _integrate_straight(pos, vel, s, length, step, domain)

    states = [GeodesicState(pos.copy(), vel.copy(), s)]
    target = s + length
    while s < target - 1e-15:
        h = min(step, target - s)
        npos, nvel = _rk4_step(metric, pos, vel, h)
        if domain is not None and not domain.inside(npos, tol=0.0):
            frac = _bisect_exit(metric, domain, pos, vel, h)
            if frac > 0.0:
                epos, evel = _rk4_step(metric, pos, vel, h * frac)
            else:
                epos, evel = pos, vel
            states.append(GeodesicState(epos.copy(), evel.copy(), s + h * frac))
            return GeodesicPath(states, True, domain.exit_face(_nudge(epos, evel, 1e-9)))
        pos, vel = npos, nvel
        s += h
        states.append(GeodesicState(pos.copy(), vel.copy(), s))
    return GeodesicPath(states, False, None)


def _rk4_step(metric, pos, vel, h):
    def f(p, v):
        return v, _acceleration(metric, p, v)

    k1p, k1v = f(pos, vel)
    k2p, k2v = f(pos + 0.5 * h * k1p, vel + 0.5 * h * k1v)
    k3p, k3v = f(pos + 0.5 * h * k2p, vel + 0.5 * h * k2v)
    k4p, k4v = f(pos + h * k3p, vel + h * k3v)
    npos = pos + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    nvel = vel + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return npos, nvel


def _bisect_exit(metric, domain, pos, vel, h):
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        p, _ = _rk4_step(metric, pos, vel, h * mid)
        if domain.inside(p, tol=0.0):
            lo = mid
        else:
            hi = mid
    return lo


def _nudge(pos, vel, eps):
    return pos + eps * vel


def _integrate_straight(pos, vel, s0, length, step, domain):
    """Closed-form straight-line path for coordinate-flat metrics.

    The exit scan runs vectorized at the step resolution so mid-path exits
    through curved faces are not missed; the stored states stay sparse
    because the interpolant reproduces lines exactly.
    """
    target = length
    exit_s = None
    which = None
    if domain is not None:
        count = max(2, int(math.ceil(length / step)) + 1)
        ss = np.linspace(0.0, length, count)
        pts = pos[None, :] + ss[:, None] * vel[None, :]
        inside = _inside_mask(domain, pts)
        bad = np.flatnonzero(~inside)
        if bad.size:
            k = int(bad[0])
            lo, hi = (ss[k - 1] if k > 0 else 0.0), ss[k]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if domain.inside(pos + mid * vel, tol=0.0):
                    lo = mid
                else:
                    hi = mid
            exit_s = lo
            which = domain.exit_face(pos + (exit_s + 1e-9) * vel)
            target = exit_s
    ss = np.linspace(0.0, max(target, 1e-15), 9)
    states = [GeodesicState(pos + t * vel, vel.copy(), s0 + t) for t in ss]
    return GeodesicPath(states, exit_s is not None, which)


def _inside_mask(domain, pts):
    """Vectorized membership test of coordinate points in the slab."""
    base = pts[:, :-1].copy()
    ok = np.ones(len(pts), dtype=bool)
    for a, ax in enumerate(domain.axes):
        if ax.periodic:
            base[:, a] = ax.lo + (base[:, a] - ax.lo) % ax.span
        else:
            ok &= (base[:, a] >= ax.lo) & (base[:, a] <= ax.hi)
    env = {name: base[:, k] for k, name in enumerate(domain.base_names)}
    top = np.broadcast_to(np.asarray(domain.top(env), dtype=float), (len(pts),))
    bot = np.broadcast_to(np.asarray(domain.bot(env), dtype=float), (len(pts),))
    t = pts[:, -1]
    return ok & (t >= bot) & (t <= top)


# boundary-normal fibers -----------------------------------------------------


def normal_fiber(
    domain: DomainSpec,
    x,
    which: str,
    horizon: Optional[float] = None,
    step: Optional[float] = None,
    metric: Optional[MetricField] = None,
) -> GeodesicPath:
    """Geodesic along the inward unit normal from a boundary point."""
    metric = metric or domain.ambient
    bp = unit_normal(domain, x, which)
    inward = -bp.normal
    if horizon is None:
        horizon = 3.0 * _gap_bound(domain)
    if step is None:
        step = min(2e-3, max(horizon / 64.0, 1e-4))
    start = GeodesicState(bp.ambient, inward, 0.0)
    return integrate_geodesic(metric, start, horizon, step=step, domain=domain)


def _gap_bound(domain: DomainSpec) -> float:
    pts = domain.face_samples(64)
    return max(
        domain.face_value("top", x) - domain.face_value("bottom", x) for x in pts
    )


def normal_exp(domain: DomainSpec, x, which: str, t: float,
               metric: Optional[MetricField] = None):
    """Point at depth t along the inward normal; flags early boundary exit."""
    if t < 0:
        raise ValueError("depth must be non-negative")
    fiber = normal_fiber(domain, x, which, horizon=max(t, 1e-12), metric=metric)
    if fiber.exited and fiber.length < t:
        return fiber.position_at(fiber.length), False
    return fiber.position_at(t), True


def fiber_distortions(
    domain: DomainSpec,
    x,
    which: str,
    ts: Sequence[float],
    metric: Optional[MetricField] = None,
    dx: Optional[float] = None,
    fiber: Optional[GeodesicPath] = None,
) -> np.ndarray:
    """Signed volume distortion of the normal map at given depths.

    Computed by central differencing of neighboring fibers in the base
    parameter; the determinant is taken in orthonormal frames and is
    normalized to +1 at depth zero, so a sign flip marks a fold.
    """
    metric = metric or domain.ambient
    x = tuple(domain.wrap_base(x))
    bdim = domain.base.dim
    horizon = max(max(ts), 1e-9) * 1.000001
    if dx is None:
        dx = max(1e-4, _grid_scale(domain) / 10.0)
    center = fiber or normal_fiber(domain, x, which, horizon=horizon, metric=metric)
    sides = []
    for a in range(bdim):
        for sgn in (1.0, -1.0):
            xs = list(x)
            xs[a] += sgn * dx
            sides.append(
                normal_fiber(domain, tuple(xs), which, horizon=horizon * 1.5, metric=metric)
            )
    # reference volume of the face parametrization at x
    from .domains import induced_face_metric

    hface = np.array(
        [[value_of(e) for e in row] for row in induced_face_metric(domain, which).matrix_fn(x)]
    )
    ref = math.sqrt(np.linalg.det(hface))
    def wrapped_delta(a, b):
        d = a - b
        for k, ax in enumerate(domain.axes):
            if ax.periodic:
                d[k] = (d[k] + ax.span / 2) % ax.span - ax.span / 2
        return d

    def signed_det(t):
        cols = []
        for a in range(bdim):
            plus = sides[2 * a].position_at(min(t, sides[2 * a].length))
            minus = sides[2 * a + 1].position_at(min(t, sides[2 * a + 1].length))
            cols.append(wrapped_delta(plus, minus) / (2 * dx))
        cols.append(center.velocity_at(min(t, center.length)))
        B = np.column_stack(cols)
        p = center.position_at(min(t, center.length))
        g = eval_metric(metric, p)
        return math.sqrt(np.linalg.det(g)) * np.linalg.det(B) / ref

    out = np.array([signed_det(t) for t in ts])
    # orient so that the fiber starts at +1
    sign0 = 1.0 if signed_det(0.0) >= 0 else -1.0
    return sign0 * out


def volume_distortion(
    domain: DomainSpec,
    x,
    which: str,
    t: float,
    metric: Optional[MetricField] = None,
) -> float:
    """Volume distortion at a single depth; negative values mean past a fold."""
    return float(fiber_distortions(domain, x, which, [t], metric=metric)[0])


def _grid_scale(domain: DomainSpec) -> float:
    return min(ax.span for ax in domain.axes) / 64.0


def jacobi_distortion(
    domain: DomainSpec,
    x,
    which: str,
    ts: Sequence[float],
    metric: Optional[MetricField] = None,
) -> np.ndarray:
    """Volume distortion from the matrix Jacobi equation (test oracle).

    Integrates A'' = -R A with A(0) = identity and A'(0) equal to the
    shape operator of the face, in a parallel orthonormal transverse
    frame; the distortion is det A.
    """
    metric = metric or domain.ambient
    x = tuple(domain.wrap_base(x))
    bdim = domain.base.dim
    bp = unit_normal(domain, x, which)
    inward = -bp.normal

    # orthonormal frame of the face tangent space, in ambient components
    from .domains import induced_face_metric, _face_jet

    _, grad, _ = _face_jet(domain, x, which)
    X = np.zeros((domain.m, bdim))
    for i in range(bdim):
        X[i, i] = 1.0
        X[-1, i] = grad[i]
    hface = np.array(
        [[value_of(e) for e in row] for row in induced_face_metric(domain, which).matrix_fn(x)]
    )
    C = np.linalg.inv(np.linalg.cholesky(hface)).T
    E0 = X @ C  # columns: orthonormal tangent frame
    ii = second_fundamental_form(domain, x, which)
    S = C.T @ ii @ C  # shape operator in the orthonormal frame, outward normal

    horizon = max(max(ts), 1e-9)
    step = min(2e-3, max(horizon / 64.0, 1e-4))
    flat = _is_coordinate_flat(metric)

    pos = bp.ambient.copy()
    vel = inward.copy()
    E = E0.copy()
    A = np.eye(bdim)
    Ad = S.copy()

    out = np.empty(len(ts))
    if flat:
        # R = 0 and parallel transport is trivial: A(t) = I + t S
        for k, t in enumerate(ts):
            out[k] = np.linalg.det(np.eye(bdim) + t * S)
        return out

    order = np.argsort(ts)
    sorted_ts = np.asarray(ts, dtype=float)[order]
    ti = 0
    s = 0.0
    last = (s, A.copy(), Ad.copy())

    def record_until(s_now):
        nonlocal ti
        while ti < len(sorted_ts) and sorted_ts[ti] <= s_now + 1e-12:
            dt = sorted_ts[ti] - last[0]
            out[order[ti]] = np.linalg.det(last[1] + dt * last[2])
            ti += 1

    record_until(s)
    while s < horizon - 1e-15:
        h = min(step, horizon - s)
        pos, vel, E, A, Ad = _jacobi_rk4(metric, pos, vel, E, A, Ad, h)
        s += h
        last = (s, A.copy(), Ad.copy())
        record_until(s)
    record_until(horizon + 1.0)
    return out


def _jacobi_rhs(metric, pos, vel, E, A, Ad):
    gam = christoffel(metric, pos)
    acc = -np.einsum("kij,i,j->k", gam, vel, vel)
    dE = -np.einsum("kij,i,ja->ka", gam, vel, E)
    sample = curvature_at(metric, pos)
    R = sample.riemann
    Rmat = np.einsum("ijkl,ia,j,k,lb->ab", R, E, vel, vel, E)
    return vel, acc, dE, Ad, -Rmat @ A


def _jacobi_rk4(metric, pos, vel, E, A, Ad, h):
    y = (pos, vel, E, A, Ad)

    def add(y0, k, c):
        return tuple(a + c * b for a, b in zip(y0, k))

    k1 = _jacobi_rhs(metric, *y)
    k2 = _jacobi_rhs(metric, *add(y, k1, 0.5 * h))
    k3 = _jacobi_rhs(metric, *add(y, k2, 0.5 * h))
    k4 = _jacobi_rhs(metric, *add(y, k3, h))
    return tuple(
        a + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
    )


def conjugate_scan(
    metric: MetricField,
    start: GeodesicState,
    length: float,
    step: float = 2e-3,
    domain: Optional[DomainSpec] = None,
) -> Optional[float]:
    """First arclength where the point-Jacobi determinant vanishes, if any."""
    m = metric.dim
    pos = np.asarray(start.position, dtype=float).copy()
    vel = np.asarray(start.velocity, dtype=float).copy()
    g = eval_metric(metric, pos)
    # transverse orthonormal frame: orthonormalize a basis against vel
    frame = orthonormal_frame(g)
    cols = [vel / math.sqrt(float(vel @ (g @ vel)))]
    for a in range(m):
        w = frame[:, a]
        for c in cols:
            w = w - float(w @ (g @ c)) * c
        norm = math.sqrt(max(float(w @ (g @ w)), 0.0))
        if norm > 1e-8:
            cols.append(w / norm)
        if len(cols) == m:
            break
    E = np.column_stack(cols[1:])
    k = E.shape[1]
    A = np.zeros((k, k))
    Ad = np.eye(k)

    if _is_coordinate_flat(metric):
        return None  # A(t) = t*I never vanishes again

    s = 0.0
    while s < length - 1e-15:
        h = min(step, length - s)
        pos, vel, E, A, Ad = _jacobi_rk4(metric, pos, vel, E, A, Ad, h)
        s += h
        if domain is not None and not domain.inside(pos, tol=1e-9):
            return None
        if s > 2 * step and np.linalg.det(A) <= 0.0:
            return s
    return None


# cut function and fiber records ---------------------------------------------


@dataclass
class FiberData:
    """Record of one boundary-normal fiber and its minimality window."""

    which: str
    x: Tuple[float, ...]
    dt: float
    ts: np.ndarray
    points: np.ndarray
    v: np.ndarray
    minimizing: np.ndarray
    cut_value: float
    truncated: bool
    exit_which: Optional[str]

    def csv_rows(self):
        for t, p, v, flag in zip(self.ts, self.points, self.v, self.minimizing):
            yield list(self.x) + [t, v, int(flag)]


def cut_locus_node_fraction(
    domain: DomainSpec,
    n: int,
    tol_cells: int = 2,
    fibers: int = 17,
    metric: Optional[MetricField] = None,
) -> float:
    """Fraction of the grid within tol of the sampled cut set.

    Fiber depths sample at the grid row spacing so the recorded cut
    positions align with grid rows, and the denominator counts cells
    rather than nodes; both choices make the fraction halve cleanly
    under refinement, reflecting that the cut set carries no volume.
    """
    from .gridfields import build_grid, face_source_mask, grid_distance_field

    grid = build_grid(domain, n)
    field = grid_distance_field(
        domain, grid, face_source_mask(grid, domain.dirichlet), metric=metric
    )
    cut_points = []
    for which in domain.dirichlet:
        for x in domain.face_samples(fibers):
            gap = domain.face_value("top", x) - domain.face_value("bottom", x)
            fd = cut_function(domain, tuple(x), which, field, dt=gap / n, metric=metric)
            k = int(np.searchsorted(fd.ts, fd.cut_value))
            cut_points.append(fd.points[min(k, len(fd.points) - 1)])
    cut_points = np.array(cut_points)
    close = 0
    for node in grid.flat_coords():
        gap = domain.face_value("top", node[:-1]) - domain.face_value("bottom", node[:-1])
        tol = tol_cells * gap / n
        d = np.abs(node[-1] - cut_points[:, -1])
        if float(d.min()) <= tol + 1e-12:
            close += 1
    cells = grid.size // (n + 1) * n
    return close / cells


def cut_function(
    domain: DomainSpec,
    x,
    which: str,
    distance_field,
    dt: Optional[float] = None,
    metric: Optional[MetricField] = None,
) -> FiberData:
    """Largest depth at which the normal fiber still realizes the distance.

    Samples the fiber at spacing dt, compares the grid distance of each
    sample with its depth at tolerance 2h + 1e-6, and truncates at the
    first disagreement or at the exit of the fiber through the boundary.
    """
    metric = metric or domain.ambient
    x = tuple(domain.wrap_base(x))
    if dt is None:
        dt = distance_field.h / 2.0
    tol = 2.0 * distance_field.h + 1e-6
    horizon = 3.0 * _gap_bound(domain)
    fiber = normal_fiber(domain, x, which, horizon=horizon, metric=metric)
    end = fiber.length
    ts = np.arange(0.0, end, dt)
    if end - (ts[-1] if len(ts) else 0.0) > 1e-9:
        ts = np.append(ts, end)
    points = np.array([fiber.position_at(t) for t in ts])
    v = fiber_distortions(domain, x, which, ts, metric=metric, fiber=fiber)
    flags = np.zeros(len(ts), dtype=bool)
    cut = 0.0
    broken = False
    for k, t in enumerate(ts):
        d = distance_field.at(points[k])
        ok = math.isfinite(d) and abs(d - t) <= tol and v[k] > 0.0
        if ok and not broken:
            flags[k] = True
            cut = t
        else:
            broken = True
    truncated = fiber.exited and not broken
    return FiberData(
        which,
        x,
        float(dt),
        ts,
        points,
        v,
        flags,
        float(cut),
        truncated,
        fiber.exit_which,
    )
