"""Boundary-adapted chart atlases and uniform partitions of unity.

Charts around boundary centers combine a geodesic parametrization of the
face with the inward normal flow; interior centers use geodesic normal
coordinates in an orthonormal frame.  Covering centers come from a
greedy maximal separated pass over the grid, boundary first, then the
deep interior.  Subordinate partition functions are ratios of smooth
plateau bumps, so they sum to one exactly and vanish identically outside
their windows.  Atlas construction requires a periodic base extent;
slabs with box extents have boundary corners, which this module does not
parametrize.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import value_of
from .deformation import plateau_bump
from .domains import DomainSpec
from .geodesics import GeodesicState, conjugate_scan, integrate_geodesic, normal_fiber
from .gridfields import MappedGrid, build_grid, face_source_mask, grid_distance_field
from .metrics import MetricField, eval_metric, metric_values, orthonormal_frame

__all__ = [
    "FermiAtlas",
    "BoundaryChart",
    "InteriorChart",
    "ChartInversionError",
    "fermi_radius",
    "build_covering",
    "build_atlas",
    "partition_sobolev_norm",
]


class ChartInversionError(RuntimeError):
    def __init__(self, point):
        super().__init__(f"chart inversion failure at point {tuple(point)}")
        self.point = tuple(point)


class FaceCurve:
    """Arclength parametrization of a graph face over a periodic 1-D base."""

    def __init__(self, domain: DomainSpec, which: str, samples: int = 8192):
        if domain.base.dim != 1:
            raise NotImplementedError("face curves support 1-D bases only")
        ax = domain.axes[0]
        if not ax.periodic:
            raise NotImplementedError("atlas charts need a periodic base extent")
        self.domain = domain
        self.which = which
        self.ax = ax
        xs = ax.lo + ax.span * np.arange(samples + 1) / samples
        from .domains import induced_face_metric

        face = induced_face_metric(domain, which)
        speeds = np.array([math.sqrt(value_of(face.matrix_fn((x,))[0][0])) for x in xs])
        seg = 0.5 * (speeds[1:] + speeds[:-1]) * np.diff(xs)
        self.xs = xs
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        self.total = float(self.arc[-1])

    def arclength_of(self, x: float) -> float:
        x = self.ax.wrap(x)
        return float(np.interp(x, self.xs, self.arc))

    def x_of_arclength(self, s: float) -> float:
        s = s % self.total
        return float(np.interp(s, self.arc, self.xs))

    def offset(self, x0: float, ds: float) -> float:
        """Base coordinate at signed arclength ds from x0 along the face."""
        return self.x_of_arclength(self.arclength_of(x0) + ds)

    def signed_gap(self, x0: float, x1: float) -> float:
        """Shortest signed arclength from x0 to x1 along the closed face."""
        d = (self.arclength_of(x1) - self.arclength_of(x0)) % self.total
        if d > self.total / 2:
            d -= self.total
        return d

    def distance(self, x0: float, x1: float) -> float:
        return abs(self.signed_gap(x0, x1))

    def offset_point(self, x0, xhat) -> Tuple[float, ...]:
        return (self.offset(float(x0[0]), float(xhat[0])),)


class FaceExp:
    """Geodesic exponential of a graph face over a periodic 2-D base."""

    def __init__(self, domain: DomainSpec, which: str):
        if not all(ax.periodic for ax in domain.axes):
            raise NotImplementedError("atlas charts need a periodic base extent")
        self.domain = domain
        self.which = which
        from .domains import induced_face_metric

        self.metric = induced_face_metric(domain, which)
        self._frames = {}

    def frame(self, x0) -> np.ndarray:
        key = tuple(round(float(v), 12) for v in x0)
        E = self._frames.get(key)
        if E is None:
            h = np.array(
                [[value_of(e) for e in row] for row in self.metric.matrix_fn(key)]
            )
            E = orthonormal_frame(h)
            self._frames[key] = E
        return E

    def offset_point(self, x0, xhat) -> Tuple[float, ...]:
        """Base coordinates of the face geodesic from x0 with frame step xhat."""
        xhat = np.asarray(xhat, dtype=float)
        norm = float(np.linalg.norm(xhat))
        if norm < 1e-15:
            return tuple(float(v) for v in x0)
        v = self.frame(x0) @ xhat / norm
        path = integrate_geodesic(
            self.metric,
            GeodesicState(np.asarray(x0, dtype=float), v, 0.0),
            norm,
            step=min(2e-3, norm / 16),
        )
        return tuple(float(c) for c in path.position_at(norm))


@dataclass
class BoundaryChart:
    """kappa(xhat, t): face geodesic through the center, then normal flow."""

    domain: DomainSpec
    which: str
    x_center: Tuple[float, ...]
    r: float
    face_map: object            # FaceCurve (1-D faces) or FaceExp (2-D faces)
    metric: MetricField

    kind: str = "boundary"

    def __post_init__(self):
        self._fiber_cache = {}
        self.bdim = self.domain.base.dim
        amb = self.metric
        self._flat = amb.family == "flat" or (
            amb.family == "product" and amb.base is not None and amb.base.family == "flat"
        )

    @property
    def center_ambient(self) -> np.ndarray:
        return self.domain.graph_point(self.x_center, self.which)

    def _fiber(self, xhat):
        key = tuple(round(float(v), 12) for v in xhat)
        f = self._fiber_cache.get(key)
        if f is None:
            xb = self.face_map.offset_point(self.x_center, xhat)
            f = normal_fiber(
                self.domain,
                xb,
                self.which,
                horizon=2.0 * self.r,
                metric=self.metric,
            )
            if len(self._fiber_cache) > 4096:
                self._fiber_cache.clear()
            self._fiber_cache[key] = f
        return f

    def forward(self, xi: Sequence[float]) -> np.ndarray:
        xhat, t = np.asarray(xi[:-1], dtype=float), float(xi[-1])
        fiber = self._fiber(xhat)
        return fiber.position_at(min(t, fiber.length))

    def normal_velocity(self, xi: Sequence[float]) -> np.ndarray:
        xhat, t = np.asarray(xi[:-1], dtype=float), float(xi[-1])
        fiber = self._fiber(xhat)
        return fiber.velocity_at(min(t, fiber.length))

    def inverse(self, q: Sequence[float], max_iter: int = 50) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        dom = self.domain
        if self._flat and self.bdim == 1:
            expr = dom.face_expr(self.which)
            if expr.is_constant:
                xfoot = q[0]
            else:
                xfoot = self._foot_newton(q, max_iter)
            f = float(value_of(expr(dict(zip(dom.base_names, (xfoot,))))))
            grad = _grad1(dom, self.which, xfoot)
            N = 1.0 / math.sqrt(1.0 + grad * grad)
            t = (f - q[1]) / N * dom.face_sign(self.which)
            xhat = self.face_map.signed_gap(self.x_center[0], xfoot)
            return np.array([xhat, t])
        return _newton_inverse(self, q, start=self._initial_guess(q), max_iter=max_iter)

    def _foot_newton(self, q, max_iter):
        """Foot point of a straight normal line from q onto the graph face."""
        from .autodiff import HyperDual

        dom = self.domain
        expr = dom.face_expr(self.which)
        span = dom.axes[0].span
        xfoot = q[0]
        for _ in range(max_iter):
            hd = expr({dom.base_names[0]: HyperDual(xfoot, 1.0, 1.0)})
            if not isinstance(hd, HyperDual):
                hd = HyperDual(float(hd))
            F = xfoot + (hd.a - q[1]) * hd.b - q[0]
            # residual wraps onto the nearest periodic representative
            F = (F + span / 2) % span - span / 2
            dF = 1.0 + hd.b * hd.b + (hd.a - q[1]) * hd.d
            if abs(dF) < 1e-14:
                raise ChartInversionError(q)
            step = F / dF
            xfoot -= step
            if abs(step) < 1e-13:
                return xfoot
        raise ChartInversionError(q)

    def _initial_guess(self, q) -> np.ndarray:
        delta = np.asarray(q[:-1], dtype=float) - np.asarray(self.x_center, dtype=float)
        for a, ax in enumerate(self.domain.axes):
            if ax.periodic:
                delta[a] = (delta[a] + ax.span / 2) % ax.span - ax.span / 2
        f = self.domain.face_value(self.which, self.domain.wrap_base(q[:-1]))
        t = abs(f - float(q[-1]))
        if self.bdim == 1:
            xhat = [self.face_map.signed_gap(self.x_center[0], float(q[0]))]
        else:
            xhat = np.linalg.solve(self.face_map.frame(self.x_center), delta)
        return np.concatenate([np.atleast_1d(xhat), [t]])

    def contains(self, xi) -> bool:
        radial = float(np.linalg.norm(np.asarray(xi[:-1], dtype=float)))
        return radial < self.r and -1e-12 <= float(xi[-1]) < self.r

    def bump(self, xi) -> float:
        if not (-1e-12 <= float(xi[-1]) < self.r):
            return 0.0
        radial = float(np.linalg.norm(np.asarray(xi[:-1], dtype=float)))
        return plateau_bump(radial / self.r) * plateau_bump(float(xi[-1]) / self.r)


def _grad1(dom, which, x):
    from .autodiff import HyperDual

    expr = dom.face_expr(which)
    hd = expr({dom.base_names[0]: HyperDual(x, 1.0)})
    return hd.b if isinstance(hd, HyperDual) else 0.0


@dataclass
class InteriorChart:
    """Geodesic normal coordinates in an orthonormal frame at the center."""

    domain: DomainSpec
    center: np.ndarray
    r: float
    metric: MetricField

    kind: str = "interior"

    def __post_init__(self):
        g = eval_metric(self.metric, self.center)
        self.frame = orthonormal_frame(g)
        amb = self.metric
        self._flat = amb.family == "flat" or (
            amb.family == "product" and amb.base is not None and amb.base.family == "flat"
        )

    @property
    def center_ambient(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def forward(self, v: Sequence[float]) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        w = self.frame @ v
        norm = float(np.linalg.norm(v))
        if norm < 1e-15:
            return self.center_ambient.copy()
        if self._flat:
            return self.center + w
        path = integrate_geodesic(
            self.metric,
            GeodesicState(self.center_ambient, w / norm, 0.0),
            norm,
            step=min(2e-3, norm / 16),
        )
        return path.position_at(norm)

    def inverse(self, q: Sequence[float], max_iter: int = 50) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        delta = q - self.center
        for a, ax in enumerate(self.domain.axes):
            if ax.periodic:
                delta[a] = (delta[a] + ax.span / 2) % ax.span - ax.span / 2
        if self._flat:
            return np.linalg.solve(self.frame, delta)
        guess = np.linalg.solve(self.frame, delta)
        return _newton_inverse(self, q, start=guess, max_iter=max_iter)

    def contains(self, v) -> bool:
        return float(np.linalg.norm(v)) < self.r

    def bump(self, v) -> float:
        return plateau_bump(float(np.linalg.norm(v)) / self.r)


def _newton_inverse(chart, q, start, max_iter=50, tol=1e-11):
    xi = np.asarray(start, dtype=float).copy()
    dim = xi.size
    fd = max(1e-7, 1e-6 * chart.r)

    def residual(z):
        r = chart.forward(z) - q
        for a, ax in enumerate(chart.domain.axes):
            if ax.periodic:
                r[a] = (r[a] + ax.span / 2) % ax.span - ax.span / 2
        return r

    F = residual(xi)
    for _ in range(max_iter):
        if float(np.linalg.norm(F)) < tol:
            return xi
        J = np.empty((q.size, dim))
        for a in range(dim):
            zp = xi.copy()
            zm = xi.copy()
            zp[a] += fd
            zm[a] -= fd
            J[:, a] = (residual(zp) - residual(zm)) / (2 * fd)
        try:
            step = np.linalg.lstsq(J, F, rcond=None)[0]
        except np.linalg.LinAlgError:
            raise ChartInversionError(q) from None
        scale = 1.0
        for _ in range(12):
            cand = xi - scale * step
            Fc = residual(cand)
            if np.linalg.norm(Fc) < np.linalg.norm(F):
                xi, F = cand, Fc
                break
            scale *= 0.5
        else:
            raise ChartInversionError(q)
    if float(np.linalg.norm(F)) < 10 * tol:
        return xi
    raise ChartInversionError(q)


# covering construction -------------------------------------------------------


def fermi_radius(
    domain: DomainSpec,
    grid: Optional[MappedGrid] = None,
    cap: Optional[float] = None,
    collar: Optional[dict] = None,
    seed: int = 0,
) -> float:
    """Chart radius bound: min of half the boundary and collar scales and a
    quarter of the interior injectivity scale, with infinities capped."""
    from .domains import collar_depth

    if cap is None:
        cap = max(ax.span for ax in domain.axes)
    if grid is None:
        grid = build_grid(domain, 17)
    if collar is None:
        collar = collar_depth(domain, grid, samples=9)
    r_partial = min(min(collar.values()), cap)

    # boundary injectivity: half the shortest closed loop on the faces
    r_inj_bdry = cap
    if domain.base.dim == 1 and domain.axes[0].periodic:
        for which in ("top", "bottom"):
            curve = FaceCurve(domain, which, samples=2048)
            r_inj_bdry = min(r_inj_bdry, curve.total / 2.0)
    elif all(ax.periodic for ax in domain.axes):
        pts = domain.face_samples(17)
        gmin = min(
            float(np.min(np.linalg.eigvalsh(eval_metric(domain.base, x)))) for x in pts
        )
        r_inj_bdry = min(
            r_inj_bdry, 0.5 * min(ax.span for ax in domain.axes) * math.sqrt(gmin)
        )

    # interior injectivity from conjugate-point scans
    rng = np.random.default_rng(seed)
    r_inj = cap
    for _ in range(6):
        x = [ax.lo + ax.span * rng.random() for ax in domain.axes]
        lo = domain.face_value("bottom", x)
        hi = domain.face_value("top", x)
        p = np.array(list(x) + [lo + (0.25 + 0.5 * rng.random()) * (hi - lo)])
        v = rng.standard_normal(domain.m)
        g = eval_metric(domain.ambient, p)
        v /= math.sqrt(float(v @ (g @ v)))
        s = conjugate_scan(domain.ambient, GeodesicState(p, v, 0.0), cap, domain=domain)
        if s is not None:
            r_inj = min(r_inj, s)
    return min(0.5 * r_inj_bdry, 0.25 * r_inj, 0.5 * r_partial)


def _face_grid_distances(domain, which, grid, source_xy):
    """Dijkstra distances over the base grid under the induced face metric."""
    import heapq

    from .domains import induced_face_metric
    from .gridfields import _stencil_offsets

    face = induced_face_metric(domain, which)
    axes = grid.base_axes[: grid.bdim]
    shape = tuple(len(a) for a in axes)
    pts = np.stack(
        [G.reshape(-1) for G in np.meshgrid(*axes, indexing="ij")], axis=-1
    )
    size = pts.shape[0]
    offsets = _stencil_offsets(grid.bdim, 2) if grid.bdim > 1 else [(-1,), (1,), (-2,), (2,)]
    index_grids = np.meshgrid(*[np.arange(k) for k in shape], indexing="ij")
    edges = [[] for _ in range(size)]
    for off in offsets:
        target = []
        for a, (o, k) in enumerate(zip(off, shape)):
            target.append((index_grids[a] + o) % k)
        tflat = np.ravel_multi_index([T.reshape(-1) for T in target], shape)
        delta = pts[tflat] - pts
        for a, ax in enumerate(domain.axes[: grid.bdim]):
            delta[:, a] = (delta[:, a] + ax.span / 2) % ax.span - ax.span / 2
        mids = pts + 0.5 * delta
        for u in range(size):
            h = np.array(
                [[value_of(e) for e in row] for row in face.matrix_fn(tuple(mids[u]))]
            )
            w = math.sqrt(float(delta[u] @ (h @ delta[u])))
            edges[u].append((int(tflat[u]), w))
    src = int(
        np.argmin(np.linalg.norm(_wrap_rows(domain, pts - np.asarray(source_xy)), axis=1))
    )
    dist = np.full(size, math.inf)
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in edges[u]:
            nd = d + w
            if nd < dist[v] - 1e-15:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return pts, dist


def _wrap_rows(domain, rows):
    rows = np.asarray(rows, dtype=float).copy()
    for a, ax in enumerate(domain.axes):
        if ax.periodic:
            rows[:, a] = (rows[:, a] + ax.span / 2) % ax.span - ax.span / 2
    return rows


def build_covering(domain: DomainSpec, grid: MappedGrid, r: float,
                   metric: Optional[MetricField] = None):
    """Greedy maximal (r/2)-separated centers: boundary faces first, then
    interior nodes at distance at least r from the boundary."""
    metric = metric or domain.ambient
    boundary_centers = []
    curves = {}
    if domain.base.dim == 1:
        for which in ("top", "bottom"):
            curve = FaceCurve(domain, which)
            curves[which] = curve
            accepted = []
            for x in grid.base_axes[0]:
                if all(curve.distance(x, xa) >= r / 2.0 for xa in accepted):
                    accepted.append(float(x))
            boundary_centers.extend((which, (xa,)) for xa in accepted)
    else:
        for which in ("top", "bottom"):
            curves[which] = FaceExp(domain, which)
            candidates = np.stack(
                [G.reshape(-1) for G in np.meshgrid(*grid.base_axes[: grid.bdim], indexing="ij")],
                axis=-1,
            )
            nearest = np.full(candidates.shape[0], math.inf)
            for k in range(candidates.shape[0]):
                if nearest[k] >= r / 2.0:
                    boundary_centers.append((which, tuple(candidates[k])))
                    _, dist = _face_grid_distances(domain, which, grid, candidates[k])
                    nearest = np.minimum(nearest, dist)

    bfield = grid_distance_field(
        domain, grid, face_source_mask(grid, ["top", "bottom"]), metric=metric
    )
    deep = bfield.values.reshape(-1) >= r - 1e-12
    nearest = np.full(grid.size, math.inf)
    interior_centers = []
    coords = grid.flat_coords()
    center_fields = []
    for idx in range(grid.size):
        if not deep[idx]:
            continue
        if nearest[idx] >= r / 2.0:
            src = np.zeros(grid.shape, dtype=bool)
            src.reshape(-1)[idx] = True
            dfield = grid_distance_field(domain, grid, src, metric=metric)
            center_fields.append(dfield)
            nearest = np.minimum(nearest, dfield.values.reshape(-1))
            interior_centers.append(coords[idx].copy())
    return boundary_centers, interior_centers, curves, bfield, center_fields


@dataclass
class FermiAtlas:
    """Covering charts, their partition of unity and the audit tables."""

    domain: DomainSpec
    grid: MappedGrid
    r: float
    r_fc: float
    charts: List[object]
    multiplicity: dict          # N_R for R in {r, 2r, 4r}
    overlap_bound: int          # max number of windows containing a node
    derivative_bounds: dict     # C_alpha for |alpha| <= 2
    chart_metric_sup: dict      # sup |pullback metric entries| and derivatives
    gauge_residual: float       # max |g_tt - 1|, |g_it| at t = 0 over samples
    phi_nodes: np.ndarray       # partition values at grid nodes, (n_charts, size)

    def partition_values(self, q) -> np.ndarray:
        """Values of every partition function at an ambient point."""
        bumps = np.array([_chart_bump(c, q) for c in self.charts])
        total = bumps.sum()
        if total <= 0.0:
            raise RuntimeError(f"coverage gap at point {tuple(q)}")
        return bumps / total

    def chart_count(self) -> int:
        return len(self.charts)


def _chart_bump(chart, q) -> float:
    # cheap reject on the ambient gap before attempting an inversion
    delta = np.asarray(q, dtype=float) - chart.center_ambient
    for a, ax in enumerate(chart.domain.axes):
        if ax.periodic:
            delta[a] = (delta[a] + ax.span / 2) % ax.span - ax.span / 2
    if np.linalg.norm(delta) > chart._reject:
        return 0.0
    try:
        xi = chart.inverse(q)
    except ChartInversionError:
        return 0.0
    return chart.bump(xi)


def build_atlas(
    domain: DomainSpec,
    grid: Optional[MappedGrid] = None,
    r: Optional[float] = None,
    seed: int = 0,
    metric: Optional[MetricField] = None,
) -> FermiAtlas:
    """Construct the covering, the charts, the partition of unity and audits."""
    metric = metric or domain.ambient
    if grid is None:
        grid = build_grid(domain, 32)
    r_fc = fermi_radius(domain, grid, seed=seed)
    if r is None:
        r = r_fc
    if r > r_fc * (1 + 1e-9):
        raise ValueError(f"chart radius {r} exceeds the allowed bound {r_fc}")

    boundary_centers, interior_centers, curves, bfield, _ = build_covering(
        domain, grid, r, metric=metric
    )
    g_all = metric_values(metric, grid.flat_coords())
    lam_min = float(np.min(np.linalg.eigvalsh(g_all)))
    reject = 2.0 * r / math.sqrt(max(lam_min, 1e-12))

    charts: List[object] = []
    for which, x in boundary_centers:
        c = BoundaryChart(domain, which, x, r, curves[which], metric)
        c._reject = reject
        charts.append(c)
    for p in interior_centers:
        c = InteriorChart(domain, p, r, metric)
        c._reject = reject
        charts.append(c)

    # partition values and overlap counts at every grid node
    coords = grid.flat_coords()
    bumps = np.zeros((len(charts), grid.size))
    for ci, chart in enumerate(charts):
        for k in range(grid.size):
            bumps[ci, k] = _chart_bump(chart, coords[k])
    totals = bumps.sum(axis=0)
    if np.any(totals <= 0.0):
        k = int(np.argmin(totals))
        raise RuntimeError(f"coverage gap at node {tuple(coords[k])}")
    phi_nodes = bumps / totals
    overlap_bound = int(np.max((bumps > 0.0).sum(axis=0)))

    multiplicity = _multiplicity_table(domain, grid, charts, r, metric)
    derivative_bounds, gauge_residual, chart_metric_sup = _chart_audits(
        domain, charts, r, metric
    )
    return FermiAtlas(
        domain=domain,
        grid=grid,
        r=float(r),
        r_fc=float(r_fc),
        charts=charts,
        multiplicity=multiplicity,
        overlap_bound=overlap_bound,
        derivative_bounds=derivative_bounds,
        chart_metric_sup=chart_metric_sup,
        gauge_residual=gauge_residual,
        phi_nodes=phi_nodes,
    )


def _multiplicity_table(domain, grid, charts, r, metric) -> dict:
    counts = np.zeros(grid.size, dtype=int)
    table = {}
    fields = []
    for chart in charts:
        src = np.zeros(grid.shape, dtype=bool)
        center = chart.center_ambient
        idx, frac = grid.locate(center)
        ind = tuple(
            (i + round(f)) % s if (a < grid.bdim and grid.base_periodic[a]) else min(i + round(f), s - 1)
        for a, (i, f, s) in enumerate(zip(idx, frac, grid.shape))
        )
        src[ind] = True
        fields.append(grid_distance_field(domain, grid, src, metric=metric).values.reshape(-1))
    dists = np.stack(fields)                      # (n_charts, size)
    for R in (r, 2 * r, 4 * r):
        table[f"{R:.6g}"] = int(np.max((dists < R).sum(axis=0)))
    return table


def _coord_delta(domain, a, b):
    """Coordinate difference wrapping periodic base axes onto the nearest
    representative, so secants near the seam stay local."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    for k, ax in enumerate(domain.axes):
        if ax.periodic:
            d[k] = (d[k] + ax.span / 2) % ax.span - ax.span / 2
    return d


def _chart_audits(domain, charts, r, metric):
    """Sampled derivative bounds of the partition functions, the normal-gauge
    residual and pullback-metric sups, over deterministic probe grids."""
    fd = 1e-3 * r
    c_alpha = {"0": 0.0, "1": 0.0, "2": 0.0}
    gauge = 0.0
    gsup = {"g": 0.0, "dg": 0.0}

    def phi_of(chart, xi):
        q = chart.forward(xi)
        bumps = [_chart_bump(c, q) for c in charts]
        total = sum(bumps)
        mine = chart.bump(xi)
        return mine / total if total > 0 else 0.0

    for chart in charts:
        if chart.kind == "boundary":
            axes = [np.linspace(-0.7 * r, 0.7 * r, 5)] * chart.bdim + [
                np.linspace(0.05 * r, 0.7 * r, 4)
            ]
        else:
            axes = [np.linspace(-0.5 * r, 0.5 * r, 4)] * domain.m
        probes = np.stack([G.reshape(-1) for G in np.meshgrid(*axes, indexing="ij")], axis=-1)
        for xi in probes:
            v0 = phi_of(chart, xi)
            c_alpha["0"] = max(c_alpha["0"], abs(v0))
            for a in range(len(xi)):
                xp = xi.copy()
                xm = xi.copy()
                xp[a] += fd
                xm[a] -= fd
                vp, vm = phi_of(chart, xp), phi_of(chart, xm)
                c_alpha["1"] = max(c_alpha["1"], abs(vp - vm) / (2 * fd))
                c_alpha["2"] = max(c_alpha["2"], abs(vp - 2 * v0 + vm) / (fd * fd))

        # pullback metric samples and the boundary gauge identities
        if chart.kind == "boundary":
            for s_probe in np.linspace(-0.6 * r, 0.6 * r, 5):
                for a in range(chart.bdim):
                    base = np.zeros(chart.bdim + 1)
                    base[a] = s_probe
                    xp = base.copy()
                    xm = base.copy()
                    xp[a] += fd
                    xm[a] -= fd
                    tangent = _coord_delta(domain, chart.forward(xp), chart.forward(xm)) / (2 * fd)
                    nu = chart.normal_velocity(base)
                    g = eval_metric(metric, chart.forward(base))
                    gauge = max(gauge, abs(float(nu @ (g @ nu)) - 1.0))
                    gauge = max(gauge, abs(float(tangent @ (g @ nu))))
        probe = probes[len(probes) // 2]
        G0 = _pullback(chart, probe, fd, metric)
        gsup["g"] = max(gsup["g"], float(np.max(np.abs(G0))))
        for a in range(len(probe)):
            xp = probe.copy()
            xm = probe.copy()
            xp[a] += fd
            xm[a] -= fd
            dG = (_pullback(chart, xp, fd, metric) - _pullback(chart, xm, fd, metric)) / (2 * fd)
            gsup["dg"] = max(gsup["dg"], float(np.max(np.abs(dG))))
    return c_alpha, gauge, gsup


def _pullback(chart, xi, fd, metric):
    dim = len(xi)
    cols = []
    for a in range(dim):
        xp = np.asarray(xi, dtype=float).copy()
        xm = xp.copy()
        xp[a] += fd
        xm[a] -= fd
        cols.append(_coord_delta(chart.domain, chart.forward(xp), chart.forward(xm)) / (2 * fd))
    J = np.column_stack(cols)
    g = eval_metric(metric, chart.forward(xi))
    return J.T @ g @ J


# partition-localized Sobolev norms ------------------------------------------


def _localization_cache(atlas: FermiAtlas, probe: int):
    """Per-chart probe grids with partition values and interpolation stencils.

    Everything here is independent of the sampled function, so repeated
    norm evaluations reduce to weighted sums.
    """
    key = ("loc", probe)
    cache = getattr(atlas, "_caches", None)
    if cache is None:
        cache = {}
        atlas._caches = cache
    if key in cache:
        return cache[key]
    import scipy.sparse

    grid = atlas.grid
    per_chart = []
    for ci, chart in enumerate(atlas.charts):
        r = atlas.r
        if chart.kind == "boundary":
            axes = [np.linspace(-r, r, probe)] * chart.bdim + [np.linspace(0.0, r, probe)]
        else:
            axes = [np.linspace(-r, r, probe)] * atlas.domain.m
        steps = [a[1] - a[0] for a in axes]
        mesh = np.meshgrid(*axes, indexing="ij")
        shape = mesh[0].shape
        phi = np.zeros(shape)
        rows, cols, weights = [], [], []
        flat_row = 0
        it = np.nditer(mesh[0], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            xi = np.array([mesh[a][idx] for a in range(len(axes))])
            row = flat_row
            flat_row += 1
            if not chart.contains(xi):
                continue
            q = chart.forward(xi)
            if not atlas.domain.inside(q, tol=1e-9):
                continue
            mine = chart.bump(xi)
            if mine <= 0.0:
                continue
            total = mine
            for cj, other in enumerate(atlas.charts):
                if cj != ci:
                    total += _chart_bump(other, q)
            phi[idx] = mine / total
            gidx, frac = grid.locate(q)
            for corner in itertools.product((0, 1), repeat=len(grid.shape)):
                wgt = 1.0
                ind = []
                for a in range(len(grid.shape)):
                    wgt *= frac[a] if corner[a] else (1.0 - frac[a])
                    i = gidx[a] + corner[a]
                    if a < grid.bdim and grid.base_periodic[a]:
                        i %= grid.shape[a]
                    else:
                        i = min(i, grid.shape[a] - 1)
                    ind.append(i)
                if wgt:
                    rows.append(row)
                    cols.append(int(np.ravel_multi_index(tuple(ind), grid.shape)))
                    weights.append(wgt)
        interp = scipy.sparse.coo_matrix(
            (weights, (rows, cols)), shape=(int(np.prod(shape)), grid.size)
        ).tocsr()
        per_chart.append((phi, interp, steps, shape))
    cache[key] = per_chart
    return per_chart


def partition_sobolev_norm(u_nodes: np.ndarray, atlas: FermiAtlas, k: int,
                           probe: int = 17):
    """Sum over charts of the Euclidean H^k norms of the localized pullbacks.

    Each term resamples phi_gamma * u through the chart on a uniform box
    grid and accumulates finite-difference derivatives up to order k with
    trapezoid quadrature.  Returns (norm, ratio) where ratio compares
    against the direct grid H^k norm of u.
    """
    if k not in (0, 1, 2):
        raise ValueError("partition Sobolev norms support k in {0, 1, 2}")
    u_nodes = np.asarray(u_nodes, dtype=float).reshape(-1)
    total_sq = 0.0
    for phi, interp, steps, shape in _localization_cache(atlas, probe):
        w = phi * (interp @ u_nodes).reshape(shape)
        total_sq += _box_hk_sq(w, steps, k)
    direct = _grid_hk_norm(atlas, u_nodes, k)
    ratio = math.sqrt(total_sq) / direct if direct > 0 else math.inf
    return math.sqrt(total_sq), ratio


def _box_hk_sq(w, steps, k):
    total = _trapz_nd(w * w, steps)
    fields = [w]
    for order in range(1, k + 1):
        next_fields = []
        for f in fields:
            for a in range(w.ndim):
                next_fields.append(np.gradient(f, steps[a], axis=a, edge_order=2))
        fields = next_fields
        for f in fields:
            total += _trapz_nd(f * f, steps)
    return total


def _trapz_nd(arr, steps):
    out = arr
    for a, h in enumerate(steps):
        out = np.trapezoid(out, dx=h, axis=0)
    return float(out)


def _grid_hk_norm(atlas, u_nodes, k):
    """Direct H^k norm of a node field by mapped-grid quadrature."""
    from .fem import discretize

    cache = getattr(atlas, "_caches", None)
    if cache is None:
        cache = {}
        atlas._caches = cache
    system = cache.get("system")
    if system is None:
        system = discretize(atlas.domain, atlas.grid.n, metric=None, grid=atlas.grid)
        cache["system"] = system
    u = u_nodes
    sq = float(u @ (system.M @ u))
    if k >= 1:
        sq += float(u @ (system.K @ u))
    if k >= 2:
        # second derivatives by index-space differencing mapped to coordinates
        shaped = u.reshape(atlas.grid.shape)
        hs = []
        for a, nodes in enumerate(atlas.grid.base_axes):
            hs.append(nodes[1] - nodes[0])
        hs.append(np.mean(np.diff(atlas.grid.coords[..., -1], axis=-1)))
        lap_sq = 0.0
        for a in range(shaped.ndim):
            d2 = np.gradient(
                np.gradient(shaped, hs[a], axis=a, edge_order=2), hs[a], axis=a, edge_order=2
            )
            lap_sq += float(np.mean(d2 * d2))
        vol = float(np.sum(system.M @ np.ones_like(u)))
        sq += lap_sq * vol
    return math.sqrt(sq)
