"""Slab domains bounded by two graphs inside a product manifold.

A domain is the region between two smooth graph functions over a base
manifold, `bot(x) <= t <= top(x)`, carrying the product ambient metric
`g_base + dt^2` (or a deformed replacement).  Each of the two graph
faces is assigned to the Dirichlet or the Neumann part of the boundary.
This module builds and validates such domains and provides their
closed-form boundary geometry: outward unit normals, the second
fundamental form of the faces, width and collar-depth audits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff
from .expressions import Expression, parse_expression
from .metrics import (
    BASE_COORD_NAMES,
    MetricField,
    SampleRegion,
    bounds_report,
    custom_metric,
    eval_metric,
    metric_jet,
    product_metric,
)

__all__ = [
    "Axis",
    "DomainSpec",
    "BoundaryPoint",
    "ShapeReport",
    "WidthReport",
    "GeometryAudit",
    "DegenerateSlabError",
    "NoDirichletFaceError",
    "build_domain",
    "unit_normal",
    "shape_report",
    "finite_width_report",
    "bounded_geometry_audit",
]

FACES = ("top", "bottom")


class DegenerateSlabError(ValueError):
    pass


class NoDirichletFaceError(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    periodic: bool

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def wrap(self, v: float) -> float:
        if not self.periodic:
            return v
        return self.lo + (v - self.lo) % self.span

    def samples(self, n: int) -> np.ndarray:
        if self.periodic:
            return self.lo + self.span * np.arange(n) / n
        return np.linspace(self.lo, self.hi, n)


@dataclass(frozen=True)
class DomainSpec:
    """Validated slab domain with partitioned graph boundary."""

    base: MetricField
    top: Expression
    bot: Expression
    dirichlet: Tuple[str, ...]
    neumann: Tuple[str, ...]
    axes: Tuple[Axis, ...]
    ambient: MetricField
    eps: float
    eps_resolution: int
    deformation: object = None   # set by the product-deformation module

    @property
    def m(self) -> int:
        return self.base.dim + 1

    @property
    def base_names(self) -> Tuple[str, ...]:
        return self.base.coord_names

    def face_expr(self, which: str) -> Expression:
        if which == "top":
            return self.top
        if which == "bottom":
            return self.bot
        raise ValueError(f"unknown face {which!r}")

    def face_sign(self, which: str) -> float:
        return 1.0 if which == "top" else -1.0

    def face_value(self, which: str, x: Sequence[float]) -> float:
        env = dict(zip(self.base_names, x))
        return float(autodiff.value_of(self.face_expr(which)(env)))

    def graph_point(self, x: Sequence[float], which: str) -> np.ndarray:
        return np.array(list(x) + [self.face_value(which, x)], dtype=float)

    def wrap_base(self, x: Sequence[float]) -> Tuple[float, ...]:
        return tuple(ax.wrap(float(v)) for ax, v in zip(self.axes, x))

    def slab_fraction(self, p: Sequence[float]) -> float:
        """Relative height of a point: 0 on the bottom graph, 1 on the top."""
        x = self.wrap_base(p[:-1])
        lo = self.face_value("bottom", x)
        hi = self.face_value("top", x)
        return (float(p[-1]) - lo) / (hi - lo)

    def inside(self, p: Sequence[float], tol: float = 0.0) -> bool:
        x = p[:-1]
        for ax, v in zip(self.axes, x):
            if not ax.periodic and not (ax.lo - tol <= float(v) <= ax.hi + tol):
                return False
        x = self.wrap_base(x)
        t = float(p[-1])
        return self.face_value("bottom", x) - tol <= t <= self.face_value("top", x) + tol

    def exit_face(self, p: Sequence[float]) -> Optional[str]:
        """Which face (or 'side') a point left through, None if inside."""
        x = p[:-1]
        for ax, v in zip(self.axes, x):
            if not ax.periodic and not (ax.lo <= float(v) <= ax.hi):
                return "side"
        x = self.wrap_base(x)
        t = float(p[-1])
        if t < self.face_value("bottom", x):
            return "bottom"
        if t > self.face_value("top", x):
            return "top"
        return None

    def face_samples(self, n: int) -> np.ndarray:
        axes = [ax.samples(n) for ax in self.axes]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([G.reshape(-1) for G in grids], axis=-1)

    def sample_region(self, n: int, pad: float = 0.0) -> SampleRegion:
        """Bounding sample box of the slab in ambient coordinates."""
        base_pts = self.face_samples(max(n, 64))
        tops = np.array([self.face_value("top", x) for x in base_pts])
        bots = np.array([self.face_value("bottom", x) for x in base_pts])
        bounds = [(ax.lo, ax.hi) for ax in self.axes]
        bounds.append((bots.min() - pad, tops.max() + pad))
        periodic = [ax.periodic for ax in self.axes] + [False]
        return SampleRegion.box(bounds, n, periodic)


@dataclass(frozen=True)
class BoundaryPoint:
    which: str
    x: Tuple[float, ...]
    ambient: np.ndarray
    normal: np.ndarray          # outward unit normal in ambient coordinates


@dataclass(frozen=True)
class ShapeReport:
    which: str
    x: Tuple[float, ...]
    ii: np.ndarray              # second fundamental form, graph coordinates, outward normal
    mean_curvature: float
    sup_norms: dict


@dataclass(frozen=True)
class WidthReport:
    radius: float               # max sampled distance to the Dirichlet faces
    h: float                    # grid resolution of the distance field
    unreachable: int
    infinite: bool


@dataclass(frozen=True)
class GeometryAudit:
    collar_depth: dict          # per-face fold-free depth of the normal map
    r_partial: float
    conjugate_min: Optional[float]
    bounds: object              # BoundsReport of the ambient metric
    shape_sup: dict             # per-face second-fundamental-form sup norms
    eps: float
    findings: tuple


def build_domain(fragment: dict) -> DomainSpec:
    """Validate a domain fragment and construct the slab it describes.

    Expected keys: ``base`` (family/dim/phi plus ``period`` or ``range``),
    ``top``, ``bot``, ``dirichlet``, ``neumann``.
    """
    allowed = {"base", "top", "bot", "dirichlet", "neumann", "deform"}
    unknown = set(fragment) - allowed
    if unknown:
        raise ValueError(f"unknown domain key(s): {sorted(unknown)}")
    base_cfg = dict(fragment.get("base", {"family": "flat", "dim": 1, "period": 2 * math.pi}))
    base_allowed = {"family", "dim", "phi", "period", "range"}
    unknown = set(base_cfg) - base_allowed
    if unknown:
        raise ValueError(f"unknown base key(s): {sorted(unknown)}")
    dim = int(base_cfg.get("dim", 1))
    if dim not in (1, 2):
        raise ValueError("base dim must be 1 or 2")
    family = base_cfg.get("family", "flat")
    names = BASE_COORD_NAMES[:dim]
    if family == "flat":
        from .metrics import flat_metric

        base = flat_metric(dim)
    elif family == "conformal":
        from .metrics import conformal_metric

        base = conformal_metric(dim, base_cfg.get("phi", "0"))
    else:
        raise ValueError(f"unknown base family {family!r}")

    if ("period" in base_cfg) == ("range" in base_cfg):
        raise ValueError("base needs exactly one of 'period' or 'range'")
    axes = []
    if "period" in base_cfg:
        periods = base_cfg["period"]
        if isinstance(periods, (int, float)):
            periods = [periods] * dim
        for P in periods:
            axes.append(Axis(0.0, float(P), True))
    else:
        ranges = base_cfg["range"]
        if ranges and isinstance(ranges[0], (int, float)):
            ranges = [ranges] * dim
        for lo, hi in ranges:
            axes.append(Axis(float(lo), float(hi), False))
    if len(axes) != dim:
        raise ValueError("extent does not match base dimension")

    top = parse_expression(fragment.get("top", "1"), allowed_variables=names)
    bot = parse_expression(fragment.get("bot", "0"), allowed_variables=names)
    dirichlet = tuple(fragment.get("dirichlet", ["bottom"]))
    neumann = tuple(fragment.get("neumann", [f for f in FACES if f not in dirichlet]))
    for f in dirichlet + neumann:
        if f not in FACES:
            raise ValueError(f"unknown face {f!r} in boundary partition")
    if set(dirichlet) & set(neumann):
        raise ValueError("a face cannot be both Dirichlet and Neumann")
    if set(dirichlet) | set(neumann) != set(FACES):
        raise ValueError("every face must be assigned to Dirichlet or Neumann")

    scan_n = 512 if dim == 1 else 96
    domain = DomainSpec(
        base=base,
        top=top,
        bot=bot,
        dirichlet=dirichlet,
        neumann=neumann,
        axes=tuple(axes),
        ambient=product_metric(base),
        eps=0.0,
        eps_resolution=scan_n,
    )
    pts = domain.face_samples(scan_n)
    gaps = np.array(
        [domain.face_value("top", x) - domain.face_value("bottom", x) for x in pts]
    )
    eps = float(gaps.min())
    if eps <= 0.0:
        raise DegenerateSlabError(
            f"degenerate slab: sampled top-bot minimum {eps:.3e} at resolution {scan_n}"
        )
    _check_periodicity(domain)
    object.__setattr__(domain, "eps", eps)
    return domain


def _check_periodicity(domain: DomainSpec) -> None:
    """Expressions on periodic axes must repeat with the declared period."""
    probes = domain.face_samples(7)
    exprs = [("top", domain.top), ("bot", domain.bot)]
    phi = domain.base.params.get("phi")
    if phi is not None:
        exprs.append(("phi", phi))
    for a, ax in enumerate(domain.axes):
        if not ax.periodic:
            continue
        for name, expr in exprs:
            if domain.base_names[a] not in expr.variables:
                continue
            for x in probes:
                env = dict(zip(domain.base_names, x))
                shifted = dict(env)
                shifted[domain.base_names[a]] = env[domain.base_names[a]] + ax.span
                v0 = float(autodiff.value_of(expr(env)))
                v1 = float(autodiff.value_of(expr(shifted)))
                if abs(v1 - v0) > 1e-9 * max(1.0, abs(v0)):
                    raise ValueError(
                        f"expression for {name!r} is not periodic with period "
                        f"{ax.span:.6g} along {domain.base_names[a]!r}"
                    )


# boundary geometry ---------------------------------------------------------


def _face_jet(domain: DomainSpec, x, which: str):
    """(f, grad f, hess f) of the graph expression at a base point."""
    expr = domain.face_expr(which)
    names = domain.base_names

    def fn(coords):
        return expr(dict(zip(names, coords)))

    return autodiff.value_gradient_hessian(fn, x)


def unit_normal(domain: DomainSpec, x, which: str) -> BoundaryPoint:
    """Outward unit normal of a graph face under the product ambient metric.

    The normal of the face t = f(x) is proportional to grad f - dt; the
    sign is fixed so that the top face points in the +t direction and the
    bottom face in the -t direction.
    """
    x = domain.wrap_base(x)
    f, grad, _ = _face_jet(domain, x, which)
    g0 = eval_metric(domain.base, x)
    g0inv = np.linalg.inv(g0)
    grad_up = g0inv @ grad
    norm2 = float(grad @ grad_up)
    N = 1.0 / math.sqrt(1.0 + norm2)
    sign = domain.face_sign(which)
    nu = np.empty(domain.m)
    nu[:-1] = -sign * N * grad_up
    nu[-1] = sign * N
    ambient = np.array(list(x) + [f], dtype=float)
    return BoundaryPoint(which, tuple(x), ambient, nu)


def second_fundamental_form(domain: DomainSpec, x, which: str) -> np.ndarray:
    """II in graph coordinates with respect to the outward unit normal.

    For graphs in a product metric this reduces to the covariant Hessian
    of the graph function scaled by the normalization factor.
    """
    x = domain.wrap_base(x)
    f, grad, hess = _face_jet(domain, x, which)
    g0, dg0, _ = metric_jet(domain.base, x, order=1)
    from .metrics import _christoffel_from_jet

    gamma = _christoffel_from_jet(g0, dg0)
    cov_hess = hess - np.einsum("kij,k->ij", gamma, grad)
    g0inv = np.linalg.inv(g0)
    N = 1.0 / math.sqrt(1.0 + float(grad @ (g0inv @ grad)))
    return domain.face_sign(which) * N * cov_hess


def induced_face_metric(domain: DomainSpec, which: str) -> MetricField:
    """The metric induced on a graph face, in base parameter coordinates.

    Entries are g0_ij + (d_i f)(d_j f); the graph gradient is extracted by
    dual seeding at the value point, so the field itself uses
    finite-difference jets (enough for face geodesics).
    """
    base = domain.base
    expr = domain.face_expr(which)
    names = base.coord_names
    dim = base.dim

    def graph(coords):
        return expr(dict(zip(names, coords)))

    def fn(coords):
        vals = [autodiff.value_of(c) for c in coords]
        raw = base.matrix_fn(vals)
        df = autodiff.gradient(graph, vals)
        return [
            [autodiff.value_of(raw[i][j]) + df[i] * df[j] for j in range(dim)]
            for i in range(dim)
        ]

    return custom_metric(
        dim,
        fn,
        coord_names=names,
        family="face",
        supports_ad=False,
        vectorized=False,
    )


def shape_report(domain: DomainSpec, x, which: str, sup_samples: int = 0) -> ShapeReport:
    """Second fundamental form at a point, with optional sampled sup norms.

    Tangential-derivative sup norms are approximated by differencing II in
    the base parameter coordinates over a face sample (an audit-grade
    truncation).
    """
    x = domain.wrap_base(x)
    ii = second_fundamental_form(domain, x, which)
    _, grad, _ = _face_jet(domain, x, which)
    g0 = eval_metric(domain.base, x)
    h = g0 + np.outer(grad, grad)
    mean = float(np.trace(np.linalg.solve(h, ii)))
    sup: dict = {}
    if sup_samples:
        step = 1e-3
        vals = {"II": 0.0, "dII": 0.0, "d2II": 0.0}
        for xs in domain.face_samples(sup_samples):
            ii0 = second_fundamental_form(domain, xs, which)
            vals["II"] = max(vals["II"], float(np.max(np.abs(ii0))))
            for a in range(domain.base.dim):
                xp = np.array(xs, dtype=float)
                xm = xp.copy()
                xp[a] += step
                xm[a] -= step
                iip = second_fundamental_form(domain, xp, which)
                iim = second_fundamental_form(domain, xm, which)
                vals["dII"] = max(vals["dII"], float(np.max(np.abs(iip - iim))) / (2 * step))
                vals["d2II"] = max(
                    vals["d2II"],
                    float(np.max(np.abs(iip - 2 * ii0 + iim))) / (step * step),
                )
        sup = vals
    return ShapeReport(which, tuple(x), ii, mean, sup)


# width and bounded-geometry audits ----------------------------------------


def finite_width_report(domain: DomainSpec, distance_field) -> WidthReport:
    """Max sampled distance to the Dirichlet faces; flags unreachable parts."""
    values = np.asarray(distance_field.values, dtype=float)
    finite = np.isfinite(values)
    unreachable = int(values.size - finite.sum())
    if not finite.any():
        return WidthReport(math.inf, distance_field.h, unreachable, True)
    radius = float(values[finite].max())
    return WidthReport(radius, distance_field.h, unreachable, unreachable > 0)


def collar_depth(domain: DomainSpec, grid=None, n: int = 33, samples: int = 17,
                 metric: MetricField | None = None) -> dict:
    """Fold-free depth of the inward normal map, per face.

    A fold at depth t is detected when the grid distance back to the
    launching face disagrees with t, or when the fiber volume distortion
    loses positivity; the reported depth is the largest clean t, capped
    at the exit of the fiber from the slab.
    """
    from .geodesics import normal_fiber, jacobi_distortion
    from .gridfields import build_grid, face_source_mask, grid_distance_field

    if grid is None:
        grid = build_grid(domain, n)
    metric = metric or domain.ambient
    out = {}
    horizon = _max_gap(domain)
    for which in FACES:
        field = grid_distance_field(domain, grid, face_source_mask(grid, [which]), metric=metric)
        tol = 2 * field.h + 1e-6
        depth = math.inf
        for x in domain.face_samples(samples):
            fiber = normal_fiber(domain, tuple(x), which, horizon=horizon, metric=metric)
            ts = np.linspace(0.0, fiber.length, 33)[1:]
            dets = jacobi_distortion(domain, tuple(x), which, ts, metric=metric)
            ok = fiber.length
            for t, v in zip(ts, dets):
                if v <= 0.0:
                    ok = t
                    break
                d = field.at(fiber.position_at(t))
                if not math.isfinite(d) or abs(d - t) > tol:
                    ok = t
                    break
            depth = min(depth, ok)
        out[which] = depth
    return out


def _max_gap(domain: DomainSpec) -> float:
    pts = domain.face_samples(128)
    return float(
        max(domain.face_value("top", x) - domain.face_value("bottom", x) for x in pts)
    )


def bounded_geometry_audit(domain: DomainSpec, n: int = 33, seed: int = 0,
                           k_max: int = 1, interior_geodesics: int = 8) -> GeometryAudit:
    """Sampled audit of the collar, conjugate-point and curvature conditions.

    Always returns; failed conditions appear as findings rather than
    exceptions.
    """
    from .geodesics import GeodesicState, conjugate_scan
    from .gridfields import build_grid

    grid = build_grid(domain, n)
    collars = collar_depth(domain, grid)
    r_partial = min(collars.values())
    findings = []

    rng = np.random.default_rng(seed)
    length_cap = 2.0 * _max_gap(domain) + max(ax.span for ax in domain.axes)
    conj_min = None
    for _ in range(interior_geodesics):
        x = [ax.lo + ax.span * rng.random() for ax in domain.axes]
        lo = domain.face_value("bottom", x)
        hi = domain.face_value("top", x)
        t = lo + (0.2 + 0.6 * rng.random()) * (hi - lo)
        p = np.array(list(x) + [t])
        v = rng.standard_normal(domain.m)
        g = eval_metric(domain.ambient, p)
        v = v / math.sqrt(float(v @ (g @ v)))
        s = conjugate_scan(domain.ambient, GeodesicState(p, v, 0.0), length_cap, domain=domain)
        if s is not None:
            conj_min = s if conj_min is None else min(conj_min, s)
    if conj_min is not None:
        findings.append(f"conjugate point within {conj_min:.4g} of an interior sample")

    region = domain.sample_region(17)
    bounds = bounds_report(domain.ambient, region, k_max=k_max) if domain.ambient.supports_ad else None
    shape_sup = {
        which: shape_report(domain, domain.face_samples(3)[0], which, sup_samples=17).sup_norms
        for which in FACES
    }
    if r_partial <= 0:
        findings.append("collar depth audit found no fold-free depth")
    return GeometryAudit(
        collar_depth=collars,
        r_partial=r_partial,
        conjugate_min=conj_min,
        bounds=bounds,
        shape_sup=shape_sup,
        eps=domain.eps,
        findings=tuple(findings),
    )
