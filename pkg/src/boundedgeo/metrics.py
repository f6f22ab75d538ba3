"""Metric tensor fields and their curvature.

Closed-form metric families evaluate their entries through the tiny
expression language, so the same definition yields plain values, numpy
vectorized samples and exact first/second derivatives via dual numbers.
Curvature quantities (Christoffel symbols, Riemann and Ricci tensors,
sectional curvatures) follow from the derivative jet; sampled sup-norm
reports over a region feed the geometry audits.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from . import autodiff
from .expressions import parse_expression

__all__ = [
    "MetricField",
    "CurvatureSample",
    "BoundsReport",
    "SampleRegion",
    "DegenerateMetricError",
    "flat_metric",
    "conformal_metric",
    "product_metric",
    "custom_metric",
    "eval_metric",
    "metric_values",
    "metric_jet",
    "christoffel",
    "curvature_at",
    "orthonormal_frame",
    "frame_sup_norm",
    "covariant_riemann_derivative",
    "bounds_report",
]

BASE_COORD_NAMES = ("x", "y", "z")


class DegenerateMetricError(RuntimeError):
    """Raised when a metric evaluation is not positive definite."""

    def __init__(self, point):
        super().__init__(f"degenerate metric at point {tuple(point)}")
        self.point = tuple(point)


@dataclass(frozen=True)
class MetricField:
    """A metric tensor given by closed-form (or pointwise-computed) entries."""

    dim: int
    family: str
    coord_names: Tuple[str, ...]
    matrix_fn: Callable
    params: dict = dc_field(default_factory=dict)
    supports_ad: bool = True
    vectorized: bool = True
    base: Optional["MetricField"] = None

    def env(self, coords) -> dict:
        return dict(zip(self.coord_names, coords))


def flat_metric(dim: int) -> MetricField:
    def fn(coords):
        return [[1.0 if i == j else 0.0 for j in range(dim)] for i in range(dim)]

    return MetricField(dim, "flat", BASE_COORD_NAMES[:dim], fn)


def conformal_metric(dim: int, phi) -> MetricField:
    """g = exp(2*phi) * identity with phi an expression in the coordinates."""
    names = BASE_COORD_NAMES[:dim]
    phi = parse_expression(phi, allowed_variables=names)

    def fn(coords):
        env = dict(zip(names, coords))
        factor = autodiff.exp(2.0 * phi(env))
        return [[factor if i == j else 0.0 for j in range(dim)] for i in range(dim)]

    return MetricField(dim, "conformal", names, fn, params={"phi": phi})


def product_metric(base: MetricField) -> MetricField:
    """base metric plus a unit normal direction: g = g_base + dt^2."""
    dim = base.dim + 1
    names = base.coord_names + ("t",)

    def fn(coords):
        block = base.matrix_fn(coords[:-1])
        out = [[block[i][j] for j in range(base.dim)] + [0.0] for i in range(base.dim)]
        out.append([0.0] * base.dim + [1.0])
        return out

    return MetricField(
        dim,
        "product",
        names,
        fn,
        params=dict(base.params),
        supports_ad=base.supports_ad,
        vectorized=base.vectorized,
        base=base,
    )


def custom_metric(dim, matrix_fn, coord_names=None, family="custom",
                  supports_ad=False, vectorized=False, params=None) -> MetricField:
    names = tuple(coord_names) if coord_names else BASE_COORD_NAMES[: dim - 1] + ("t",)
    return MetricField(dim, family, names, matrix_fn, params or {}, supports_ad, vectorized)


# evaluation ---------------------------------------------------------------


def eval_metric(field: MetricField, p) -> np.ndarray:
    """Metric matrix at a point, checked for positive definiteness."""
    raw = field.matrix_fn(tuple(float(v) for v in p))
    g = np.array([[autodiff.value_of(e) for e in row] for row in raw], dtype=float)
    if not np.all(np.isfinite(g)):
        raise DegenerateMetricError(p)
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(p) from None
    return g


def metric_values(field: MetricField, points: np.ndarray) -> np.ndarray:
    """Metric matrices at an array of points, shape (..., m) -> (..., m, m)."""
    points = np.asarray(points, dtype=float)
    m = field.dim
    lead = points.shape[:-1]
    if field.vectorized:
        coords = tuple(points[..., k] for k in range(m))
        raw = field.matrix_fn(coords)
        out = np.empty(lead + (m, m))
        for i in range(m):
            for j in range(m):
                out[..., i, j] = raw[i][j]
        return out
    flat = points.reshape(-1, m)
    out = np.empty((flat.shape[0], m, m))
    for k, p in enumerate(flat):
        raw = field.matrix_fn(tuple(p))
        out[k] = [[autodiff.value_of(e) for e in row] for row in raw]
    return out.reshape(lead + (m, m))


def metric_jet(field: MetricField, p, order: int = 2):
    """(g, dg, ddg) with dg[a,i,j] = d_a g_ij and ddg[a,b,i,j] = d_a d_b g_ij.

    Uses dual-number differentiation for closed-form families and central
    finite differences otherwise; ddg is None when order < 2.
    """
    m = field.dim
    p = [float(v) for v in p]
    g = np.empty((m, m))
    dg = np.empty((m, m, m))
    ddg = np.empty((m, m, m, m)) if order >= 2 else None
    if field.supports_ad:
        pairs = (
            [(a, b) for a in range(m) for b in range(a, m)]
            if order >= 2
            else [(a, a) for a in range(m)]
        )
        for a, b in pairs:
            coords = [
                autodiff.HyperDual(v, 1.0 if k == a else 0.0, 1.0 if k == b else 0.0)
                for k, v in enumerate(p)
            ]
            raw = field.matrix_fn(coords)
            for i in range(m):
                for j in range(m):
                    e = raw[i][j]
                    if not isinstance(e, autodiff.HyperDual):
                        e = autodiff.HyperDual(float(e))
                    if a == b == 0:
                        g[i, j] = e.a
                    if a == b:
                        dg[a, i, j] = e.b
                    if order >= 2:
                        ddg[a, b, i, j] = e.d
                        ddg[b, a, i, j] = e.d
        return g, dg, ddg

    # finite-difference fallback for metrics without closed-form entries
    def mat(q):
        raw = field.matrix_fn(tuple(q))
        return np.array([[autodiff.value_of(e) for e in row] for row in raw])

    g[:] = mat(p)
    h1 = 1e-5
    for a in range(m):
        qp, qm = list(p), list(p)
        qp[a] += h1
        qm[a] -= h1
        dg[a] = (mat(qp) - mat(qm)) / (2 * h1)
    if order >= 2:
        h2 = 1e-3
        for a in range(m):
            for b in range(a, m):
                if a == b:
                    qp, qm = list(p), list(p)
                    qp[a] += h2
                    qm[a] -= h2
                    val = (mat(qp) - 2 * g + mat(qm)) / (h2 * h2)
                else:
                    qpp, qpm, qmp, qmm = list(p), list(p), list(p), list(p)
                    qpp[a] += h2
                    qpp[b] += h2
                    qpm[a] += h2
                    qpm[b] -= h2
                    qmp[a] -= h2
                    qmp[b] += h2
                    qmm[a] -= h2
                    qmm[b] -= h2
                    val = (mat(qpp) - mat(qpm) - mat(qmp) + mat(qmm)) / (4 * h2 * h2)
                ddg[a, b] = val
                ddg[b, a] = val
    return g, dg, ddg


def christoffel(field: MetricField, p) -> np.ndarray:
    """Connection coefficients Gamma[k,i,j] at p."""
    g, dg, _ = metric_jet(field, p, order=1)
    return _christoffel_from_jet(g, dg)


def _christoffel_from_jet(g, dg):
    ginv = np.linalg.inv(g)
    # lower[l,i,j] = (d_i g_jl + d_j g_il - d_l g_ij) / 2
    lower = 0.5 * (
        np.einsum("ijl->lij", dg) + np.einsum("jil->lij", dg) - dg
    )
    return np.einsum("kl,lij->kij", ginv, lower)


@dataclass(frozen=True)
class CurvatureSample:
    """Curvature data at one point in coordinate components."""

    point: Tuple[float, ...]
    metric: np.ndarray
    christoffel: np.ndarray        # Gamma[k,i,j]
    riemann: np.ndarray            # R[i,j,k,l], fully lowered
    ricci: np.ndarray
    sectional: dict                # {(i,j): curvature of the coordinate plane}

    def bianchi_residual(self) -> float:
        r = self.riemann
        return float(np.max(np.abs(r + np.einsum("jkil->ijkl", r) + np.einsum("kijl->ijkl", r))))


def curvature_at(field: MetricField, p) -> CurvatureSample:
    """Full curvature sample from the second-order metric jet."""
    m = field.dim
    g, dg, ddg = metric_jet(field, p, order=2)
    ginv = np.linalg.inv(g)
    lower = 0.5 * (np.einsum("ijl->lij", dg) + np.einsum("jil->lij", dg) - dg)
    gamma = np.einsum("kl,lij->kij", ginv, lower)
    # d_a Gamma[k,i,j]
    dginv = -np.einsum("km,amn,nl->akl", ginv, dg, ginv)
    dlower = 0.5 * (
        np.einsum("aijl->alij", ddg) + np.einsum("ajil->alij", ddg) - ddg
    )
    dgamma = np.einsum("akl,lij->akij", dginv, lower) + np.einsum(
        "kl,alij->akij", ginv, dlower
    )
    # R^l_{ijk}: rup[l,i,j,k]
    rup = (
        np.einsum("iljk->lijk", dgamma)
        - np.einsum("jlik->lijk", dgamma)
        + np.einsum("lim,mjk->lijk", gamma, gamma)
        - np.einsum("ljm,mik->lijk", gamma, gamma)
    )
    riem = np.einsum("lm,mijk->ijkl", g, rup)
    ricci = np.einsum("iijk->jk", rup)
    sectional = {}
    for i, j in itertools.combinations(range(m), 2):
        denom = g[i, i] * g[j, j] - g[i, j] ** 2
        sectional[(i, j)] = float(riem[i, j, j, i] / denom)
    return CurvatureSample(tuple(float(v) for v in p), g, gamma, riem, ricci, sectional)


# frame-invariant sup norms -------------------------------------------------


def orthonormal_frame(g: np.ndarray) -> np.ndarray:
    """Columns form a g-orthonormal frame: E^T g E = identity."""
    L = np.linalg.cholesky(g)
    return np.linalg.inv(L).T


def frame_sup_norm(tensor: np.ndarray, g: np.ndarray) -> float:
    """Max absolute component of a fully covariant tensor in an orthonormal frame."""
    E = orthonormal_frame(g)
    out = tensor
    for _ in range(tensor.ndim):
        out = np.tensordot(out, E, axes=([0], [0]))
    return float(np.max(np.abs(out)))


def covariant_riemann_derivative(field: MetricField, p, step: float = 1e-3):
    """(sample, nabla R) at p; nabla R[a,i,j,k,l] with Christoffel corrections."""
    m = field.dim
    sample = curvature_at(field, p)
    dR = np.empty((m,) + sample.riemann.shape)
    for a in range(m):
        qp, qm = list(p), list(p)
        qp[a] += step
        qm[a] -= step
        dR[a] = (curvature_at(field, qp).riemann - curvature_at(field, qm).riemann) / (2 * step)
    nabla = dR.copy()
    gam = sample.christoffel
    R = sample.riemann
    nabla -= np.einsum("mai,mjkl->aijkl", gam, R)
    nabla -= np.einsum("maj,imkl->aijkl", gam, R)
    nabla -= np.einsum("mak,ijml->aijkl", gam, R)
    nabla -= np.einsum("mal,ijkm->aijkl", gam, R)
    return sample, nabla


def _second_riemann_derivative(field: MetricField, p, step: float = 1e-3):
    m = field.dim
    sample, nabla1 = covariant_riemann_derivative(field, p, step)
    dN = np.empty((m,) + nabla1.shape)
    for b in range(m):
        qp, qm = list(p), list(p)
        qp[b] += step
        qm[b] -= step
        dN[b] = (
            covariant_riemann_derivative(field, qp, step)[1]
            - covariant_riemann_derivative(field, qm, step)[1]
        ) / (2 * step)
    gam = sample.christoffel
    nabla2 = dN.copy()
    # correction on each of the five indices of nabla R
    nabla2 -= np.einsum("mba,mijkl->baijkl", gam, nabla1)
    nabla2 -= np.einsum("mbi,amjkl->baijkl", gam, nabla1)
    nabla2 -= np.einsum("mbj,aimkl->baijkl", gam, nabla1)
    nabla2 -= np.einsum("mbk,aijml->baijkl", gam, nabla1)
    nabla2 -= np.einsum("mbl,aijkm->baijkl", gam, nabla1)
    return sample, nabla1, nabla2


# sampled bounds ------------------------------------------------------------


@dataclass(frozen=True)
class SampleRegion:
    """Axis-aligned sampling box; periodic axes sample without the endpoint."""

    bounds: Tuple[Tuple[float, float], ...]
    n: Tuple[int, ...]
    periodic: Tuple[bool, ...]

    @staticmethod
    def box(bounds, n, periodic=None):
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        dims = len(bounds)
        if isinstance(n, int):
            n = (n,) * dims
        if periodic is None:
            periodic = (False,) * dims
        region = SampleRegion(bounds, tuple(int(k) for k in n), tuple(periodic))
        for (a, b), k in zip(region.bounds, region.n):
            if k < 1 or not b > a:
                raise ValueError(f"empty sample region: bounds={region.bounds} n={region.n}")
        return region

    def axes(self):
        out = []
        for (a, b), k, per in zip(self.bounds, self.n, self.periodic):
            if per:
                out.append(a + (b - a) * np.arange(k) / k)
            else:
                out.append(np.linspace(a, b, k))
        return out

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([G.reshape(-1) for G in grids], axis=-1)


@dataclass(frozen=True)
class BoundsReport:
    region: SampleRegion
    k_max: int
    sup_norms: dict          # keys "R", "dR", "d2R" up to k_max
    ricci_lower: float       # min sampled Ricci eigenvalue, equals (m-1)*c


def bounds_report(field: MetricField, region: SampleRegion, k_max: int = 0) -> BoundsReport:
    """Sampled sup norms of the curvature and its first covariant derivatives.

    Derivatives of order one and two are approximated by differencing
    curvature samples with Christoffel corrections; the truncation at
    k_max <= 2 is a deliberate audit limitation.
    """
    if k_max not in (0, 1, 2):
        raise ValueError("k_max must be 0, 1 or 2")
    sup = {"R": 0.0}
    if k_max >= 1:
        sup["dR"] = 0.0
    if k_max >= 2:
        sup["d2R"] = 0.0
    ricci_lower = math.inf
    for p in region.points():
        if k_max == 0:
            sample = curvature_at(field, p)
        elif k_max == 1:
            sample, n1 = covariant_riemann_derivative(field, p)
            sup["dR"] = max(sup["dR"], frame_sup_norm(n1, sample.metric))
        else:
            sample, n1, n2 = _second_riemann_derivative(field, p)
            sup["dR"] = max(sup["dR"], frame_sup_norm(n1, sample.metric))
            sup["d2R"] = max(sup["d2R"], frame_sup_norm(n2, sample.metric))
        sup["R"] = max(sup["R"], frame_sup_norm(sample.riemann, sample.metric))
        eigs = scipy.linalg.eigh(sample.ricci, sample.metric, eigvals_only=True)
        ricci_lower = min(ricci_lower, float(eigs[0]))
    return BoundsReport(region, k_max, sup, ricci_lower)
