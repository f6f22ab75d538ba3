"""Mapped-grid finite elements for the mixed Dirichlet/Neumann Laplacian.

Multilinear elements on the logically rectangular slab grid, tensor
Gauss quadrature, and metric-weighted weak forms: stiffness entries are
integrals of (grad u, grad v) under the inverse metric with the metric
volume factor, mass entries the plain L2 pairing.  Dirichlet conditions
eliminate rows and columns with load lifting; Neumann data enters as a
boundary load.  The conjugate gradient solver doubles as the runtime
detector for spectral bounds: a nonpositive curvature direction means
the shifted operator is not positive definite.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import autodiff
from .domains import DomainSpec, unit_normal
from .expressions import parse_expression
from .gridfields import MappedGrid, build_grid
from .metrics import MetricField, metric_jet, metric_values

__all__ = [
    "DiscreteSystem",
    "SpectralReport",
    "MixedSolution",
    "ManufacturedCase",
    "NotPositiveDefiniteError",
    "SolverConvergenceError",
    "discretize",
    "cg_solve",
    "smallest_eigenvalue",
    "resolvent_solve",
    "coercivity_audit",
    "norm_equivalence_audit",
    "manufactured_case",
    "convergence_study",
    "volume_lp_norm",
    "gradient_lp_norm",
    "boundary_lp_norm",
]


class NotPositiveDefiniteError(RuntimeError):
    """The operator presented to the solver is not positive definite."""


class SolverConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"conjugate gradient did not converge: residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


@dataclass
class _Quadrature:
    points: np.ndarray        # (E, Q, m) physical quadrature points
    weights: np.ndarray       # (E, Q) includes detJ and sqrt(det g)
    grads: np.ndarray         # (E, Q, C, m) physical shape gradients
    ginv: np.ndarray          # (E, Q, m, m)
    shapes: np.ndarray        # (Q, C) reference shape values
    corners: np.ndarray       # (E, C) global node indices


@dataclass
class _BoundaryQuad:
    which: str
    corners: np.ndarray       # (S, Cb) global node indices
    shapes: np.ndarray        # (Qb, Cb)
    points: np.ndarray        # (S, Qb, m)
    weights: np.ndarray       # (S, Qb) includes the induced measure
    normals: np.ndarray       # (S, Qb, m) outward unit normals


@dataclass
class DiscreteSystem:
    """Assembled operators and quadrature data on a mapped grid."""

    domain: DomainSpec
    grid: MappedGrid
    metric: MetricField
    K: scipy.sparse.csr_matrix
    M: scipy.sparse.csr_matrix
    dirichlet_mask: np.ndarray
    free: np.ndarray
    quad: _Quadrature
    boundary: Dict[str, _BoundaryQuad]

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def volume(self) -> float:
        ones = np.ones(self.size)
        return float(ones @ (self.M @ ones))

    def restrict(self, A: scipy.sparse.csr_matrix) -> scipy.sparse.csr_matrix:
        return A[self.free][:, self.free].tocsr()


def _reference_element(d: int):
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    q1 = 1.0 / math.sqrt(3.0)
    qpts = np.array(list(itertools.product((-q1, q1), repeat=d)))
    C = corners.shape[0]
    Q = qpts.shape[0]
    shapes = np.empty((Q, C))
    grads = np.empty((Q, C, d))
    for q in range(Q):
        for c in range(C):
            vals = 0.5 * (1.0 + corners[c] * qpts[q])
            shapes[q, c] = np.prod(vals)
            for a in range(d):
                terms = vals.copy()
                terms[a] = 0.5 * corners[c, a]
                grads[q, c, a] = np.prod(terms)
    return corners, qpts, shapes, grads


def _element_index_grid(grid: MappedGrid):
    """Element corner index tuples along each axis, honoring periodic wrap."""
    axes_elems = []
    for a, k in enumerate(grid.shape):
        if a < grid.bdim and grid.base_periodic[a]:
            axes_elems.append([(i, (i + 1) % k) for i in range(k)])
        else:
            axes_elems.append([(i, i + 1) for i in range(k - 1)])
    return axes_elems


def discretize(
    domain: DomainSpec,
    n: int,
    metric: Optional[MetricField] = None,
    grid: Optional[MappedGrid] = None,
) -> DiscreteSystem:
    """Assemble stiffness and mass operators on the mapped n-grid."""
    if n < 8 and grid is None:
        raise ValueError("need at least 8 cells per axis")
    metric = metric or domain.ambient
    grid = grid or build_grid(domain, n)
    d = grid.m
    ref_corners, _, shapes, ref_grads = _reference_element(d)
    C = ref_corners.shape[0]
    Q = shapes.shape[0]

    axes_elems = _element_index_grid(grid)
    elem_axis_ids = list(itertools.product(*[range(len(ae)) for ae in axes_elems]))
    E = len(elem_axis_ids)

    corners = np.empty((E, C), dtype=np.int64)
    coords = np.empty((E, C, d))
    node_coords = grid.coords
    for e, ids in enumerate(elem_axis_ids):
        pairs = [axes_elems[a][i] for a, i in enumerate(ids)]
        for c, corner in enumerate(ref_corners):
            sel = tuple(pairs[a][1 if corner[a] > 0 else 0] for a in range(d))
            corners[e, c] = np.ravel_multi_index(sel, grid.shape)
            coords[e, c] = node_coords[sel]
        # unwrap periodic jumps so element geometry stays contiguous
        for a in range(grid.bdim):
            if grid.base_periodic[a]:
                span = domain.axes[a].span
                base = coords[e, 0, a]
                wrapped = coords[e, :, a] - base
                coords[e, :, a] = base + (wrapped + span / 2) % span - span / 2
                lo = ref_corners[:, a] < 0
                if coords[e, lo, a].max() > coords[e, ~lo, a].min():
                    coords[e, ~lo, a] += span

    # geometry jacobians at quadrature points
    J = np.einsum("ecd,qcr->eqdr", coords, ref_grads)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0.0):
        raise ValueError("degenerate slab: mapped element with nonpositive jacobian")
    invJ = np.linalg.inv(J)
    grads_phys = np.einsum("eqrd,qcr->eqcd", invJ, ref_grads)

    pts = np.einsum("qc,ecd->eqd", shapes, coords)
    G = metric_values(metric, pts.reshape(-1, d)).reshape(E, Q, d, d)
    ginv = np.linalg.inv(G)
    sqrtg = np.sqrt(np.linalg.det(G))
    wq = detJ * sqrtg  # unit reference weights

    k_local = np.einsum("eqad,eqdr,eqbr,eq->eab", grads_phys, ginv, grads_phys, wq)
    m_local = np.einsum("qa,qb,eq->eab", shapes, shapes, wq)

    rows = np.repeat(corners[:, :, None], C, axis=2).reshape(-1)
    cols = np.repeat(corners[:, None, :], C, axis=1).reshape(-1)
    K = scipy.sparse.coo_matrix(
        (k_local.reshape(-1), (rows, cols)), shape=(grid.size, grid.size)
    ).tocsr()
    M = scipy.sparse.coo_matrix(
        (m_local.reshape(-1), (rows, cols)), shape=(grid.size, grid.size)
    ).tocsr()
    K = (K + K.T) * 0.5
    M = (M + M.T) * 0.5

    dirichlet_mask = np.zeros(grid.shape, dtype=bool)
    for which in domain.dirichlet:
        dirichlet_mask |= grid.face_mask(which)
    dirichlet_mask = dirichlet_mask.reshape(-1)
    free = np.flatnonzero(~dirichlet_mask)

    boundary = {
        which: _boundary_quadrature(domain, grid, metric, which)
        for which in ("top", "bottom")
    }
    quad = _Quadrature(pts, wq, grads_phys, ginv, shapes, corners)
    return DiscreteSystem(domain, grid, metric, K, M, dirichlet_mask, free, quad, boundary)


def _boundary_quadrature(domain, grid, metric, which) -> _BoundaryQuad:
    d = grid.m
    bd = d - 1
    ref_corners, _, shapes, ref_grads = _reference_element(bd)
    Cb = ref_corners.shape[0]
    Qb = shapes.shape[0]
    s_index = 0 if which == "bottom" else grid.shape[-1] - 1

    axes_elems = _element_index_grid(grid)[:bd]
    segs = list(itertools.product(*[range(len(ae)) for ae in axes_elems]))
    S = len(segs)
    corners = np.empty((S, Cb), dtype=np.int64)
    coords = np.empty((S, Cb, d))
    for s, ids in enumerate(segs):
        pairs = [axes_elems[a][i] for a, i in enumerate(ids)]
        for c, corner in enumerate(ref_corners):
            sel = tuple(pairs[a][1 if corner[a] > 0 else 0] for a in range(bd)) + (s_index,)
            corners[s, c] = np.ravel_multi_index(sel, grid.shape)
            coords[s, c] = grid.coords[sel]
        for a in range(grid.bdim):
            if grid.base_periodic[a]:
                span = domain.axes[a].span
                base = coords[s, 0, a]
                wrapped = coords[s, :, a] - base
                coords[s, :, a] = base + (wrapped + span / 2) % span - span / 2
                lo = ref_corners[:, a] < 0
                if bd > 0 and coords[s, lo, a].size and coords[s, lo, a].max() > coords[s, ~lo, a].min():
                    coords[s, ~lo, a] += span

    pts = np.einsum("qc,scd->sqd", shapes, coords)
    T = np.einsum("scd,qcr->sqdr", coords, ref_grads)     # tangents (s, q, ambient, param)
    G = metric_values(metric, pts.reshape(-1, d)).reshape(S, Qb, d, d)
    gram = np.einsum("sqdi,sqde,sqej->sqij", T, G, T)
    measure = np.sqrt(np.linalg.det(gram)) if bd > 0 else np.ones((S, Qb))
    normals = np.empty((S, Qb, d))
    for s in range(S):
        for q in range(Qb):
            x = tuple(pts[s, q, :-1])
            normals[s, q] = unit_normal(domain, x, which).normal
    return _BoundaryQuad(which, corners, shapes, pts, measure, normals)


# linear algebra -------------------------------------------------------------


def cg_solve(
    A: scipy.sparse.csr_matrix,
    b: np.ndarray,
    tol: float = 1e-10,
    maxiter: Optional[int] = None,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients with an SPD detector.

    Raises NotPositiveDefiniteError when a nonpositive diagonal entry or a
    nonpositive curvature direction p^T A p <= 0 appears; this is the
    runtime check that a shift lies below the spectrum.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxiter is None:
        maxiter = max(20 * n, 1000)
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise NotPositiveDefiniteError("not positive definite: nonpositive diagonal entry")
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - A @ x
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    for it in range(maxiter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        Ap = A @ p
        curvature = float(p @ Ap)
        if curvature <= 0.0:
            raise NotPositiveDefiniteError(
                f"not positive definite: curvature {curvature:.3e} at iteration {it}"
            )
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(r) / bnorm)
    if res <= 100 * tol:
        return x
    raise SolverConvergenceError(res, maxiter)


@dataclass
class SpectralReport:
    lambda_min: float
    c_poincare: float
    gamma: float
    iterations: int
    residual: float
    eigenvector: Optional[np.ndarray]
    poincare_fails: bool


def smallest_eigenvalue(system: DiscreteSystem, tol: float = 1e-8,
                        maxiter: int = 400) -> SpectralReport:
    """Inverse power iteration for the lowest mode of K u = lambda M u.

    With no Dirichlet face the constants are in the kernel: the report
    carries lambda = 0 exactly and flags the failure of the underlying
    inequality.
    """
    if len(system.domain.dirichlet) == 0:
        vec = np.ones(system.size)
        vec /= math.sqrt(float(vec @ (system.M @ vec)))
        return SpectralReport(0.0, math.inf, 0.0, 0, 0.0, vec, True)
    Kff = system.restrict(system.K)
    Mff = system.restrict(system.M)
    nf = Kff.shape[0]
    y = np.ones(nf)
    y /= math.sqrt(float(y @ (Mff @ y)))
    lam_old = math.inf
    w = None
    lam = math.inf
    it = 0
    for it in range(1, maxiter + 1):
        w = cg_solve(Kff, Mff @ y, tol=1e-12, x0=w)
        norm = math.sqrt(float(w @ (Mff @ w)))
        y = w / norm
        lam = float(y @ (Kff @ y)) / float(y @ (Mff @ y))
        if abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
    res = float(np.linalg.norm(Kff @ y - lam * (Mff @ y)) / np.linalg.norm(Mff @ y))
    c = 1.0 / math.sqrt(lam)
    gamma = 1.0 / (1.0 + c * c)
    full = np.zeros(system.size)
    full[system.free] = y
    return SpectralReport(lam, c, gamma, it, res, full, False)


# loads, boundary data and solves --------------------------------------------


def _volume_load(system: DiscreteSystem, f) -> np.ndarray:
    if f is None:
        return np.zeros(system.size)
    if isinstance(f, np.ndarray):
        if f.shape != (system.size,):
            raise ValueError(
                f"inconsistent volume data size {f.shape}, expected ({system.size},)"
            )
        return system.M @ f
    q = system.quad
    fvals = np.array([f(p) for p in q.points.reshape(-1, system.grid.m)])
    fvals = fvals.reshape(q.weights.shape)
    contrib = np.einsum("eq,eq,qa->ea", fvals, q.weights, q.shapes)
    out = np.zeros(system.size)
    np.add.at(out, q.corners.reshape(-1), contrib.reshape(-1))
    return out


def _boundary_load(system: DiscreteSystem, which: str, h) -> np.ndarray:
    bq = system.boundary[which]
    if callable(h):
        hv = np.array([h(p) for p in bq.points.reshape(-1, system.grid.m)])
        hv = hv.reshape(bq.weights.shape)
    else:
        hv = np.full(bq.weights.shape, float(h))
    contrib = np.einsum("sq,sq,qa->sa", hv, bq.weights, bq.shapes)
    out = np.zeros(system.size)
    np.add.at(out, bq.corners.reshape(-1), contrib.reshape(-1))
    return out


def boundary_mass(system: DiscreteSystem, which: str) -> scipy.sparse.csr_matrix:
    bq = system.boundary[which]
    Cb = bq.shapes.shape[1]
    local = np.einsum("qa,qb,sq->sab", bq.shapes, bq.shapes, bq.weights)
    rows = np.repeat(bq.corners[:, :, None], Cb, axis=2).reshape(-1)
    cols = np.repeat(bq.corners[:, None, :], Cb, axis=1).reshape(-1)
    B = scipy.sparse.coo_matrix(
        (local.reshape(-1), (rows, cols)), shape=(system.size, system.size)
    ).tocsr()
    return (B + B.T) * 0.5


@dataclass
class MixedSolution:
    u: np.ndarray
    lam: float
    dirichlet_values: Dict[str, np.ndarray]
    neumann_flux: Dict[str, np.ndarray]
    residual: float
    band_flag: Optional[str]


def resolvent_solve(
    system: DiscreteSystem,
    lam: float,
    f=None,
    dirichlet=None,
    neumann=None,
    spectral: Optional[SpectralReport] = None,
    tol: float = 1e-10,
) -> MixedSolution:
    """Solve (Delta - lambda) u = f with Dirichlet data imposed exactly and
    Neumann data as a natural boundary load; the weak conormal flux is
    recovered on the Neumann faces from the residual functional.

    Shifts in the band between the coercivity constant and the lowest
    eigenvalue solve fine numerically and are flagged as outside the
    guaranteed range.
    """
    band_flag = None
    if spectral is not None and spectral.gamma <= lam < spectral.lambda_min:
        band_flag = "outside coercivity guarantee, numerically SPD"
    A = (system.K - lam * system.M).tocsr()
    rhs = _volume_load(system, f)

    u_d = np.zeros(system.size)
    dvals: Dict[str, np.ndarray] = {}
    for which in system.domain.dirichlet:
        mask = system.grid.face_mask(which).reshape(-1)
        idx = np.flatnonzero(mask)
        data = _face_data(system, which, dirichlet)
        u_d[idx] = data
        dvals[which] = data
    rhs = rhs - A @ u_d

    nload = np.zeros(system.size)
    if neumann is not None:
        for which in system.domain.neumann:
            h = neumann.get(which) if isinstance(neumann, dict) else neumann
            if h is not None:
                nload += _boundary_load(system, which, h)
    rhs = rhs + nload

    Aff = system.restrict(A)
    uf = cg_solve(Aff, rhs[system.free], tol=tol)
    u = u_d.copy()
    u[system.free] = uf

    full_res = A @ u - _volume_load(system, f)
    flux: Dict[str, np.ndarray] = {}
    for which in system.domain.neumann:
        mask = system.grid.face_mask(which).reshape(-1)
        idx = np.flatnonzero(mask)
        B = boundary_mass(system, which)
        Bff = B[idx][:, idx].tocsr()
        flux[which] = cg_solve(Bff, full_res[idx], tol=1e-12)
    resid = float(np.linalg.norm(Aff @ uf - rhs[system.free]))
    return MixedSolution(u, lam, dvals, flux, resid, band_flag)


def _face_data(system, which, data):
    mask = system.grid.face_mask(which).reshape(-1)
    idx = np.flatnonzero(mask)
    pts = system.grid.flat_coords()[idx]
    if data is None:
        return np.zeros(len(idx))
    h = data.get(which) if isinstance(data, dict) else data
    if h is None:
        return np.zeros(len(idx))
    if callable(h):
        return np.array([h(p) for p in pts])
    if isinstance(h, np.ndarray):
        if h.shape != (len(idx),):
            raise ValueError(
                f"inconsistent boundary data size {h.shape} on face {which!r}, "
                f"expected ({len(idx)},)"
            )
        return h.astype(float)
    return np.full(len(idx), float(h))


# audits ----------------------------------------------------------------------


@dataclass
class QuotientAudit:
    value: float
    bound: float
    passed: bool
    sharp: Optional[float] = None


def coercivity_audit(
    system: DiscreteSystem,
    lam: float,
    trials: int,
    seed: int,
    spectral: SpectralReport,
    slack: float = 0.05,
) -> QuotientAudit:
    """Minimum over random free vectors of ((du,du)-lambda(u,u)) / |u|_{H1}^2,
    checked against the coercivity constant (gamma - lambda)."""
    Kff = system.restrict(system.K)
    Mff = system.restrict(system.M)
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(trials):
        u = rng.standard_normal(Kff.shape[0])
        num = float(u @ (Kff @ u)) - lam * float(u @ (Mff @ u))
        den = float(u @ (Kff @ u)) + float(u @ (Mff @ u))
        worst = min(worst, num / den)
    sharp = None
    if spectral.eigenvector is not None and not spectral.poincare_fails:
        v = spectral.eigenvector[system.free]
        num = float(v @ (Kff @ v)) - lam * float(v @ (Mff @ v))
        den = float(v @ (Kff @ v)) + float(v @ (Mff @ v))
        sharp = num / den
        worst = min(worst, sharp)
    bound = spectral.gamma - lam
    return QuotientAudit(worst, bound, worst >= bound * (1.0 - slack), sharp)


def norm_equivalence_audit(
    system: DiscreteSystem,
    trials: int,
    seed: int,
    spectral: SpectralReport,
    slack: float = 0.02,
) -> QuotientAudit:
    """Maximum of |u|_{H1}^2 / (du,du) over random free vectors, bounded by
    1 + c^2, with sharpness checked on the ground eigenvector."""
    Kff = system.restrict(system.K)
    Mff = system.restrict(system.M)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(Kff.shape[0])
        ratio = (float(u @ (Kff @ u)) + float(u @ (Mff @ u))) / float(u @ (Kff @ u))
        worst = max(worst, ratio)
    sharp = None
    if spectral.eigenvector is not None and not spectral.poincare_fails:
        v = spectral.eigenvector[system.free]
        sharp = (float(v @ (Kff @ v)) + float(v @ (Mff @ v))) / float(v @ (Kff @ v))
        worst = max(worst, sharp)
    bound = 1.0 + spectral.c_poincare**2
    return QuotientAudit(worst, bound, worst <= bound * (1.0 + slack), sharp)


# norms -----------------------------------------------------------------------


def _quad_values(system: DiscreteSystem, u_nodes: np.ndarray) -> np.ndarray:
    q = system.quad
    ue = u_nodes[q.corners]                      # (E, C)
    return np.einsum("qc,ec->eq", q.shapes, ue)


def _quad_gradients(system: DiscreteSystem, u_nodes: np.ndarray) -> np.ndarray:
    q = system.quad
    ue = u_nodes[q.corners]
    return np.einsum("eqcd,ec->eqd", q.grads, ue)


def volume_lp_norm(system: DiscreteSystem, u_nodes: np.ndarray, p) -> float:
    vals = _quad_values(system, np.asarray(u_nodes, dtype=float).reshape(-1))
    if p == math.inf:
        return float(np.max(np.abs(vals)))
    w = system.quad.weights
    return float(np.sum(w * np.abs(vals) ** p) ** (1.0 / p))


def gradient_lp_norm(system: DiscreteSystem, u_nodes: np.ndarray, p) -> float:
    g = _quad_gradients(system, np.asarray(u_nodes, dtype=float).reshape(-1))
    norms = np.sqrt(np.einsum("eqd,eqdr,eqr->eq", g, system.quad.ginv, g))
    if p == math.inf:
        return float(np.max(norms))
    w = system.quad.weights
    return float(np.sum(w * norms**p) ** (1.0 / p))


def boundary_lp_norm(system: DiscreteSystem, u_nodes: np.ndarray, faces, p) -> float:
    u = np.asarray(u_nodes, dtype=float).reshape(-1)
    total = 0.0
    sup = 0.0
    for which in faces:
        bq = system.boundary[which]
        vals = np.einsum("qc,sc->sq", bq.shapes, u[bq.corners])
        if p == math.inf:
            sup = max(sup, float(np.max(np.abs(vals))) if vals.size else 0.0)
        else:
            total += float(np.sum(bq.weights * np.abs(vals) ** p))
    if p == math.inf:
        return sup
    return total ** (1.0 / p)


# manufactured cases ----------------------------------------------------------


@dataclass
class ManufacturedCase:
    u: Callable
    grad_u: Callable
    f: Callable
    dirichlet: Dict[str, Callable]
    neumann: Dict[str, Callable]
    lam: float


def manufactured_case(
    domain: DomainSpec,
    u_expr,
    lam: float,
    metric: Optional[MetricField] = None,
) -> ManufacturedCase:
    """Right-hand side and boundary data for a prescribed smooth solution.

    The source is (Delta - lambda) u with the positive Laplacian of the
    supplied metric, evaluated pointwise from the metric jet and the
    exact derivatives of the solution expression.
    """
    metric = metric or domain.ambient
    names = metric.coord_names
    expr = parse_expression(u_expr, allowed_variables=names)

    def u_fn(p):
        return float(autodiff.value_of(expr(dict(zip(names, p)))))

    def scalar(coords):
        return expr(dict(zip(names, coords)))

    def grad_fn(p):
        _, grad, _ = autodiff.value_gradient_hessian(scalar, p)
        return grad

    def f_fn(p):
        _, grad, hess = autodiff.value_gradient_hessian(scalar, p)
        g, dg, _ = metric_jet(metric, p, order=1)
        from .metrics import _christoffel_from_jet

        gamma = _christoffel_from_jet(g, dg)
        ginv = np.linalg.inv(g)
        lap = float(np.einsum("ij,ij->", ginv, hess)) - float(
            np.einsum("ij,kij,k->", ginv, gamma, grad)
        )
        return -lap - lam * u_fn(p)

    dirichlet = {which: u_fn for which in domain.dirichlet}

    def neumann_for(which):
        def h(p):
            bp = unit_normal(domain, tuple(p[:-1]), which)
            return float(bp.normal @ grad_fn(p))

        return h

    neumann = {which: neumann_for(which) for which in domain.neumann}
    return ManufacturedCase(u_fn, grad_fn, f_fn, dirichlet, neumann, lam)


@dataclass
class ConvergenceStudy:
    grids: Tuple[int, ...]
    l2_errors: Tuple[float, ...]
    h1_errors: Tuple[float, ...]
    l2_order: Optional[float]
    h1_order: Optional[float]
    monotone: bool


def convergence_study(
    domain: DomainSpec,
    case: ManufacturedCase,
    grids: Sequence[int] = (16, 32, 64),
    metric: Optional[MetricField] = None,
) -> ConvergenceStudy:
    """Observed L2 and H1 error orders against the manufactured solution."""
    metric = metric or domain.ambient
    l2 = []
    h1 = []
    for n in grids:
        system = discretize(domain, n, metric=metric)
        sol = resolvent_solve(
            system, case.lam, f=case.f, dirichlet=case.dirichlet, neumann=case.neumann
        )
        q = system.quad
        uh = _quad_values(system, sol.u)
        ustar = np.array([case.u(p) for p in q.points.reshape(-1, system.grid.m)])
        err = uh - ustar.reshape(uh.shape)
        l2_err = math.sqrt(float(np.sum(q.weights * err * err)))
        gh = _quad_gradients(system, sol.u)
        gstar = np.array([case.grad_u(p) for p in q.points.reshape(-1, system.grid.m)])
        gerr = gh - gstar.reshape(gh.shape)
        semi = float(np.sum(q.weights * np.einsum("eqd,eqdr,eqr->eq", gerr, q.ginv, gerr)))
        h1.append(math.sqrt(l2_err * l2_err + semi))
        l2.append(l2_err)
    mono = all(a > b for a, b in zip(l2, l2[1:])) and all(
        a > b for a, b in zip(h1, h1[1:])
    )
    if mono:
        hs = np.log(1.0 / np.asarray(grids, dtype=float))
        l2_order = float(np.polyfit(hs, np.log(l2), 1)[0])
        h1_order = float(np.polyfit(hs, np.log(h1), 1)[0])
    else:
        l2_order = h1_order = None
    return ConvergenceStudy(tuple(grids), tuple(l2), tuple(h1), l2_order, h1_order, mono)
