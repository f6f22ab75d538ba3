"""Inequality audits along boundary fibers and on the whole slab.

The fiberwise route integrates |f|^p against the normal-map volume
distortion and compares with the boundary value plus the derivative
term, using the distortion-ratio bound exp((m-1) R sqrt(|c|)) from a
sampled lower Ricci bound.  The global route measures empirical
constants over seeded smooth trial functions and compares them with the
constant tracked through the fiberwise argument and, for exponent two,
with the eigenvalue-derived constant of the discrete operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .domains import DomainSpec
from .fem import (
    DiscreteSystem,
    boundary_lp_norm,
    discretize,
    gradient_lp_norm,
    volume_lp_norm,
)
from .geodesics import FiberData
from .metrics import MetricField, curvature_at

__all__ = [
    "PoincareReport",
    "HKAudit",
    "FiberCheck",
    "EmpiricalPoincare",
    "FamilyAudit",
    "hk_bound",
    "proof_constant",
    "ricci_lower_sample",
    "hk_ratio_audit",
    "fiber_poincare_check",
    "random_fiber_functions",
    "trial_functions",
    "empirical_poincare",
    "uniform_family_audit",
]


def hk_bound(m: int, width: float, ricci_rate: float) -> float:
    """Distortion-ratio bound exp((m-1) * R * sqrt(|c|)) for Ricci >= (m-1)c."""
    return math.exp((m - 1) * width * math.sqrt(abs(ricci_rate)))


def proof_constant(width: float, ricci_lower: float, m: int, p) -> Tuple[float, float]:
    """(fiber constant C, global constant) tracked through the fiber argument.

    For finite p the fiber constant is 2^(p-1) times the distortion-ratio
    bound, and the global constant max((CR)^(1/p), (CR^p)^(1/p)); the sup
    chain for p = infinity yields max(1, R).
    """
    c_rate = ricci_lower / (m - 1)
    chk = hk_bound(m, width, c_rate)
    if p == math.inf:
        return chk, max(1.0, width)
    C = 2.0 ** (p - 1) * chk
    return C, max((C * width) ** (1.0 / p), (C * width**p) ** (1.0 / p))


def ricci_lower_sample(field: MetricField, points: np.ndarray) -> float:
    """Min sampled eigenvalue of the Ricci form against the metric."""
    worst = math.inf
    for p in np.asarray(points, dtype=float).reshape(-1, field.dim):
        sample = curvature_at(field, p)
        eigs = scipy.linalg.eigh(sample.ricci, sample.metric, eigvals_only=True)
        worst = min(worst, float(eigs[0]))
    return worst


@dataclass
class HKAudit:
    max_ratio: float
    bound: float
    passed: bool
    v0_max_error: float
    skipped: int


def hk_ratio_audit(fibers: Sequence[FiberData], bound: float, slack: float = 0.02) -> HKAudit:
    """Max distortion ratio v(x,t)/v(x,s) over s <= t within the minimizing
    window of each fiber, checked against the supplied bound."""
    worst = 1.0
    v0_err = 0.0
    skipped = 0
    for fiber in fibers:
        mask = fiber.minimizing
        if not mask.any():
            skipped += 1
            continue
        v = fiber.v[mask]
        v0_err = max(v0_err, abs(float(v[0]) - 1.0))
        running_min = np.minimum.accumulate(v)
        ratios = v / np.maximum(running_min, 1e-300)
        worst = max(worst, float(ratios.max()))
    return HKAudit(worst, bound, worst <= bound * (1.0 + slack), v0_err, skipped)


@dataclass
class FiberCheck:
    lhs: float
    rhs: float
    passed: bool
    p: float


def fiber_poincare_check(
    fiber: FiberData,
    fvals: np.ndarray,
    p,
    width: float,
    fiber_constant: float,
    slack: float = 0.03,
) -> FiberCheck:
    """One-dimensional weighted inequality along a fiber.

    For finite p: int |f|^p v dt <= C R |f(0)|^p + C R^p int |f'|^p v dt
    on the minimizing window; for p = infinity the sup chain
    max|f| <= |f(0)| + R max|f'|.  The slack absorbs quadrature and
    difference-derivative error.
    """
    if p != math.inf and p < 1:
        raise ValueError("exponent must be at least 1")
    mask = fiber.minimizing
    ts = fiber.ts[mask]
    v = fiber.v[mask]
    f = np.asarray(fvals, dtype=float)[mask]
    if len(ts) < 2:
        return FiberCheck(0.0, 0.0, True, p)
    df = np.gradient(f, ts, edge_order=2)
    if p == math.inf:
        lhs = float(np.max(np.abs(f)))
        rhs = abs(float(f[0])) + width * float(np.max(np.abs(df)))
    else:
        lhs = float(np.trapezoid(np.abs(f) ** p * v, ts))
        rhs = fiber_constant * width * abs(float(f[0])) ** p + fiber_constant * (
            width**p
        ) * float(np.trapezoid(np.abs(df) ** p * v, ts))
    return FiberCheck(lhs, rhs, lhs <= rhs * (1.0 + slack) + 1e-14, p)


def random_fiber_functions(ts: np.ndarray, count: int, seed: int) -> List[np.ndarray]:
    """Seeded smooth test functions on a fiber parameter interval."""
    rng = np.random.default_rng(seed)
    L = float(ts[-1]) if len(ts) else 1.0
    out = []
    for _ in range(count):
        nmodes = int(rng.integers(1, 6))
        f = np.zeros_like(ts, dtype=float)
        for _ in range(nmodes):
            k = rng.uniform(0.0, 3.0)
            phase = rng.uniform(0.0, 2 * math.pi)
            amp = rng.standard_normal() / (1.0 + k * k)
            f += amp * np.cos(k * math.pi * ts / max(L, 1e-12) + phase)
        f += rng.standard_normal() * ts / max(L, 1e-12)
        out.append(f)
    return out


# global empirical constants ---------------------------------------------------


def trial_functions(
    system: DiscreteSystem,
    count: int,
    seed: int,
    project_dirichlet: bool = False,
) -> List[np.ndarray]:
    """Deterministic low-mode probes followed by seeded random mixtures.

    Random trials are sums of up to eight trigonometric modes times up to
    three localized bumps; the probes keep the near-extremal low modes in
    the ensemble regardless of the seed.  With projection requested, each
    trial is tapered to vanish on the Dirichlet faces.
    """
    grid = system.grid
    domain = system.domain
    rng = np.random.default_rng(seed)
    coords = grid.flat_coords()
    x = coords[:, 0]
    ax = domain.axes[0]
    sfrac = np.broadcast_to(grid.s_nodes, grid.shape).reshape(-1)

    d_bottom = "bottom" in domain.dirichlet
    d_top = "top" in domain.dirichlet

    def t_profile(k, s):
        if d_bottom and d_top:
            return np.sin((k + 1) * math.pi * s)
        if d_bottom:
            return np.sin((k + 0.5) * math.pi * s)
        if d_top:
            return np.sin((k + 0.5) * math.pi * (1.0 - s))
        return np.cos(k * math.pi * s)

    probes = []
    two_pi = 2 * math.pi
    for k in range(3):
        for xf in (
            np.ones_like(x),
            np.cos(two_pi * (x - ax.lo) / ax.span),
            np.sin(two_pi * (x - ax.lo) / ax.span),
        ):
            probes.append(t_profile(k, sfrac) * xf)

    trials = list(probes)
    while len(trials) < count + len(probes):
        nmodes = int(rng.integers(1, 9))
        f = np.zeros(grid.size)
        for _ in range(nmodes):
            kx = int(rng.integers(0, 4))
            kt = int(rng.integers(0, 4))
            phase = rng.uniform(0.0, two_pi)
            amp = rng.standard_normal() / (1.0 + kx * kx + kt * kt)
            xf = np.cos(kx * two_pi * (x - ax.lo) / ax.span + phase)
            f += amp * xf * t_profile(kt, sfrac)
        nbumps = int(rng.integers(0, 4))
        for _ in range(nbumps):
            c = rng.uniform(ax.lo, ax.hi)
            w = rng.uniform(0.15, 0.6) * ax.span
            gap = x - c
            gap = (gap + ax.span / 2) % ax.span - ax.span / 2
            f = f * (0.3 + np.exp(-((gap / w) ** 2)))
        trials.append(f)
    if project_dirichlet:
        taper = np.ones(grid.size)
        if d_bottom:
            taper = taper * sfrac
        if d_top:
            taper = taper * (1.0 - sfrac)
        trials = [f * taper for f in trials]
    return trials


@dataclass
class EmpiricalPoincare:
    c_hat: float
    ratios: np.ndarray
    discarded: int
    p: float


def empirical_poincare(
    system: DiscreteSystem,
    p,
    trials: int,
    seed: int,
) -> EmpiricalPoincare:
    """Largest sampled ratio of the volume p-norm to the sum of the
    Dirichlet-trace norm and the derivative norm; a lower bound on the
    true constant."""
    if trials < 1:
        raise ValueError("need at least one trial")
    fields = trial_functions(system, trials, seed)
    fields += trial_functions(system, max(trials // 2, 8), seed + 1, project_dirichlet=True)
    dfaces = list(system.domain.dirichlet)
    ratios = []
    discarded = 0
    for f in fields:
        num = volume_lp_norm(system, f, p)
        den = boundary_lp_norm(system, f, dfaces, p) + gradient_lp_norm(system, f, p)
        if den < 1e-14:
            discarded += 1
            continue
        ratios.append(num / den)
    ratios = np.array(ratios)
    return EmpiricalPoincare(float(ratios.max()), ratios, discarded, p)


@dataclass
class PoincareReport:
    p: float
    width: float
    ricci_lower: float
    c_hk: float
    fiber_constant: float
    proof: float
    empirical: float
    eigen_c: Optional[float]
    gamma: Optional[float]


@dataclass
class FamilyAudit:
    constants: list
    overall: float
    worst_proof: float
    passed: bool
    failure: Optional[str]


def uniform_family_audit(
    domains: Sequence[DomainSpec],
    p,
    trials: int,
    seed: int,
    n: int = 32,
    widths: Optional[Sequence[float]] = None,
) -> FamilyAudit:
    """Per-component empirical constants of a disjoint union, their maximum,
    and the comparison against the proof constant of the worst component.

    A component with no Dirichlet face cannot have finite width, which is
    a failure of the hypothesis rather than of the audit.
    """
    from .gridfields import build_grid, face_source_mask, grid_distance_field
    from .domains import finite_width_report

    constants = []
    worst_width = 0.0
    worst_ricci = 0.0
    for i, domain in enumerate(domains):
        if len(domain.dirichlet) == 0:
            return FamilyAudit(constants, math.inf, math.inf, False,
                               f"component {i}: infinite width (no Dirichlet face)")
        grid = build_grid(domain, n)
        field = grid_distance_field(domain, grid, face_source_mask(grid, domain.dirichlet))
        rep = finite_width_report(domain, field)
        if rep.infinite:
            return FamilyAudit(constants, math.inf, math.inf, False,
                               f"component {i}: infinite width (unreachable nodes)")
        width = widths[i] if widths is not None else rep.radius
        system = discretize(domain, n)
        emp = empirical_poincare(system, p, trials, seed)
        constants.append(emp.c_hat)
        worst_width = max(worst_width, width)
        region = domain.sample_region(9)
        ricci = ricci_lower_sample(domain.ambient, region.points()) if domain.ambient.supports_ad else 0.0
        worst_ricci = min(worst_ricci, ricci)
    _, proof = proof_constant(worst_width, worst_ricci, domains[0].m, p)
    overall = max(constants)
    return FamilyAudit(constants, overall, proof, overall <= proof * 1.05, None)
