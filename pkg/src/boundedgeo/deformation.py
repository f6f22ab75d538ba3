"""Product deformation of the metric in a boundary collar.

Replaces the ambient metric inside a collar of depth 3r' around each
face by a blend eta(t)*g + (1-eta(t))*(g_face + dt^2) in collar
coordinates (foot point, normal depth), so the result is exactly a
product for depth <= r' and exactly the original metric beyond 3r'.
Collar coordinates come in three flavors: vertical lines for constant
faces, straight lines for flat bases, and integrated normal fibers
otherwise.  The equivalence constant between the original and deformed
metrics is measured as a generalized-eigenvalue extremum over samples.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg

from .autodiff import value_of, value_gradient_hessian
from .domains import DomainSpec, induced_face_metric
from .metrics import MetricField, custom_metric, eval_metric

__all__ = [
    "Cutoff",
    "DeformationSpec",
    "CollarTooShallowError",
    "smooth_step",
    "plateau_bump",
    "build_cutoff",
    "deform_metric",
    "equivalence_constant",
]


def _mollifier(s: float) -> float:
    return math.exp(-1.0 / s) if s > 0.0 else 0.0


def smooth_step(s: float) -> float:
    """C-infinity monotone step: exactly 0 for s <= 0 and 1 for s >= 1."""
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    a = _mollifier(s)
    return a / (a + _mollifier(1.0 - s))


def plateau_bump(u: float) -> float:
    """Smooth profile equal to 1 for u <= 1/2 and exactly 0 for u >= 1."""
    return smooth_step(2.0 * (1.0 - u))


@dataclass(frozen=True)
class Cutoff:
    """Blend profile: 0 on [0, r'], rises smoothly, 1 from 2r' on."""

    r_prime: float

    def __call__(self, t: float) -> float:
        return smooth_step((t - self.r_prime) / self.r_prime)


def build_cutoff(r_prime: float) -> Cutoff:
    if r_prime <= 0:
        raise ValueError("cutoff scale must be positive")
    return Cutoff(float(r_prime))


class CollarTooShallowError(ValueError):
    pass


# collar charts ---------------------------------------------------------------


class _CollarBase:
    def __init__(self, domain: DomainSpec, which: str, depth_cap: float):
        self.domain = domain
        self.which = which
        self.depth_cap = depth_cap
        self.face = induced_face_metric(domain, which)
        expr = domain.face_expr(which)
        names = domain.base_names
        self._expr = expr
        self._names = names
        grads = []
        for x in domain.face_samples(64):
            _, grad, _ = value_gradient_hessian(lambda c: expr(dict(zip(names, c))), x)
            grads.append(float(np.linalg.norm(grad)))
        self._skew = math.sqrt(1.0 + max(grads) ** 2) * 1.2

    def vertical_gap(self, q) -> float:
        x = self.domain.wrap_base(q[:-1])
        return abs(self.domain.face_value(self.which, x) - float(q[-1]))

    def quick_reject(self, q) -> bool:
        return self.vertical_gap(q) > self.depth_cap * self._skew

    def product_matrix(self, x) -> np.ndarray:
        h = np.array(
            [[value_of(e) for e in row] for row in self.face.matrix_fn(tuple(x))]
        )
        m = h.shape[0] + 1
        out = np.zeros((m, m))
        out[:-1, :-1] = h
        out[-1, -1] = 1.0
        return out

    def graph_jet(self, x):
        return value_gradient_hessian(
            lambda c: self._expr(dict(zip(self._names, c))), x
        )


class VerticalCollar(_CollarBase):
    """Constant-graph face: the normal flow is a vertical line."""

    def __init__(self, domain, which, depth_cap):
        super().__init__(domain, which, depth_cap)
        self.level = domain.face_value(which, [ax.lo for ax in domain.axes])
        self.sign = -domain.face_sign(which)  # inward t-velocity

    def forward(self, x, t):
        return np.array(list(x) + [self.level + self.sign * t])

    def inverse(self, q):
        x = self.domain.wrap_base(q[:-1])
        t = (float(q[-1]) - self.level) * self.sign
        if t < -1e-9 or t > self.depth_cap:
            return None
        return tuple(x), max(t, 0.0)

    def differential(self, x, t) -> np.ndarray:
        m = self.domain.m
        d = np.eye(m)
        d[-1, -1] = self.sign
        return d


class StraightCollar(_CollarBase):
    """Flat base, curved face: fibers are straight lines along the normal."""

    def forward(self, x, t):
        f, grad, _ = self.graph_jet(x)
        N = 1.0 / math.sqrt(1.0 + float(grad @ grad))
        sign = self.domain.face_sign(self.which)
        return np.concatenate([np.asarray(x) + sign * t * N * grad, [f - sign * t * N]])

    def inverse(self, q, max_iter=60):
        dom = self.domain
        sign = dom.face_sign(self.which)
        qx = np.array(dom.wrap_base(q[:-1]))
        qt = float(q[-1])
        x = qx.copy()
        for _ in range(max_iter):
            f, grad, hess = self.graph_jet(x)
            F = x + (f - qt) * grad - qx
            # residual components wrap onto the nearest representative
            for a, ax in enumerate(dom.axes):
                if ax.periodic:
                    F[a] = (F[a] + ax.span / 2) % ax.span - ax.span / 2
            J = np.eye(len(x)) + np.outer(grad, grad) + (f - qt) * hess
            try:
                step = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                return None
            x = x - step
            if float(np.linalg.norm(step)) < 1e-13:
                break
        else:
            return None
        f, grad, _ = self.graph_jet(x)
        N = 1.0 / math.sqrt(1.0 + float(grad @ grad))
        t = sign * (f - qt) / N
        if t < -1e-9 or t > self.depth_cap:
            return None
        return tuple(dom.wrap_base(x)), max(t, 0.0)

    def differential(self, x, t) -> np.ndarray:
        f, grad, hess = self.graph_jet(x)
        sign = self.domain.face_sign(self.which)
        n2 = 1.0 + float(grad @ grad)
        N = 1.0 / math.sqrt(n2)
        dN = -(hess @ grad) * N / n2
        bdim = len(x)
        d = np.empty((bdim + 1, bdim + 1))
        d[:bdim, :bdim] = np.eye(bdim) + sign * t * (np.outer(grad, dN) + N * hess)
        d[bdim, :bdim] = grad - sign * t * dN
        d[:bdim, bdim] = sign * N * grad
        d[bdim, bdim] = -sign * N
        return d


class IntegratedCollar(_CollarBase):
    """Generic base: fibers integrated on the reference metric."""

    def __init__(self, domain, which, depth_cap, metric):
        super().__init__(domain, which, depth_cap)
        self.metric = metric
        self._fibers = {}

    def _fiber(self, x):
        key = tuple(round(float(v), 12) for v in x)
        f = self._fibers.get(key)
        if f is None:
            from .geodesics import normal_fiber

            f = normal_fiber(
                self.domain, x, self.which, horizon=self.depth_cap * 1.2,
                step=2e-3, metric=self.metric,
            )
            if len(self._fibers) > 8192:
                self._fibers.clear()
            self._fibers[key] = f
        return f

    def forward(self, x, t):
        fiber = self._fiber(tuple(x))
        return fiber.position_at(min(t, fiber.length))

    def inverse(self, q, max_iter=50):
        dom = self.domain
        qx = np.array(dom.wrap_base(q[:-1]))
        f = dom.face_value(self.which, qx)
        xi = np.concatenate([qx, [abs(f - float(q[-1]))]])
        q = np.asarray(q, dtype=float)
        F = self._residual(xi, q)
        fd = 1e-6
        for _ in range(max_iter):
            if float(np.linalg.norm(F)) < 1e-11:
                break
            J = np.empty((dom.m, dom.m))
            for a in range(dom.m):
                zp, zm = xi.copy(), xi.copy()
                zp[a] += fd
                zm[a] -= fd
                zm[-1] = max(zm[-1], 0.0)
                J[:, a] = (self._residual(zp, q) - self._residual(zm, q)) / (zp[a] - zm[a])
            try:
                step = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                return None
            scale = 1.0
            for _ in range(10):
                cand = xi - scale * step
                cand[-1] = max(cand[-1], 0.0)
                Fc = self._residual(cand, q)
                if np.linalg.norm(Fc) < np.linalg.norm(F):
                    xi, F = cand, Fc
                    break
                scale *= 0.5
            else:
                return None
        else:
            return None
        t = float(xi[-1])
        if t > self.depth_cap:
            return None
        return tuple(dom.wrap_base(xi[:-1])), max(t, 0.0)

    def _residual(self, xi, q):
        r = self.forward(xi[:-1], max(float(xi[-1]), 0.0)) - q
        for a, ax in enumerate(self.domain.axes):
            if ax.periodic:
                r[a] = (r[a] + ax.span / 2) % ax.span - ax.span / 2
        return r

    def differential(self, x, t) -> np.ndarray:
        dom = self.domain
        fd = 1e-5
        cols = []
        for a in range(len(x)):
            xp = np.asarray(x, dtype=float).copy()
            xm = xp.copy()
            xp[a] += fd
            xm[a] -= fd
            delta = self.forward(xp, t) - self.forward(xm, t)
            for k, ax in enumerate(dom.axes):
                if ax.periodic:
                    delta[k] = (delta[k] + ax.span / 2) % ax.span - ax.span / 2
            cols.append(delta / (2 * fd))
        fiber = self._fiber(tuple(x))
        cols.append(fiber.velocity_at(min(t, fiber.length)))
        return np.column_stack(cols)


def _make_collar(domain, which, depth_cap, metric):
    if domain.face_expr(which).is_constant:
        return VerticalCollar(domain, which, depth_cap)
    if domain.base.family == "flat":
        return StraightCollar(domain, which, depth_cap)
    return IntegratedCollar(domain, which, depth_cap, metric)


# the deformed field ----------------------------------------------------------


@dataclass
class DeformationSpec:
    r_prime: float
    cutoff: Cutoff
    collars: Dict[str, object]
    reference: MetricField
    deformed: MetricField
    collar_depth: Dict[str, float]
    equivalence: Optional[float] = None

    def locate(self, q):
        """(face, foot, depth) of the owning collar at q, or None."""
        best = None
        for which, collar in self.collars.items():
            if collar.quick_reject(q):
                continue
            res = collar.inverse(np.asarray(q, dtype=float))
            if res is None:
                continue
            x, t = res
            if best is None or t < best[2]:
                best = (which, x, t)
        return best

    def collar_matrix(self, which: str, x, t: float) -> np.ndarray:
        """Deformed metric expressed in the collar coordinates (exact blend)."""
        collar = self.collars[which]
        eta = self.cutoff(t)
        prod = collar.product_matrix(x)
        if eta == 0.0:
            return prod
        p = collar.forward(x, t)
        dpsi = collar.differential(x, t)
        gref = eval_metric(self.reference, p)
        pulled = dpsi.T @ gref @ dpsi
        return eta * pulled + (1.0 - eta) * prod


def deform_metric(
    domain: DomainSpec,
    r_prime: Optional[float] = None,
    collar_depths: Optional[dict] = None,
) -> Tuple[DomainSpec, DeformationSpec]:
    """Domain with the collar-product metric substituted for the ambient one.

    The default blend scale is min(collar depth / 6, slab gap / 10); a
    requested scale whose triple exceeds the audited collar depth is an
    error.
    """
    reference = domain.ambient
    if collar_depths is None:
        from .domains import collar_depth

        collar_depths = collar_depth(domain, n=17, samples=9)
    depth = min(collar_depths.values())
    gap = domain.eps
    if r_prime is None:
        r_prime = min(depth / 6.0, 0.1 * gap)
    if 3.0 * r_prime > depth + 1e-12:
        raise CollarTooShallowError(
            f"collar too shallow for blend scale {r_prime}: audited depth {depth:.4g} "
            f"is less than 3*r' = {3 * r_prime:.4g}"
        )
    cutoff = build_cutoff(r_prime)
    cap = 3.0 * r_prime * 1.000001
    collars = {
        which: _make_collar(domain, which, cap, reference) for which in ("top", "bottom")
    }

    spec = DeformationSpec(float(r_prime), cutoff, collars, reference, None, dict(collar_depths))
    cache: dict = {}

    def matrix_fn(coords):
        q = tuple(float(value_of(c)) for c in coords)
        hit = cache.get(q)
        if hit is not None:
            return hit
        loc = spec.locate(q)
        if loc is None:
            raw = reference.matrix_fn(q)
            out = [[float(value_of(e)) for e in row] for row in raw]
        else:
            which, x, t = loc
            eta = spec.cutoff(t)
            if eta >= 1.0:
                raw = reference.matrix_fn(q)
                out = [[float(value_of(e)) for e in row] for row in raw]
            else:
                collar = spec.collars[which]
                dpsi = collar.differential(x, t)
                inv = np.linalg.inv(dpsi)
                prod_pushed = inv.T @ collar.product_matrix(x) @ inv
                gref = np.array(
                    [[float(value_of(e)) for e in row] for row in reference.matrix_fn(q)]
                )
                blended = eta * gref + (1.0 - eta) * prod_pushed
                out = blended.tolist()
        if len(cache) > 300000:
            cache.clear()
        cache[q] = out
        return out

    deformed = custom_metric(
        domain.m,
        matrix_fn,
        coord_names=reference.coord_names,
        family="deformed",
        supports_ad=False,
        vectorized=False,
        params={"r_prime": float(r_prime)},
    )
    spec.deformed = deformed
    new_domain = dataclasses.replace(domain, ambient=deformed, deformation=spec)
    return new_domain, spec


def equivalence_constant(
    g_field: MetricField,
    gp_field: MetricField,
    samples: np.ndarray,
) -> float:
    """Best sampled constant with g/C <= g' <= C g, via generalized eigenvalues."""
    worst = 1.0
    for p in np.asarray(samples, dtype=float).reshape(-1, g_field.dim):
        A = eval_metric(g_field, p)
        B = eval_metric(gp_field, p)
        eigs = scipy.linalg.eigh(B, A, eigvals_only=True)
        worst = max(worst, float(eigs[-1]), 1.0 / float(eigs[0]))
    return worst
