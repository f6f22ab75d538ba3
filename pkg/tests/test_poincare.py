import math

import numpy as np
import pytest

from boundedgeo.domains import build_domain
from boundedgeo.fem import discretize, smallest_eigenvalue
from boundedgeo.geodesics import FiberData, cut_function
from boundedgeo.gridfields import build_grid, face_source_mask, grid_distance_field
from boundedgeo.poincare import (
    empirical_poincare,
    fiber_poincare_check,
    hk_bound,
    hk_ratio_audit,
    proof_constant,
    random_fiber_functions,
    ricci_lower_sample,
    uniform_family_audit,
)

from conftest import strip_fragment, TWO_PI


def make_fiber(ts, v, which="bottom"):
    ts = np.asarray(ts, dtype=float)
    v = np.asarray(v, dtype=float)
    pts = np.zeros((len(ts), 2))
    return FiberData(which, (0.0,), float(ts[1] - ts[0]), ts, pts, v,
                     np.ones(len(ts), dtype=bool), float(ts[-1]), False, None)


def test_hk_bound_values():
    assert hk_bound(2, 1.0, 0.0) == 1.0
    assert hk_bound(2, 1.0, -1.0) == pytest.approx(math.e, rel=1e-15)
    assert hk_bound(3, 0.5, -4.0) == pytest.approx(math.exp(2 * 0.5 * 2.0))


def test_hk_ratio_trivial_fiber():
    ts = np.linspace(0, 1, 11)
    audit = hk_ratio_audit([make_fiber(ts, np.ones(11))], bound=1.0)
    assert audit.max_ratio == 1.0
    assert audit.passed
    assert audit.v0_max_error == 0.0


def test_hk_ratio_detects_growth():
    ts = np.linspace(0, 1, 11)
    audit = hk_ratio_audit([make_fiber(ts, 1.0 + ts)], bound=1.5)
    assert audit.max_ratio == pytest.approx(2.0)
    assert not audit.passed


def test_fiber_check_linear_function():
    # f(t) = t on a unit flat fiber with C = 2: lhs = 1/3, rhs = 2
    ts = np.linspace(0, 1, 2001)
    fiber = make_fiber(ts, np.ones(len(ts)))
    chk = fiber_poincare_check(fiber, ts.copy(), 2, 1.0, 2.0)
    assert chk.lhs == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert chk.rhs == pytest.approx(2.0, abs=1e-9)
    assert chk.passed


def test_fiber_check_zero_and_constant():
    ts = np.linspace(0, 1, 101)
    fiber = make_fiber(ts, np.ones(len(ts)))
    z = fiber_poincare_check(fiber, np.zeros(len(ts)), 2, 1.0, 2.0)
    assert z.passed and z.lhs == 0.0
    c = fiber_poincare_check(fiber, np.ones(len(ts)), 2, 1.0, 2.0)
    # constant function: boundary term dominates since C >= 1
    assert c.lhs == pytest.approx(1.0, abs=1e-9)
    assert c.rhs >= c.lhs
    assert c.passed


def test_fiber_check_sup_exponent():
    ts = np.linspace(0, 1, 101)
    fiber = make_fiber(ts, np.ones(len(ts)))
    f = 0.3 + 0.5 * ts
    chk = fiber_poincare_check(fiber, f, math.inf, 1.0, 1.0)
    assert chk.lhs == pytest.approx(0.8)
    assert chk.rhs == pytest.approx(0.3 + 0.5, abs=1e-9)
    assert chk.passed


def test_fiber_check_rejects_bad_exponent():
    ts = np.linspace(0, 1, 11)
    fiber = make_fiber(ts, np.ones(11))
    with pytest.raises(ValueError, match="exponent"):
        fiber_poincare_check(fiber, ts, 0.5, 1.0, 2.0)


def test_proof_constants():
    C, cp = proof_constant(1.0, 0.0, 2, 2)
    assert C == 2.0 and cp == pytest.approx(math.sqrt(2.0))
    C1, cp1 = proof_constant(1.0, 0.0, 2, 1)
    assert C1 == 1.0 and cp1 == 1.0
    _, cpsmall = proof_constant(1e-6, 0.0, 2, 2)
    assert cpsmall < 2e-3
    _, cpinf = proof_constant(2.0, 0.0, 2, math.inf)
    assert cpinf == 2.0


def test_seeded_fiber_functions_reproducible():
    ts = np.linspace(0, 1, 33)
    a = random_fiber_functions(ts, 5, 7)
    b = random_fiber_functions(ts, 5, 7)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa, fb)


def test_fiber_inequality_on_strip_fibers(flat_dn):
    grid = build_grid(flat_dn, 32)
    field = grid_distance_field(flat_dn, grid, face_source_mask(grid, ["bottom"]))
    region = flat_dn.sample_region(5)
    ricci = ricci_lower_sample(flat_dn.ambient, region.points())
    for p in (1, 2, math.inf):
        C_fiber = (2.0 ** (p - 1) if p != math.inf else 1.0) * hk_bound(2, 1.0, ricci)
        for x in np.linspace(0, TWO_PI, 5)[:-1]:
            fiber = cut_function(flat_dn, (x,), "bottom", field)
            for f in random_fiber_functions(fiber.ts, 10, 11):
                chk = fiber_poincare_check(fiber, f, p, 1.0, C_fiber)
                assert chk.passed


def test_empirical_constant_flat_dn(system_dn_64):
    emp = empirical_poincare(system_dn_64, 2, 100, 0)
    assert 0.55 <= emp.c_hat <= 2 / math.pi + 0.05
    assert emp.discarded == 0


def test_empirical_below_proof_after_slack(system_dn_64, spectral_dn_64):
    emp = empirical_poincare(system_dn_64, 2, 100, 0)
    _, cp = proof_constant(1.0, 0.0, 2, 2)
    assert spectral_dn_64.c_poincare <= emp.c_hat * 1.05
    assert emp.c_hat * 1.05 <= cp * 1.05
    emp1 = empirical_poincare(system_dn_64, 1, 60, 0)
    _, cp1 = proof_constant(1.0, 0.0, 2, 1)
    assert emp1.c_hat <= cp1 * 1.05


def test_dirichlet_projected_trials_have_zero_trace(system_dn_64):
    from boundedgeo.poincare import trial_functions
    from boundedgeo.fem import boundary_lp_norm

    for f in trial_functions(system_dn_64, 5, 3, project_dirichlet=True):
        assert boundary_lp_norm(system_dn_64, f, ["bottom"], 2) <= 1e-12


def test_widening_strips_lambda_decay():
    lams = []
    for w in (1.0, 2.0, 4.0, 8.0):
        dom = build_domain(strip_fragment(height=w))
        system = discretize(dom, 64)
        sp = smallest_eigenvalue(system)
        oracle = math.pi**2 / (4 * w * w)
        assert abs(sp.lambda_min - oracle) <= 0.05 * oracle
        lams.append(sp.lambda_min)
    assert lams[0] > lams[1] > lams[2] > lams[3]


def test_family_identical_components():
    frag = strip_fragment()
    doms = [build_domain(frag), build_domain(frag)]
    audit = uniform_family_audit(doms, 2, 30, 0, n=32)
    assert audit.failure is None
    assert audit.constants[0] == pytest.approx(audit.constants[1], rel=1e-12)
    assert audit.overall == max(audit.constants)


def test_family_wider_member_dominates():
    doms = [build_domain(strip_fragment(height=1.0)), build_domain(strip_fragment(height=2.0))]
    audit = uniform_family_audit(doms, 2, 40, 0, n=32)
    assert audit.failure is None
    assert audit.constants[1] > audit.constants[0]
    assert audit.overall == audit.constants[1]
    assert audit.passed


def test_family_empty_dirichlet_fails():
    frag = strip_fragment()
    bad = strip_fragment(dirichlet=())
    doms = [build_domain(frag), build_domain(bad)]
    audit = uniform_family_audit(doms, 2, 10, 0, n=16)
    assert not audit.passed
    assert "infinite width" in audit.failure


def test_hk_audit_product_configs(flat_dn, conformal_strip):
    for dom in (flat_dn, conformal_strip):
        grid = build_grid(dom, 32)
        field = grid_distance_field(dom, grid, face_source_mask(grid, dom.dirichlet))
        fibers = [
            cut_function(dom, (x,), "bottom", field) for x in np.linspace(0, TWO_PI, 6)[:-1]
        ]
        region = dom.sample_region(5)
        ricci = ricci_lower_sample(dom.ambient, region.points())
        bound = hk_bound(dom.m, 1.0, ricci / (dom.m - 1))
        audit = hk_ratio_audit(fibers, bound)
        assert audit.passed
        assert audit.v0_max_error <= 1e-6
