import math

import numpy as np
import pytest

from boundedgeo.deformation import (
    CollarTooShallowError,
    build_cutoff,
    deform_metric,
    equivalence_constant,
)
from boundedgeo.domains import build_domain
from boundedgeo.gridfields import build_grid
from boundedgeo.metrics import custom_metric, eval_metric, flat_metric

from conftest import strip_fragment, TWO_PI


def test_cutoff_plateaus_exact():
    eta = build_cutoff(0.2)
    assert eta(0.0) == 0.0
    assert eta(0.1) == 0.0
    assert eta(0.2) == 0.0
    assert eta(0.4) == 1.0
    assert eta(0.5) == 1.0
    assert eta(0.6) == 1.0


def test_cutoff_midpoint_symmetry():
    eta = build_cutoff(0.2)
    assert eta(0.3) == pytest.approx(0.5, abs=1e-14)
    # symmetry of the ratio profile around the midpoint
    for d in (0.02, 0.05, 0.08):
        assert eta(0.3 + d) + eta(0.3 - d) == pytest.approx(1.0, abs=1e-14)


def test_product_metric_unchanged(conformal_strip):
    ddom, spec = deform_metric(conformal_strip, 0.1, collar_depths={"top": 1.0, "bottom": 1.0})
    rng = np.random.default_rng(0)
    for _ in range(25):
        p = np.array([rng.uniform(0, TWO_PI), rng.uniform(0.01, 0.99)])
        a = eval_metric(conformal_strip.ambient, p)
        b = eval_metric(ddom.ambient, p)
        assert np.max(np.abs(a - b)) == 0.0
    samples = build_grid(conformal_strip, 12).flat_coords()
    assert equivalence_constant(conformal_strip.ambient, ddom.ambient, samples) == pytest.approx(
        1.0, abs=1e-12
    )


def test_collar_too_shallow_rejected(flat_dn):
    with pytest.raises(CollarTooShallowError, match="collar too shallow"):
        deform_metric(flat_dn, 0.5, collar_depths={"top": 1.0, "bottom": 1.0})


@pytest.fixture(scope="module")
def curved_deformed():
    dom = build_domain(strip_fragment(top="1+0.2*sin(x)"))
    ddom, spec = deform_metric(dom, 0.1, collar_depths={"top": 0.75, "bottom": 0.75})
    return dom, ddom, spec


def test_exact_product_inside_inner_collar(curved_deformed):
    dom, ddom, spec = curved_deformed
    rp = spec.r_prime
    for x in np.linspace(0, TWO_PI, 9)[:-1]:
        for t in (0.2 * rp, 0.6 * rp, rp):
            cm = spec.collar_matrix("top", (x,), t)
            pm = spec.collars["top"].product_matrix((x,))
            assert np.max(np.abs(cm - pm)) == 0.0


def test_exact_reference_outside_collar(curved_deformed):
    dom, ddom, spec = curved_deformed
    rng = np.random.default_rng(1)
    for _ in range(30):
        x = rng.uniform(0, TWO_PI)
        top = dom.face_value("top", (x,))
        # depth beyond 3r' from both faces
        t = rng.uniform(0.35, top - 0.35)
        p = np.array([x, t])
        a = eval_metric(dom.ambient, p)
        b = eval_metric(ddom.ambient, p)
        assert np.max(np.abs(a - b)) == 0.0


def test_synthetic_scaling_constant():
    g = flat_metric(2)
    g4 = custom_metric(2, lambda c: [[4.0, 0.0], [0.0, 4.0]], ("x", "t"))
    samples = np.array([[0.0, 0.0], [1.0, 0.5]])
    assert equivalence_constant(g, g4, samples) == pytest.approx(4.0, abs=1e-12)
    assert equivalence_constant(g4, g, samples) == pytest.approx(4.0, abs=1e-12)


def test_equivalence_decreases_with_blend_scale():
    dom = build_domain(
        strip_fragment(
            top="1+0.3*sin(x)",
            base={"family": "conformal", "dim": 1, "phi": "0.2*sin(x)", "period": TWO_PI},
        )
    )
    samples = build_grid(dom, 12).flat_coords()
    consts = []
    for rp in (0.2, 0.1, 0.05):
        _, spec = deform_metric(dom, rp, collar_depths={"top": 0.7, "bottom": 0.7})
        consts.append(equivalence_constant(spec.reference, spec.deformed, samples))
    assert consts[0] > consts[1] > consts[2] >= 1.0
    assert consts[2] <= 1.0 + 0.35 * (consts[0] - 1.0) + 1e-9


def test_volume_form_equivalence(curved_deformed):
    dom, ddom, spec = curved_deformed
    samples = build_grid(dom, 16).flat_coords()
    C = equivalence_constant(spec.reference, spec.deformed, samples)
    worst = 0.0
    for p in samples:
        da = np.linalg.det(eval_metric(spec.reference, p))
        db = np.linalg.det(eval_metric(spec.deformed, p))
        worst = max(worst, abs(math.log(db / da)))
    assert worst <= dom.m * math.log(C) + 1e-12


def test_one_form_norm_equivalence(curved_deformed):
    dom, ddom, spec = curved_deformed
    samples = build_grid(dom, 10).flat_coords()
    C = equivalence_constant(spec.reference, spec.deformed, samples)
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = samples[rng.integers(len(samples))]
        alpha = rng.standard_normal(dom.m)
        na = float(alpha @ np.linalg.solve(eval_metric(spec.reference, p), alpha))
        nb = float(alpha @ np.linalg.solve(eval_metric(spec.deformed, p), alpha))
        assert nb <= C * na * (1 + 1e-12)
        assert nb >= na / C * (1 - 1e-12)
