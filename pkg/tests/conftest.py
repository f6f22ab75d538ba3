import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from boundedgeo.domains import build_domain
from boundedgeo.fem import discretize, smallest_eigenvalue

TWO_PI = 2 * math.pi


def strip_fragment(height=1.0, dirichlet=("bottom",), base=None, top=None, bot="0"):
    frag = {
        "base": base or {"family": "flat", "dim": 1, "period": TWO_PI},
        "top": top or repr(float(height)),
        "bot": bot,
        "dirichlet": list(dirichlet),
        "neumann": [f for f in ("top", "bottom") if f not in dirichlet],
    }
    return frag


@pytest.fixture(scope="session")
def flat_dn():
    """Flat strip, periodic width 2 pi, height 1, Dirichlet bottom."""
    return build_domain(strip_fragment())


@pytest.fixture(scope="session")
def flat_dd():
    return build_domain(strip_fragment(dirichlet=("bottom", "top")))


@pytest.fixture(scope="session")
def curved_top():
    """Flat base with a curved top graph; Dirichlet bottom."""
    return build_domain(strip_fragment(top="1+0.2*sin(x)"))


@pytest.fixture(scope="session")
def conformal_strip():
    """Conformal base (a=0.2, b=1), flat faces; Dirichlet bottom."""
    return build_domain(
        strip_fragment(base={"family": "conformal", "dim": 1, "phi": "0.2*sin(x)", "period": TWO_PI})
    )


@pytest.fixture(scope="session")
def system_dn_64(flat_dn):
    return discretize(flat_dn, 64)


@pytest.fixture(scope="session")
def spectral_dn_64(system_dn_64):
    return smallest_eigenvalue(system_dn_64)


@pytest.fixture(scope="session")
def system_dd_64(flat_dd):
    return discretize(flat_dd, 64)


@pytest.fixture(scope="session")
def spectral_dd_64(system_dd_64):
    return smallest_eigenvalue(system_dd_64)


@pytest.fixture(scope="session")
def deformed_curved_top():
    """Curved-top domain, Dirichlet on the curved face, collar-product metric."""
    from boundedgeo.deformation import deform_metric

    domain = build_domain(strip_fragment(top="1+0.2*sin(x)", dirichlet=("top",)))
    ddomain, spec = deform_metric(domain, 0.1)
    return ddomain, spec
