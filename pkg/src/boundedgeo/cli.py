"""Configuration-driven runner for the geometry and solver audits.

Reads a strict JSON configuration, dispatches one task, emits a JSON
report plus CSV files with fixed 17-significant-digit formatting, and
gates its exit code on the findings: 0 when every check passes, 2 when
a check fails, 1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .domains import (
    DomainSpec,
    bounded_geometry_audit,
    build_domain,
    finite_width_report,
)
from .expressions import ExpressionError, parse_expression
from .fem import (
    NotPositiveDefiniteError,
    convergence_study,
    discretize,
    manufactured_case,
    resolvent_solve,
    smallest_eigenvalue,
)
from .geodesics import cut_function
from .gridfields import build_grid, face_source_mask, grid_distance_field
from .poincare import (
    empirical_poincare,
    fiber_poincare_check,
    hk_bound,
    hk_ratio_audit,
    proof_constant,
    random_fiber_functions,
    ricci_lower_sample,
    uniform_family_audit,
)

TASKS = (
    "describe",
    "audit-geometry",
    "poincare",
    "hk-audit",
    "fiber-check",
    "deform",
    "atlas",
    "eigen",
    "solve",
    "converge",
    "family",
)

_TOP_KEYS = {"task", "domain", "domains", "numeric", "output"}
_NUMERIC_KEYS = {
    "n",
    "seed",
    "p",
    "lambda",
    "r",
    "r_prime",
    "trials",
    "grids",
    "manufactured_u",
    "rhs",
    "widths",
    "export_matrix",
}
_OUTPUT_KEYS = {"dir"}
_DOMAIN_KEYS = {"base", "top", "bot", "dirichlet", "neumann", "deform"}
_BASE_KEYS = {"family", "dim", "phi", "period", "range"}
_DEFORM_KEYS = {"r_prime"}

_REQUIRED = {
    "describe": (),
    "audit-geometry": ("n",),
    "poincare": ("n", "p", "trials"),
    "hk-audit": ("n",),
    "fiber-check": ("n", "p", "trials"),
    "deform": ("n",),
    "atlas": ("n",),
    "eigen": ("n",),
    "solve": ("n", "lambda"),
    "converge": ("grids", "manufactured_u"),
    "family": ("n", "p", "trials"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str
    domain: Optional[dict]
    domains: Optional[list]
    numeric: dict
    output_dir: Optional[str]
    raw: dict


@dataclass
class Finding:
    name: str
    passed: bool
    value: object = None
    bound: object = None
    tolerance: object = None
    detail: str = ""


@dataclass
class RunReport:
    task: str
    findings: List[Finding]
    data: dict
    files: List[str]
    config: dict

    @property
    def all_passed(self) -> bool:
        return all(f.passed for f in self.findings)


def _check_keys(block: dict, allowed: set, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")


def _validate_domain_fragment(fragment: dict, where: str):
    _check_keys(fragment, _DOMAIN_KEYS, where)
    base = fragment.get("base")
    if base is not None:
        _check_keys(base, _BASE_KEYS, f"{where}.base")
        if "phi" in base:
            parse_expression(base["phi"])
    if "deform" in fragment:
        _check_keys(fragment["deform"], _DEFORM_KEYS, f"{where}.deform")
    for key in ("top", "bot"):
        if key in fragment:
            parse_expression(fragment[key])


def load_config(path: str) -> RunConfig:
    """Parse and validate a run configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    _check_keys(raw, _TOP_KEYS, "config")
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"unknown or missing task {task!r}; expected one of {TASKS}")
    numeric = raw.get("numeric", {})
    _check_keys(numeric, _NUMERIC_KEYS, "numeric")
    for req in _REQUIRED[task]:
        if req not in numeric:
            raise ConfigError(f"task {task!r} requires numeric.{req}")
    output = raw.get("output", {})
    _check_keys(output, _OUTPUT_KEYS, "output")
    domain = raw.get("domain")
    domains = raw.get("domains")
    if task == "family":
        if not domains:
            raise ConfigError("task 'family' requires a 'domains' list")
        for i, frag in enumerate(domains):
            _validate_domain_fragment(frag, f"domains[{i}]")
    else:
        if domain is None:
            raise ConfigError(f"task {task!r} requires a 'domain' block")
        _validate_domain_fragment(domain, "domain")
    if "manufactured_u" in numeric:
        parse_expression(numeric["manufactured_u"])
    if "rhs" in numeric:
        parse_expression(numeric["rhs"])
    numeric = dict(numeric)
    numeric.setdefault("seed", 0)
    return RunConfig(task, domain, domains, numeric, output.get("dir"), raw)


# deterministic output -------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def worker_count() -> int:
    raw = os.environ.get("BOUNDEDGEO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when a worker cap above one is set."""
    workers = worker_count()
    items = list(items)
    if workers == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _build(fragment: dict):
    """Domain plus optional deformation from a config fragment."""
    frag = dict(fragment)
    deform_cfg = frag.pop("deform", None)
    domain = build_domain(frag)
    spec = None
    if deform_cfg is not None:
        from .deformation import deform_metric

        domain, spec = deform_metric(domain, deform_cfg.get("r_prime"))
    return domain, spec


def _strip_oracle(domain: DomainSpec):
    """Closed-form lowest eigenvalue for flat strips with constant faces."""
    if domain.base.family != "flat":
        return None
    if not (domain.top.is_constant and domain.bot.is_constant):
        return None
    height = domain.face_value("top", [ax.lo for ax in domain.axes]) - domain.face_value(
        "bottom", [ax.lo for ax in domain.axes]
    )
    nd = len(domain.dirichlet)
    if nd == 2:
        return (math.pi / height) ** 2
    if nd == 1:
        return (math.pi / (2 * height)) ** 2
    return 0.0


# task implementations --------------------------------------------------------


def _task_describe(config, domain, spec, out):
    data = {
        "dimension": domain.m,
        "eps": domain.eps,
        "eps_resolution": domain.eps_resolution,
        "axes": [
            {"lo": ax.lo, "hi": ax.hi, "periodic": ax.periodic} for ax in domain.axes
        ],
        "dirichlet": list(domain.dirichlet),
        "neumann": list(domain.neumann),
        "ambient_family": domain.ambient.family,
        "base_family": domain.base.family,
    }
    return [], data, []


def _task_audit_geometry(config, domain, spec, out):
    n = int(config.numeric["n"])
    audit = bounded_geometry_audit(domain, n=min(n, 33), seed=int(config.numeric["seed"]))
    findings = [
        Finding("collar-depth", audit.r_partial > 0, audit.r_partial, 0.0, None,
                "fold-free depth of the inward normal map"),
    ]
    data = {
        "collar_depth": audit.collar_depth,
        "r_partial": audit.r_partial,
        "conjugate_min": audit.conjugate_min,
        "eps": audit.eps,
        "shape_sup": audit.shape_sup,
        "notes": list(audit.findings),
    }
    if audit.bounds is not None:
        data["curvature_sup"] = audit.bounds.sup_norms
        data["ricci_lower"] = audit.bounds.ricci_lower
        findings.append(
            Finding(
                "curvature-bounds",
                all(math.isfinite(v) for v in audit.bounds.sup_norms.values()),
                max(audit.bounds.sup_norms.values()),
                None,
                None,
                "sampled curvature sup norms are finite",
            )
        )
    files = []
    if domain.dirichlet:
        grid = build_grid(domain, n)
        field = grid_distance_field(domain, grid, face_source_mask(grid, domain.dirichlet))
        rep = finite_width_report(domain, field)
        findings.append(
            Finding("finite-width", not rep.infinite, rep.radius, None, rep.h,
                    "max sampled distance to the Dirichlet faces")
        )
        data["width"] = rep.radius
        rows = [
            list(pt) + [d]
            for pt, d in zip(grid.flat_coords(), field.values.reshape(-1))
            if math.isfinite(d)
        ]
        files.append(
            ("distance.csv", list(domain.ambient.coord_names) + ["distance"], rows)
        )
    else:
        findings.append(Finding("finite-width", False, math.inf, None, None,
                                "infinite width: no Dirichlet face"))
    return findings, data, files


def _task_eigen(config, domain, spec, out):
    n = int(config.numeric["n"])
    system = discretize(domain, n)
    report = smallest_eigenvalue(system)
    findings = []
    data = {
        "lambda_min": report.lambda_min,
        "c": report.c_poincare,
        "gamma": report.gamma,
        "iterations": report.iterations,
        "residual": report.residual,
    }
    if report.poincare_fails:
        findings.append(
            Finding("poincare", False, 0.0, None, None,
                    "lambda_min = 0 exactly: Poincare fails (no Dirichlet face)")
        )
        return findings, data, []
    oracle = _strip_oracle(domain)
    if oracle:
        rel = abs(report.lambda_min - oracle) / oracle
        findings.append(Finding("eigenvalue-oracle", rel <= 0.01, report.lambda_min,
                                oracle, 0.01, "flat-strip separation of variables"))
        c_oracle = 1.0 / math.sqrt(oracle)
        findings.append(
            Finding("constant-oracle",
                    abs(report.c_poincare - c_oracle) / c_oracle <= 0.015,
                    report.c_poincare, c_oracle, 0.015, "c = lambda^(-1/2)")
        )
        g_oracle = 1.0 / (1.0 + c_oracle**2)
        findings.append(
            Finding("gamma-oracle", abs(report.gamma - g_oracle) / g_oracle <= 0.015,
                    report.gamma, g_oracle, 0.015, "gamma = (1+c^2)^(-1)")
        )
    else:
        findings.append(Finding("eigenvalue", report.lambda_min > 0, report.lambda_min,
                                None, None, "lowest mixed-condition eigenvalue"))
    return findings, data, []


def _fiber_set(config, domain, n, count=12):
    grid = build_grid(domain, n)
    field = grid_distance_field(domain, grid, face_source_mask(grid, domain.dirichlet))
    xs = domain.face_samples(count)
    fibers = []
    for which in domain.dirichlet:
        fibers.extend(
            parallel_map(lambda x: cut_function(domain, tuple(x), which, field), xs)
        )
    return grid, field, fibers


def _hk_data(config, domain):
    n = int(config.numeric["n"])
    grid, field, fibers = _fiber_set(config, domain, n)
    rep = finite_width_report(domain, field)
    region = domain.sample_region(9)
    ricci = ricci_lower_sample(domain.ambient, region.points())
    rate = ricci / (domain.m - 1)
    bound = hk_bound(domain.m, rep.radius, rate)
    return grid, field, fibers, rep, ricci, rate, bound


def _task_hk_audit(config, domain, spec, out):
    grid, field, fibers, rep, ricci, rate, bound = _hk_data(config, domain)
    audit = hk_ratio_audit(fibers, bound)
    findings = [
        Finding("distortion-ratio", audit.passed, audit.max_ratio, bound, 0.02,
                "max v(x,t)/v(x,s) against exp((m-1) R sqrt|c|)"),
        Finding("unit-start", audit.v0_max_error <= 1e-6, audit.v0_max_error, 1e-6,
                None, "v(x,0) = 1 at all boundary samples"),
    ]
    data = {
        "width": rep.radius,
        "ricci_lower": ricci,
        "bound": bound,
        "max_ratio": audit.max_ratio,
        "skipped_fibers": audit.skipped,
    }
    rows = []
    for fiber in fibers:
        rows.extend(fiber.csv_rows())
    files = [("fibers.csv", ["x", "t", "v", "minimizing"], rows)]
    return findings, data, files


def _task_fiber_check(config, domain, spec, out):
    p = config.numeric["p"]
    p = math.inf if p in ("inf", "infinity") else float(p)
    trials = int(config.numeric["trials"])
    seed = int(config.numeric["seed"])
    grid, field, fibers, rep, ricci, rate, bound = _hk_data(config, domain)
    C = 2.0 ** (p - 1) * bound if p != math.inf else bound
    rows = []
    worst = 0.0
    all_pass = True
    for fi, fiber in enumerate(fibers):
        for fj, f in enumerate(random_fiber_functions(fiber.ts, max(trials // len(fibers), 3), seed + fi)):
            chk = fiber_poincare_check(fiber, f, p, rep.radius, C)
            all_pass &= chk.passed
            if chk.rhs > 0:
                worst = max(worst, chk.lhs / chk.rhs)
            rows.append([fi, fj, chk.lhs, chk.rhs, chk.passed])
    findings = [
        Finding("fiber-inequality", all_pass, worst, 1.0, 0.03,
                "lhs <= rhs for every seeded fiber function")
    ]
    data = {"width": rep.radius, "fiber_constant": C, "checks": len(rows)}
    return findings, data, [("fiber_checks.csv", ["fiber", "trial", "lhs", "rhs", "passed"], rows)]


def _task_poincare(config, domain, spec, out):
    n = int(config.numeric["n"])
    p = config.numeric["p"]
    p = math.inf if p in ("inf", "infinity") else float(p)
    trials = int(config.numeric["trials"])
    seed = int(config.numeric["seed"])
    system = discretize(domain, n)
    grid = system.grid
    field = grid_distance_field(domain, grid, face_source_mask(grid, domain.dirichlet))
    rep = finite_width_report(domain, field)
    region = domain.sample_region(9)
    ricci = ricci_lower_sample(domain.ambient, region.points()) if domain.ambient.supports_ad else 0.0
    C, c_proof = proof_constant(rep.radius, ricci, domain.m, p)
    emp = empirical_poincare(system, p, trials, seed)
    findings = [
        Finding("empirical-vs-proof", emp.c_hat <= c_proof * 1.05, emp.c_hat,
                c_proof, 0.05, "sampled constant below the tracked constant"),
    ]
    data = {
        "p": "inf" if p == math.inf else p,
        "width": rep.radius,
        "ricci_lower": ricci,
        "fiber_constant": C,
        "proof_constant": c_proof,
        "empirical": emp.c_hat,
        "discarded": emp.discarded,
    }
    if p == 2:
        sp = smallest_eigenvalue(system)
        data.update({"eigen_c": sp.c_poincare, "gamma": sp.gamma,
                     "lambda_min": sp.lambda_min})
        findings.append(
            Finding("eigen-vs-empirical", sp.c_poincare <= emp.c_hat * 1.05,
                    sp.c_poincare, emp.c_hat, 0.05,
                    "eigenvalue-derived constant below the sampled one")
        )
    rows = [[i, r] for i, r in enumerate(emp.ratios)]
    return findings, data, [("poincare_ratios.csv", ["trial", "ratio"], rows)]


def _task_deform(config, domain, spec, out):
    from .deformation import deform_metric, equivalence_constant

    if spec is None:
        r_prime = config.numeric.get("r_prime")
        ddomain, spec = deform_metric(domain, r_prime)
    else:
        ddomain = domain
        domain = dataclasses.replace(domain, ambient=spec.reference)
    rp = spec.r_prime
    xs = domain.face_samples(7)
    probes_inner = []
    probes_outer = []
    for which in ("top", "bottom"):
        collar = spec.collars[which]
        for x in xs:
            probes_inner.append((which, tuple(x), 0.5 * rp))
            probes_outer.append(collar.forward(tuple(x), 3.5 * rp))
    inner_dev = 0.0
    for which, x, t in probes_inner:
        cm = spec.collar_matrix(which, x, t)
        pm = spec.collars[which].product_matrix(x)
        inner_dev = max(inner_dev, float(np.max(np.abs(cm - pm))))
    outer_dev = 0.0
    from .metrics import eval_metric

    for q in probes_outer:
        if not domain.inside(q, tol=0.0):
            continue
        a = eval_metric(spec.reference, q)
        b = eval_metric(spec.deformed, q)
        outer_dev = max(outer_dev, float(np.max(np.abs(a - b))))
    n = int(config.numeric["n"])
    samples = build_grid(domain, min(n, 24)).flat_coords()
    C = equivalence_constant(spec.reference, spec.deformed, samples)
    spec.equivalence = C
    findings = [
        Finding("product-inner", inner_dev <= 1e-12, inner_dev, 1e-12, None,
                "collar-coordinate metric is exactly the product below r'"),
        Finding("identity-outer", outer_dev <= 1e-12, outer_dev, 1e-12, None,
                "deformed metric equals the original beyond 3r'"),
        Finding("equivalence", C >= 1.0, C, None, None,
                "sampled two-sided metric equivalence constant"),
    ]
    data = {"r_prime": rp, "collar_depth": spec.collar_depth, "C": C}
    return findings, data, []


def _task_atlas(config, domain, spec, out):
    from .atlas import build_atlas

    n = int(config.numeric["n"])
    seed = int(config.numeric["seed"])
    grid = build_grid(domain, min(n, 32))
    atlas = build_atlas(domain, grid, r=config.numeric.get("r"), seed=seed)
    sums = atlas.phi_nodes.sum(axis=0)
    sum_err = float(np.abs(sums - 1.0).max())
    rng = np.random.default_rng(seed)
    worst_rt = 0.0
    for _ in range(50):
        chart = atlas.charts[int(rng.integers(len(atlas.charts)))]
        if chart.kind == "boundary":
            xi = np.array([rng.uniform(-0.8, 0.8) * atlas.r, rng.uniform(0.0, 0.8) * atlas.r])
        else:
            xi = rng.uniform(-0.55, 0.55, size=domain.m) * atlas.r
        q = chart.forward(xi)
        worst_rt = max(worst_rt, float(np.max(np.abs(chart.inverse(q) - xi))))
    findings = [
        Finding("partition-sum", sum_err <= 1e-12, sum_err, 1e-12, None,
                "partition functions sum to one at every node"),
        Finding("round-trip", worst_rt <= 1e-8, worst_rt, 1e-8, None,
                "chart inversion round trips"),
        Finding("normal-gauge", atlas.gauge_residual <= 1e-8, atlas.gauge_residual,
                1e-8, None, "unit and orthogonal normal at depth zero"),
    ]
    data = {
        "r": atlas.r,
        "r_fc": atlas.r_fc,
        "charts": atlas.chart_count(),
        "boundary_charts": sum(1 for c in atlas.charts if c.kind == "boundary"),
        "multiplicity": atlas.multiplicity,
        "overlap_bound": atlas.overlap_bound,
        "derivative_bounds": atlas.derivative_bounds,
        "chart_metric_sup": atlas.chart_metric_sup,
    }
    rows = []
    for ci, chart in enumerate(atlas.charts):
        center = chart.center_ambient
        rows.append([ci, 1 if chart.kind == "boundary" else 0] + list(center))
    files = [("atlas_centers.csv", ["chart", "boundary"] + list(domain.ambient.coord_names), rows)]

    from .atlas import _pullback

    m = domain.m
    sample_rows = []
    fd = 1e-3 * atlas.r
    for ci, chart in enumerate(atlas.charts):
        probes = (
            [(0.3 * atlas.r, 0.2 * atlas.r), (-0.3 * atlas.r, 0.4 * atlas.r)]
            if chart.kind == "boundary"
            else [tuple([0.2 * atlas.r] * m), tuple([-0.25 * atlas.r] * m)]
        )
        for xi in probes:
            G = _pullback(chart, np.asarray(xi), fd, domain.ambient)
            sample_rows.append([ci] + list(xi) + [G[i, j] for i in range(m) for j in range(i, m)])
    header = ["chart"] + [f"xi{k}" for k in range(m)] + [
        f"g{i}{j}" for i in range(m) for j in range(i, m)
    ]
    files.append(("chart_metric_samples.csv", header, sample_rows))
    return findings, data, files


def _task_solve(config, domain, spec, out):
    n = int(config.numeric["n"])
    lam = float(config.numeric["lambda"])
    system = discretize(domain, n)
    sp = smallest_eigenvalue(system)
    findings = []
    data = {"lambda": lam, "gamma": sp.gamma, "lambda_min": sp.lambda_min}
    files = []
    try:
        if "manufactured_u" in config.numeric:
            case = manufactured_case(domain, config.numeric["manufactured_u"], lam,
                                     metric=domain.ambient)
            sol = resolvent_solve(system, lam, f=case.f, dirichlet=case.dirichlet,
                                  neumann=case.neumann, spectral=sp)
            ustar = np.array([case.u(pt) for pt in system.grid.flat_coords()])
            err = float(np.sqrt((sol.u - ustar) @ (system.M @ (sol.u - ustar))))
            data["l2_error"] = err
            findings.append(Finding("manufactured-recovery", err <= 10.0 / n**2,
                                    err, 10.0 / n**2, None,
                                    "second-order recovery of the prescribed solution"))
        else:
            rhs = config.numeric.get("rhs")
            f = None
            if rhs is not None:
                expr = parse_expression(rhs, allowed_variables=domain.ambient.coord_names)
                names = domain.ambient.coord_names

                def f(pt, _e=expr, _n=names):
                    return float(_e(dict(zip(_n, pt))))

            sol = resolvent_solve(system, lam, f=f, spectral=sp)
            findings.append(Finding("resolvent-solve", True, sol.residual, None, None,
                                    "discrete weak residual"))
        data["residual"] = sol.residual
        if sol.band_flag:
            data["band"] = sol.band_flag
        rows = [list(pt) + [u] for pt, u in zip(system.grid.flat_coords(), sol.u)]
        files.append(("solution.csv", list(domain.ambient.coord_names) + ["u"], rows))
        if config.numeric.get("export_matrix"):
            A = (system.K - lam * system.M).tocoo()
            triples = sorted(zip(A.row.tolist(), A.col.tolist(), A.data.tolist()))
            files.append(("matrix.csv", ["row", "col", "value"], triples))
    except NotPositiveDefiniteError as exc:
        findings.append(Finding("resolvent-solve", False, lam, sp.lambda_min, None,
                                f"shift not below the spectrum: {exc}"))
    return findings, data, files


def _task_converge(config, domain, spec, out):
    grids = [int(g) for g in config.numeric["grids"]]
    lam = float(config.numeric.get("lambda", 0.0))
    case = manufactured_case(domain, config.numeric["manufactured_u"], lam,
                             metric=domain.ambient)
    study = convergence_study(domain, case, grids, metric=domain.ambient)
    findings = [Finding("monotone-errors", study.monotone,
                        study.l2_errors[-1], study.l2_errors[0], None,
                        "errors decrease under refinement")]
    if study.monotone:
        findings.append(Finding("l2-order", abs(study.l2_order - 2.0) <= 0.15,
                                study.l2_order, 2.0, 0.15, "observed L2 rate"))
        findings.append(Finding("h1-order", abs(study.h1_order - 1.0) <= 0.15,
                                study.h1_order, 1.0, 0.15, "observed H1 rate"))
    data = {
        "grids": grids,
        "l2_errors": list(study.l2_errors),
        "h1_errors": list(study.h1_errors),
        "l2_order": study.l2_order,
        "h1_order": study.h1_order,
    }
    rows = [[n, l2, h1] for n, l2, h1 in zip(grids, study.l2_errors, study.h1_errors)]
    return findings, data, [("convergence.csv", ["n", "l2_error", "h1_error"], rows)]


def _task_family(config, domain, spec, out):
    n = int(config.numeric["n"])
    p = config.numeric["p"]
    p = math.inf if p in ("inf", "infinity") else float(p)
    trials = int(config.numeric["trials"])
    seed = int(config.numeric["seed"])
    members = []
    for frag in config.domains:
        d, _ = _build(frag)
        members.append(d)
    audit = uniform_family_audit(members, p, trials, seed, n=n)
    findings = []
    if audit.failure:
        findings.append(Finding("finite-width", False, math.inf, None, None, audit.failure))
    else:
        findings.append(Finding("family-constant", audit.passed, audit.overall,
                                audit.worst_proof, 0.05,
                                "disjoint-union constant below the worst-member bound"))
    data = {
        "constants": audit.constants,
        "overall": None if math.isinf(audit.overall) else audit.overall,
        "worst_proof": None if math.isinf(audit.worst_proof) else audit.worst_proof,
        "failure": audit.failure,
    }
    rows = [[i, c] for i, c in enumerate(audit.constants)]
    return findings, data, [("family_constants.csv", ["component", "c_hat"], rows)]


_TASK_FN = {
    "describe": _task_describe,
    "audit-geometry": _task_audit_geometry,
    "poincare": _task_poincare,
    "hk-audit": _task_hk_audit,
    "fiber-check": _task_fiber_check,
    "deform": _task_deform,
    "atlas": _task_atlas,
    "eigen": _task_eigen,
    "solve": _task_solve,
    "converge": _task_converge,
    "family": _task_family,
}


def run(config: RunConfig, out_dir: Optional[str] = None,
        seed: Optional[int] = None) -> RunReport:
    """Execute one task and write its report and CSV files."""
    if seed is not None:
        config.numeric["seed"] = int(seed)
    out = out_dir or config.output_dir or "."
    os.makedirs(out, exist_ok=True)
    domain = spec = None
    if config.task != "family":
        domain, spec = _build(config.domain)
    findings, data, files = _TASK_FN[config.task](config, domain, spec, out)
    written = []
    for name, header, rows in files:
        path = os.path.join(out, name)
        write_csv(path, header, rows)
        written.append(path)
    report = RunReport(config.task, findings, data, written, config.raw)
    payload = {
        "task": report.task,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "config": report.config,
        "findings": [dataclasses.asdict(f) for f in report.findings],
        "data": _jsonable(report.data),
        "files": report.files,
    }
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=_jsonable, allow_nan=True)
        fh.write("\n")
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="boundedgeo",
        description="Geometry, inequality and solver audits on slab domains.",
    )
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True, help="path to a JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override numeric.seed")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if config.task != args.task:
            raise ConfigError(
                f"config task {config.task!r} does not match requested {args.task!r}"
            )
        report = run(config, out_dir=args.out, seed=args.seed)
    except (ConfigError, ExpressionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for f in report.findings:
        status = "PASS" if f.passed else "FAIL"
        parts = [f"[{status}] {f.name}"]
        if f.value is not None:
            parts.append(f"value={_fmt(f.value) if isinstance(f.value, (int, float, np.floating)) else f.value}")
        if f.bound is not None:
            parts.append(f"bound={_fmt(f.bound) if isinstance(f.bound, (int, float, np.floating)) else f.bound}")
        if f.tolerance is not None:
            parts.append(f"tol={f.tolerance}")
        if f.detail:
            parts.append(f.detail)
        print("  ".join(parts))
    return 0 if report.all_passed else 2


if __name__ == "__main__":
    sys.exit(main())
