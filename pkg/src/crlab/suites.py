"""Verification suites and the batch runner behind ``crlab``.

A suite turns a validated :class:`RunConfig` into a :class:`SuiteResult`:
gated criteria (pass/fail against a tolerance), informational values and
tables.  :func:`run_suite` writes ``report.json`` and one CSV per table into
a fresh timestamped directory.

``report.json`` is a pure function of the config and the seed: wall-clock
times only appear in ``timings.csv``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigInvalid, ContractionViolated
from .geometry import BUNDLED, DefiningSystem, certify_q_pseudoconcave, default_samples, fit_graph

SUITE_NAMES = (
    "pseudoconcavity",
    "kernel-identities",
    "barrier",
    "h-vanishing",
    "homotopy-residual",
    "bm",
    "model-integrals",
    "invert-map",
    "graph-delta",
    "discrete-algebra",
    "operator-drift",
)

CONFIG_KEYS = ("suite", "manifold", "epsilon_ladder", "grid", "seed", "out", "tolerances", "params", "perturbation")


# ---------------------------------------------------------------------------
# results


@dataclass
class Criterion:
    name: str
    value: object
    threshold: object
    relation: str
    passed: bool
    gated: bool = True

    def to_dict(self):
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "relation": self.relation,
            "passed": bool(self.passed),
            "gated": self.gated,
        }


@dataclass
class SuiteResult:
    criteria: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def check(self, name, value, relation, threshold, gated=True):
        """Record ``value <relation> threshold``; relations ``<``, ``<=``,
        ``>``, ``>=``, ``==`` and ``in`` (closed interval)."""
        v = _plain(value)
        if relation == "<":
            ok = v < threshold
        elif relation == "<=":
            ok = v <= threshold
        elif relation == ">":
            ok = v > threshold
        elif relation == ">=":
            ok = v >= threshold
        elif relation == "==":
            ok = v == threshold
        elif relation == "in":
            ok = threshold[0] <= v <= threshold[1]
        else:
            raise ValueError(relation)
        self.criteria.append(Criterion(name, v, _plain(threshold), relation, bool(ok), gated))
        return bool(ok)

    def flag(self, name, ok, value=None, gated=True):
        """Record a boolean criterion."""
        self.criteria.append(Criterion(name, _plain(value if value is not None else bool(ok)), True, "is", bool(ok), gated))
        return bool(ok)

    @property
    def passed(self):
        return all(c.passed for c in self.criteria if c.gated)


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    """Validated run configuration (see :func:`load_config`)."""

    suite: str
    manifold: str | dict | None
    manifold_data: dict | None
    epsilon_ladder: list | None
    grid: list | None
    seed: int
    out: str
    tolerances: dict
    params: dict
    perturbation: dict | None = None

    def resolved(self):
        """Everything that determines the results (not the output path)."""
        return {
            "suite": self.suite,
            "manifold": self.manifold if isinstance(self.manifold, str) else "inline",
            "manifold_data": self.manifold_data,
            "epsilon_ladder": self.epsilon_ladder,
            "grid": self.grid,
            "seed": self.seed,
            "tolerances": self.tolerances,
            "params": self.params,
            "perturbation": self.perturbation,
        }

    def config_hash(self):
        blob = json.dumps(_plain(self.resolved()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class SuiteSpec:
    runner: object
    anchors: list
    manifold: str | None = None
    epsilon_ladder: list | None = None
    grid: list | None = None
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    min_rungs: int = 0
    min_grid: int = 0
    grid_matches_ladder: bool = False


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigInvalid(f"{what} file not found: {path}", what) from None
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"{what} is not valid JSON: {e}", what) from None


def _manifold_data(ref, base):
    """Bundled name, a path (relative to the config file) or an inline object."""
    if isinstance(ref, dict):
        return ref
    if not isinstance(ref, str):
        raise ConfigInvalid("manifold must be a bundled name, a file path or an object", "manifold")
    if ref in BUNDLED:
        from importlib import resources

        return json.loads((resources.files("crlab") / "data" / f"{ref}.json").read_text())
    p = Path(ref)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return _read_json(p, "manifold")


def _check_number_list(v, path, kind):
    if not isinstance(v, list) or not v:
        raise ConfigInvalid("expected a non-empty list", path)
    for i, x in enumerate(v):
        if kind is int:
            if isinstance(x, bool) or not isinstance(x, int) or x <= 0:
                raise ConfigInvalid("expected a positive integer", f"{path}[{i}]")
        elif isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) or x <= 0:
            raise ConfigInvalid("expected a positive number", f"{path}[{i}]")
    return [kind(x) for x in v]


def _same_type(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return default is None


def load_config(suite, path=None, overrides=None):
    """Read and validate a run configuration.

    Parameters
    ----------
    suite : str
        Suite name (one of :data:`SUITE_NAMES`).
    path : str or None
        JSON config file; ``None`` uses the suite defaults.
    overrides : dict
        Command line values for ``epsilon_ladder``, ``grid``, ``seed`` and
        ``out`` (``None`` entries are ignored).

    Raises
    ------
    ConfigInvalid
        with ``path`` naming the offending field.
    """
    if suite not in SUITES:
        raise ConfigInvalid(f"unknown suite {suite!r}; choose from {', '.join(SUITE_NAMES)}", "suite")
    spec = SUITES[suite]
    raw = {} if path is None else _read_json(path, "config")
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object", "$")
    for k in raw:
        if k not in CONFIG_KEYS:
            raise ConfigInvalid(f"unknown field {k!r}", k)
    if "suite" in raw and raw["suite"] != suite:
        raise ConfigInvalid(f"config is for suite {raw['suite']!r}, not {suite!r}", "suite")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    base = None if path is None else Path(path).parent

    manifold = raw.get("manifold", spec.manifold)
    mdata = None
    if manifold is not None:
        mdata = _manifold_data(manifold, base)
        try:
            DefiningSystem.from_dict(mdata)
        except ConfigInvalid as e:
            raise ConfigInvalid(e.msg, f"manifold.{e.path}") from None
        if "q" in mdata and (not isinstance(mdata["q"], int) or mdata["q"] < 0):
            raise ConfigInvalid("q must be a non-negative integer", "manifold.q")

    ladder = raw.get("epsilon_ladder", spec.epsilon_ladder)
    if ladder is not None:
        ladder = _check_number_list(ladder, "epsilon_ladder", float)
        for i in range(1, len(ladder)):
            if not ladder[i] < ladder[i - 1]:
                raise ConfigInvalid("epsilon ladder must be strictly decreasing", f"epsilon_ladder[{i}]")
        if len(ladder) < spec.min_rungs:
            raise ConfigInvalid(f"{suite} needs at least {spec.min_rungs} ladder rungs for trend tests", "epsilon_ladder")
    grid = raw.get("grid", spec.grid)
    if grid is not None:
        grid = _check_number_list(grid, "grid", int)
        for i in range(1, len(grid)):
            if not grid[i] > grid[i - 1]:
                raise ConfigInvalid("grid resolutions must be strictly increasing", f"grid[{i}]")
        if len(grid) < spec.min_grid:
            raise ConfigInvalid(f"{suite} needs at least {spec.min_grid} grid resolutions", "grid")
    if spec.grid_matches_ladder and ladder is not None and grid is not None and len(grid) != len(ladder):
        raise ConfigInvalid(f"grid has {len(grid)} entries but the ladder has {len(ladder)} rungs", "grid")

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigInvalid("seed must be a non-negative integer", "seed")
    out = raw.get("out", "reports")
    if not isinstance(out, str):
        raise ConfigInvalid("out must be a directory path", "out")

    tol = dict(spec.tolerances)
    user_tol = raw.get("tolerances", {})
    if not isinstance(user_tol, dict):
        raise ConfigInvalid("tolerances must be an object", "tolerances")
    for k, v in user_tol.items():
        if k not in tol:
            raise ConfigInvalid(f"unknown tolerance {k!r} for {suite}", f"tolerances.{k}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigInvalid("tolerance must be a positive number", f"tolerances.{k}")
        tol[k] = float(v)

    params = copy.deepcopy(spec.params)
    user = raw.get("params", {})
    if not isinstance(user, dict):
        raise ConfigInvalid("params must be an object", "params")
    for k, v in user.items():
        if k not in params:
            raise ConfigInvalid(f"unknown parameter {k!r} for {suite}", f"params.{k}")
        if not _same_type(params[k], v):
            raise ConfigInvalid(f"parameter has the wrong type (expected {type(params[k]).__name__})", f"params.{k}")
        params[k] = float(v) if isinstance(params[k], float) else v

    pert = raw.get("perturbation")
    if pert is not None:
        from .perturb import PerturbationMap

        try:
            PerturbationMap.from_dict(pert)
        except ConfigInvalid as e:
            raise ConfigInvalid(e.msg, e.path if str(e.path).startswith("perturbation") else f"perturbation.{e.path}") from None
    return RunConfig(suite, manifold, mdata, ladder, grid, seed, out, tol, params, pert)


# ---------------------------------------------------------------------------
# context shared by the runners


class Context:
    def __init__(self, config):
        self.config = config
        self.params = config.params
        self.tol = config.tolerances
        self.seed = config.seed
        self.rng = np.random.default_rng(config.seed)
        self._M = None

    @property
    def M(self):
        if self._M is None:
            if self.config.manifold_data is None:
                raise ConfigInvalid("this suite needs a manifold", "manifold")
            ref = self.config.manifold
            name = ref.get("name", "inline") if isinstance(ref, dict) else ref if ref in BUNDLED else Path(ref).stem
            self._M = DefiningSystem.from_dict(self.config.manifold_data, name=name)
        return self._M

    @property
    def q(self):
        d = self.config.manifold_data
        if "q" in d:
            return int(d["q"])
        return certify_q_pseudoconcave(self.M, 0).q_attained

    def barrier(self):
        from .barrier import Barrier

        return Barrier(self.M, self.q)


# ---------------------------------------------------------------------------
# suites


def run_pseudoconcavity(ctx):
    M, q = ctx.M, ctx.q
    thetas, points = default_samples(M, ctx.params["samples"], ctx.seed)
    cert = certify_q_pseudoconcave(M, q, (thetas, points))
    res = SuiteResult()
    res.check("negative eigenvalues >= q", cert.q_attained, ">=", q)
    if q >= 1:
        res.check("q-th negative eigenvalue margin", cert.margin, ">", 0.0)
    res.values.update({"q": q, "q_attained": cert.q_attained, "margin": cert.margin})
    res.tables["counts"] = [
        {"theta_index": i, "point_index": j, "negative_count": c}
        for i, row in enumerate(cert.counts)
        for j, c in enumerate(row)
    ]
    return res


def run_kernel_identities(ctx):
    from .barrier import interpolated_section, probes_near_M
    from .forms import bochner_martinelli, kernel_identity_residuals

    M = ctx.M
    B = ctx.barrier()
    probes = probes_near_M(B, ctx.rng, ctx.params["probes"])
    sections = {
        "bochner-martinelli": lambda: bochner_martinelli(M.n),
        "p-over-phi": B.section,
        "interpolated": lambda: interpolated_section(B),
    }
    res = SuiteResult()
    rows = []
    for name in ctx.params["sections"]:
        if name not in sections:
            raise ConfigInvalid(f"unknown section {name!r}", "params.sections")
        r = kernel_identity_residuals(sections[name](), probes)
        for ident, v in r.items():
            rows.append({"section": name, "identity": ident, "residual": v})
            tol = ctx.tol["leray"] if ident == "leray" else ctx.tol["identity"]
            res.check(f"{name}: {ident}", v, "<", tol)
    res.tables["identities"] = rows
    res.values["probes"] = len(probes.t)
    return res


def run_barrier(ctx):
    from .barrier import verify_barrier, verify_re_phi_taylor

    p = ctx.params
    B = ctx.barrier()
    rep = verify_barrier(B, tuple(p["eps_range"]), p["samples"], seed=ctx.seed, radius=p["radius"], floor=p["floor"])
    res = SuiteResult()
    res.check("min |Phi| / (rho + |zeta - z|^2)", rep.min_ratio, ">", p["floor"])
    M = B.M
    z = M.sample_points(ctx.rng, 1, 0.2)[0]
    d = ctx.rng.normal(size=M.n) + 1j * ctx.rng.normal(size=M.n)
    hs = p["taylor_h"]
    slope, resid = verify_re_phi_taylor(B, z, d, hs)
    if np.max(resid) < ctx.tol["taylor_exact"]:
        # the quadratic model is exact (flat model): nothing to fit
        res.check("Re Phi model exact", float(np.max(resid)), "<", ctx.tol["taylor_exact"])
    else:
        res.check("Re Phi Taylor slope", slope, "in", [3.0 - ctx.tol["slope"], 3.0 + ctx.tol["slope"]])
    res.values.update(
        {
            "min_ratio": rep.min_ratio,
            "witness_zeta": rep.witness[0],
            "witness_z": rep.witness[1],
            "taylor_slope": slope,
            "taylor_point": z,
            "taylor_direction": d,
        }
    )
    res.tables["taylor"] = [{"h": h, "residual": r} for h, r in zip(hs, resid)]
    return res


def run_h_vanishing(ctx):
    from .barrier import check_h_vanishing, probes_near_M

    B = ctx.barrier()
    q = B.q
    if q < 1:
        raise ConfigInvalid("h-vanishing needs a q-pseudoconcave manifold with q >= 1", "manifold.q")
    probes = probes_near_M(B, ctx.rng, ctx.params["probes"], dist=tuple(ctx.params["distance"]))
    res = SuiteResult()
    rows = []
    for r in range(1, min(q, B.n - 1) + 1):
        a, rel = check_h_vanishing(B, r, probes)
        rows.append({"r": r, "max_abs": a, "max_scaled": rel})
        if r < q:
            res.check(f"r={r} kernel vanishes", a, "<", ctx.tol["vanishing"])
            res.check(f"r={r} kernel vanishes (|Phi|^n scaled)", rel, "<", ctx.tol["vanishing"], gated=False)
        else:
            res.check(f"r={r} control kernel nonzero", a, ">", ctx.tol["control"])
    res.tables["kernel"] = rows
    return res


def run_homotopy_residual(ctx):
    from .barrier import Barrier
    from .homotopy import GridSpec, TestFormLibrary, homotopy_residual

    p = ctx.params
    M = ctx.M
    B = Barrier(M, ctx.q)
    a = p["support"]
    lib = TestFormLibrary(M.graph, a=a)
    g = lib.form(p["form"])
    zs = lib.sample_points(ctx.rng, p["samples"])
    ladder = [
        (e, GridSpec(n_y=N, n_r=N, n_phase=p["n_phase"], n_simplex=p["n_simplex"], y_extent=2 * a, r_extent=2 * a, seed=ctx.seed))
        for e, N in zip(ctx.config.epsilon_ladder, ctx.config.grid)
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run = homotopy_residual(B, g, ladder, zs, manifold=M.name)
    res = SuiteResult()
    res.flag("residual non-increasing over the ladder", run.non_increasing(), run.residuals())
    res.check("finest relative residual", run.residuals()[-1], "<", ctx.tol["finest"])
    res.tables["ladder"] = [
        {"epsilon": row["epsilon"], "grid": N, "nodes": row["nodes"], "residual": row["residual"], "seconds": row["seconds"]}
        for row, N in zip(run.rows, ctx.config.grid)
    ]
    res.values["samples"] = zs
    return res


BM_FUNCTIONS = {
    "1": lambda z: np.ones(len(z), complex),
    "z1": lambda z: z[:, 0],
    "z1z2": lambda z: z[:, 0] * z[:, 1],
}


def run_bm(ctx):
    from .homotopy import bm_reproduce

    p = ctx.params
    z = np.array([complex(*c) if isinstance(c, list) else complex(c) for c in p["point"]])
    grid = ctx.config.grid
    res = SuiteResult()
    rows = []
    for name, f in BM_FUNCTIONS.items():
        exact = complex(f(z[None])[0])
        errs = []
        for N in grid:
            v = bm_reproduce(f, p["radius"], z, N)
            e = abs(v - exact) / abs(exact) if abs(exact) > 0 else abs(v - exact)
            errs.append(e)
            k = max(2, int(round(N ** (1.0 / 3.0))))
            rows.append({"function": name, "nodes_requested": N, "nodes": k**3, "value_re": v.real, "value_im": v.imag, "error": e})
        res.check(f"f={name} reproduced at {grid[0]} nodes", errs[0], "<", ctx.tol["accuracy"])
        for i in range(len(grid) - 1):
            if errs[i] <= ctx.tol["exact"]:
                res.check(f"f={name} exact at {grid[i]} nodes", errs[i + 1], "<=", ctx.tol["exact"])
                continue
            ratio = errs[i + 1] / errs[i]
            expected = math.sqrt(grid[i] / grid[i + 1])
            s = ctx.tol["rate"]
            res.check(f"f={name} error ratio {grid[i]}->{grid[i + 1]}", ratio, "in", [expected * (1 - s), expected * (1 + s)])
    res.tables["reproduction"] = rows
    return res


def run_model_integrals(ctx):
    from .homotopy import model_integrals

    p = ctx.params
    res = SuiteResult()
    rows = []
    branches = set()
    i2 = [tuple(c) for c in p["i2_cases"]]
    for k, h in p["cases"]:
        d = p["delta"]
        rep = model_integrals(k, h, ctx.config.epsilon_ladder, delta=d, n=p["n"], m=p["m"], i2_deltas=[d, d / 2] if (k, h) in i2 else None)
        branches.add(rep.branch)
        res.check(f"I1{{{k},{h}}} exponent (branch {rep.branch})", rep.slope_log_corrected, "in", [rep.predicted - ctx.tol["exponent"], rep.predicted + ctx.tol["exponent"]])
        if (k, h) in i2:
            res.check(f"I2{{{k},{h}}} * delta stable under halving", rep.I2_delta_ratio, "<=", ctx.tol["i2_factor"])
        rows.append(
            {
                "k": k, "h": h, "branch": rep.branch, "predicted": rep.predicted, "raw_slope": rep.slope,
                "fitted": rep.slope_log_corrected, "log_power": rep.log_power_fit,
                "I2_delta_ratio": rep.I2_delta_ratio if (k, h) in i2 else "",
            }
        )
    res.check("I1 branches covered", len(branches), ">=", 4)
    res.tables["exponents"] = rows
    return res


def run_invert_map(ctx):
    from .perturb import PerturbationMap, inverse_after_forward, invert_near_identity

    p = ctx.params
    res = SuiteResult()
    rows = []
    worst, worst_left, env_ok = 0.0, 0.0, True
    for n in p["dims"]:
        for i in range(p["count"]):
            f = PerturbationMap.random(n, ctx.rng, degree=p["degree"]).normalized(p["norm"])
            G = invert_near_identity(f, tol=ctx.tol["inverse"] * 0.1)
            r = G.report
            left = inverse_after_forward(G)
            worst, worst_left = max(worst, r.residual), max(worst_left, left)
            env_ok &= r.envelope_ok
            rows.append({"n": n, "index": i, "eps": r.eps, "iterations": r.iterations, "residual": r.residual, "inverse_after_forward": left, "envelope_ok": r.envelope_ok})
    res.check("sup |F(G(z)) - z|", worst, "<", ctx.tol["inverse"])
    res.check("sup |G(F(z)) - z|", worst_left, "<", 3 * ctx.tol["inverse"])
    res.flag("increments within (2n)^l eps^(l+1)", env_ok)
    res.tables["inversions"] = rows
    return res


def _perturbation(ctx, n):
    from .perturb import PerturbationMap

    if ctx.config.perturbation is not None:
        g = PerturbationMap.from_dict(ctx.config.perturbation)
        if g.n != n:
            raise ConfigInvalid(f"perturbation has n={g.n}, manifold has n={n}", "perturbation.n")
        return g
    return PerturbationMap.random(n, ctx.rng, degree=2).normalized(ctx.params["norm"])


def _ratio_checks(res, label, scales, values, tol):
    for i in range(len(scales) - 1):
        expected = scales[i] / scales[i + 1]
        ratio = values[i] / values[i + 1] if values[i + 1] > 0 else float("inf")
        res.check(f"{label} {scales[i]}->{scales[i + 1]}", ratio, "in", [expected * (1 - tol), expected * (1 + tol)])


def run_graph_delta(ctx):
    from .homotopy import TestFormLibrary
    from .perturb import PerturbationMap, compare_dbar_transport, graph_delta

    p = ctx.params
    M0 = ctx.M
    g = _perturbation(ctx, M0.n)
    scales = p["scales"]
    res = SuiteResult()
    rows = []
    lib = TestFormLibrary(M0.graph, a=p["support"])
    h = lib.form(p["form"])
    d0s, tr = [], []
    for s in scales:
        gs = g.scaled(s)
        M = gs.compose_system(M0)
        dn = graph_delta(M0, gs, k=1, per_dim=p["per_dim"], M=M)
        t = compare_dbar_transport(h, M, M0, per_dim=p["transport_per_dim"])
        d0s.append(dn["delta_norms"][0])
        tr.append(t["c1"])
        rows.append({"scale": s, "delta_c0": dn["delta_norms"][0], "delta_c1": dn["delta_norms"][1], "g_c0": dn["g_norms"][0], "transport_c1": t["c1"]})
    _ratio_checks(res, "|phi - phi0|_0 linear response", scales, d0s, ctx.tol["linear"])
    _ratio_checks(res, "dbar transport linear response", scales, tr, ctx.tol["transport"])
    c = p["shift"]
    shift = [0.0] * M0.n
    shift[0] = c
    dn = graph_delta(M0, PerturbationMap.constant(shift), k=1, per_dim=p["per_dim"])
    res.check("constant shift: |phi - phi0|_0 - |delta|", abs(dn["delta_norms"][0] - abs(c)), "<", ctx.tol["shift"])
    res.check("constant shift: |phi - phi0|_1", dn["delta_norms"][1], "<", ctx.tol["shift"])
    z = graph_delta(M0, PerturbationMap.zero(M0.n), k=1, per_dim=p["per_dim"])
    res.check("g = 0: |phi - phi0|_1", max(z["delta_norms"]), "<", ctx.tol["shift"])
    res.tables["response"] = rows
    return res


def run_discrete_algebra(ctx):
    from . import discrete as D

    p = ctx.params
    rng = ctx.rng
    res = SuiteResult()
    n = p["size"]
    rows = []
    ok_chain = True
    for i in range(p["matrices"]):
        # A = S J S^-1 with J = nilpotent Jordan blocks (+ identity): A is
        # I minus a low-rank matrix and Ker(A^j) is known from the blocks
        blocks = list(rng.integers(1, 4, size=rng.integers(1, 4)))
        k = sum(blocks)
        Jm = np.eye(n, dtype=complex)
        pos = 0
        for b in blocks:
            Jm[pos : pos + b, pos : pos + b] = np.diag(np.ones(b - 1), 1)
            pos += b
        S = np.eye(n) + 0.3 * (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))) / np.sqrt(n)
        A = S @ Jm @ np.linalg.inv(S)
        oracle = [sum(min(j, b) for b in blocks) for j in range(1, p["max_power"] + 1)]
        brute = [n - np.linalg.matrix_rank(np.linalg.matrix_power(A, j), tol=1e-8 * np.linalg.norm(A, 2) ** j) for j in range(1, p["max_power"] + 1)]
        got = D.kernel_chain(A, p["max_power"])
        same = got["dims"] == oracle == brute and got["stabilized_at"] == max(blocks)
        ok_chain &= same
        rows.append({"index": i, "rank_H": k, "blocks": " ".join(map(str, blocks)), "dims": " ".join(map(str, got["dims"])), "oracle": " ".join(map(str, oracle)), "stabilized_at": got["stabilized_at"], "match": same})
    res.flag("kernel chains match the oracle", ok_chain)
    res.tables["kernel_chains"] = rows

    nrows = []
    worst, wrong = 0.0, 0
    for i in range(p["neumann_trials"]):
        # alternate contractions below and above the 1/4 gate; C = I so
        # |I - CF| is exactly the sup norm of the perturbation
        q = float(rng.uniform(0.02, 0.24)) if i % 2 == 0 else float(rng.uniform(0.26, 0.6))
        E = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        E *= q / D.sup_norm(E)
        F = np.eye(n) + E
        try:
            Dop = D.neumann_invert(F, np.eye(n))
        except ContractionViolated:
            wrong += q < 0.25
            nrows.append({"trial": i, "contraction": q, "outcome": "rejected", "residual": ""})
            continue
        wrong += q >= 0.25
        r = D.sup_norm(Dop.matrix @ F - np.eye(n))
        worst = max(worst, r)
        nrows.append({"trial": i, "contraction": q, "outcome": "inverted", "residual": r})
    res.check("Neumann |DF - I|", worst, "<", ctx.tol["neumann"])
    res.check("trials accepted or rejected against the 1/4 gate wrongly", wrong, "==", 0)
    res.tables["neumann"] = nrows

    arows = []
    for pert in (0.0, p["toy_perturbation"]):
        c = D.toy_chain(pert, seed=ctx.seed)
        F = c["dbar0"] @ c["P_r"] + c["P_r1"] @ c["dbar1"]
        Dop = D.neumann_invert(F, np.eye(3))
        Q = D.assemble_Q(c["P_r"], c["P_r1"], c["dbar0"], Dop)
        closed = D.chain_residual(*Q, c["dbar0"], c["dbar1"], "closed")
        full = D.chain_residual(*Q, c["dbar0"], c["dbar1"], "full")
        res.check(f"toy chain (perturbation {pert}) identity on closed forms", closed, "<", ctx.tol["assemble"])
        arows.append({"perturbation": pert, "contraction": D.sup_norm(np.eye(3) - F), "closed_residual": closed, "full_residual": full})
    res.tables["assemble"] = arows
    return res


def run_operator_drift(ctx):
    from .barrier import Barrier
    from .homotopy import GridSpec, TestFormLibrary
    from .perturb import operator_drift

    p = ctx.params
    M0 = ctx.M
    q = ctx.q
    B0 = Barrier(M0, q)
    g = _perturbation(ctx, M0.n)
    a = p["support"]
    spec = GridSpec(n_y=p["grid"], n_r=p["grid"], n_phase=p["n_phase"], n_simplex=p["n_simplex"], y_extent=2 * a, r_extent=2 * a, seed=ctx.seed)
    nW = M0.n - M0.m
    W = np.zeros((2, nW), complex)
    W[0, 0] = 0.2 * a
    W[1, min(1, nW - 1)] = 0.2j * a
    params = (np.zeros((2, M0.m)), W)
    forms = {1: "bump_dzbar2", 2: "bump_pair"}
    res = SuiteResult()
    rows = []
    for r in p["degrees"]:
        if r not in forms or r > M0.n - M0.m - 1:
            raise ConfigInvalid(f"degree {r} not available", "params.degrees")
        drifts = []
        for s in p["scales"]:
            M = g.scaled(s).compose_system(M0)
            B = Barrier(M, q)
            lib = TestFormLibrary(fit_graph(M), a=a)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                d = operator_drift(B0, B, [lib.form(forms[r])], r, p["eps"], spec, params)
            drifts.append(d["drift"])
            rows.append({"r": r, "scale": s, "drift": d["drift"], "H_size": d["H_size"]})
            if r < q:
                res.check(f"r={r} < q: H vanishes (scale {s})", d["H_size"], "<", ctx.tol["vanishing"])
        if r >= q:
            ok = all(b <= a_ * (1 + 1e-12) for a_, b in zip(drifts, drifts[1:]))
            res.flag(f"r={r} drift non-increasing as |g| shrinks", ok, drifts)
        else:
            res.check(f"r={r} < q: drift", max(drifts), "<", ctx.tol["vanishing"])
    res.tables["drift"] = rows
    return res


SUITES = {
    "pseudoconcavity": SuiteSpec(
        run_pseudoconcavity,
        ["directional Levi form has at least q negative eigenvalues in every normal direction"],
        manifold="sig22",
        params={"samples": 64},
    ),
    "kernel-identities": SuiteSpec(
        run_kernel_identities,
        [
            "Leray condition sum eta_k (zeta_k - z_k) = 1",
            "closedness of omega'(eta) in (zetabar, zbar, t)",
            "graded identity d_t w_r + dbar_zeta w_r + dbar_z w_(r-1) = 0",
            "decomposition of omega'(eta) into parts of order r in dzbar",
        ],
        manifold="hyperquadric",
        params={"probes": 1000, "sections": ["interpolated"]},
        tolerances={"identity": 1e-8, "leray": 1e-10},
    ),
    "barrier": SuiteSpec(
        run_barrier,
        ["strong barrier inequality |Phi| >= c (rho + |zeta - z|^2)", "third-order Taylor estimate for Re Phi"],
        manifold="sig22",
        params={"samples": 10000, "eps_range": [1e-3, 1e-1], "radius": 0.3, "floor": 1e-3, "taylor_h": [float(h) for h in np.logspace(-1, -4, 7)]},
        tolerances={"slope": 0.2, "taylor_exact": 1e-14},
    ),
    "h-vanishing": SuiteSpec(
        run_h_vanishing,
        ["vanishing of omega'_r(P/Phi) ^ omega(zeta) for r < q"],
        manifold="sig22",
        params={"probes": 200, "distance": [0.2, 0.6]},
        tolerances={"vanishing": 1e-10, "control": 1e-4},
    ),
    "homotopy-residual": SuiteSpec(
        run_homotopy_residual,
        ["local homotopy formula g = dbar_M R_1 g + R_2 dbar_M g + H_1 g as eps -> 0"],
        manifold="sig22",
        epsilon_ladder=[0.03, 0.01, 0.003],
        grid=[12, 16, 20],
        params={"samples": 2, "form": "bump_dzbar2", "support": 0.25, "n_phase": 3, "n_simplex": 2},
        tolerances={"finest": 0.1},
        min_rungs=3,
        grid_matches_ladder=True,
    ),
    "bm": SuiteSpec(
        run_bm,
        ["Bochner-Martinelli reproducing formula on the sphere in C^2"],
        grid=[2304, 9216],
        params={"radius": 1.0, "point": [0.3, 0.1]},
        tolerances={"accuracy": 1e-2, "rate": 0.3, "exact": 1e-12},
        min_grid=2,
    ),
    "model-integrals": SuiteSpec(
        run_model_integrals,
        ["case table for the eps-behaviour of the model integrals I_1 and boundedness of I_2 * delta"],
        epsilon_ladder=[1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
        params={"cases": [[3, 1], [2, 0], [0, 3], [1, 1]], "i2_cases": [[1, 1], [2, 0]], "delta": 0.5, "n": 2, "m": 1},
        tolerances={"exponent": 0.15, "i2_factor": 2.0},
        min_rungs=3,
    ),
    "invert-map": SuiteSpec(
        run_invert_map,
        ["fixed-point inversion of z + f(z) with |f|_(1,1) < 1/(4n)", "increment envelope (2n)^l eps^(l+1)"],
        params={"dims": [2, 3, 5], "count": 10, "norm": 0.01, "degree": 3},
        tolerances={"inverse": 1e-12},
    ),
    "graph-delta": SuiteSpec(
        run_graph_delta,
        ["graph refit |phi - phi0| controlled linearly by |g|", "dbar_M0 E - E dbar_M controlled by |phi - phi0|"],
        manifold="hyperquadric",
        params={"scales": [1.0, 0.5, 0.25], "norm": 0.01, "shift": 0.01, "per_dim": 9, "transport_per_dim": 5, "support": 0.3, "form": "bump_dzbar2"},
        tolerances={"linear": 0.1, "transport": 0.2, "shift": 1e-12},
    ),
    "discrete-algebra": SuiteSpec(
        run_discrete_algebra,
        ["stabilization of Ker(A^j) for A = I - (finite rank)", "Neumann inverse under |I - CF| < 1/4", "assembled pair (Q_r, Q_(r+1)) is a homotopy"],
        params={"matrices": 20, "size": 12, "max_power": 8, "neumann_trials": 10, "toy_perturbation": 0.025},
        tolerances={"neumann": 1e-10, "assemble": 1e-8},
    ),
    "operator-drift": SuiteSpec(
        run_operator_drift,
        ["E_M0 H_M0 E_M - H_M shrinks with |g|", "H_r vanishes for r < q"],
        manifold="sig22",
        params={"scales": [1.0, 0.5, 0.25], "norm": 0.01, "degrees": [1, 2], "eps": 0.03, "grid": 8, "n_phase": 3, "n_simplex": 2, "support": 0.25},
        tolerances={"vanishing": 1e-8},
    ),
}


# ---------------------------------------------------------------------------
# reports


def _plain(x):
    """JSON-ready copy: numpy scalars and arrays to lists, complex to
    ``[re, im]``, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [_plain(float(x.real)), _plain(float(x.imag))]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


VOLATILE = ("seconds",)


def execute(config):
    """Run the suite of ``config``; returns ``(SuiteResult, seconds)``."""
    ctx = Context(config)
    t0 = time.perf_counter()
    result = SUITES[config.suite].runner(ctx)
    return result, time.perf_counter() - t0


def build_report(config, result):
    spec = SUITES[config.suite]
    tables = {
        name: [{k: v for k, v in row.items() if k not in VOLATILE} for row in rows] for name, rows in result.tables.items()
    }
    return _plain(
        {
            "suite": config.suite,
            "version": __version__,
            "config_hash": config.config_hash(),
            "config": config.resolved(),
            "anchors": spec.anchors,
            "passed": result.passed,
            "criteria": [c.to_dict() for c in result.criteria],
            "values": result.values,
            "tables": tables,
        }
    )


def report_json(report):
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def new_run_dir(out, suite):
    """``out/<suite>/<UTC timestamp>``, never reusing an existing directory."""
    base = Path(out) / suite
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = base / stamp
    i = 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path = base / f"{stamp}-{i}"
            i += 1


def write_csv(path, rows):
    if not rows:
        return
    header = list(rows[0])
    for row in rows[1:]:
        header += [k for k in row if k not in header]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: _csv_cell(v) for k, v in row.items()})


def _csv_cell(v):
    v = _plain(v)
    if isinstance(v, list):
        return json.dumps(v)
    return v


def run_suite(config):
    """Execute, then write ``report.json``, the tables and ``timings.csv``.

    Returns ``(exit_status, run_dir, report)``; the status is 0 iff every
    gated criterion passed.
    """
    result, secs = execute(config)
    report = build_report(config, result)
    run_dir = new_run_dir(config.out, config.suite)
    (run_dir / "report.json").write_text(report_json(report), encoding="utf-8")
    for name, rows in result.tables.items():
        write_csv(run_dir / f"{name}.csv", rows)
    write_csv(run_dir / "criteria.csv", [c.to_dict() for c in result.criteria])
    write_csv(run_dir / "timings.csv", [{"suite": config.suite, "seconds": secs, "threads": os.environ.get("CRLAB_THREADS", "1")}])
    return (0 if result.passed else 1), run_dir, report
