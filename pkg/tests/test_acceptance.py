"""Acceptance criteria 1-10.

Every criterion runs the corresponding suite exactly as the command line
does and prints one ``CRITERION k PASS|FAIL`` line; the lines are repeated
in the terminal summary.  Tolerances are the suite defaults.
"""

import time

from conftest import ACCEPTANCE
from crlab.suites import load_config, run_suite


def _run(suite, out, **overrides):
    cfg = load_config(suite, overrides={"out": str(out)})
    for k, v in overrides.items():
        if k == "manifold":
            cfg = load_config(suite, _manifold_config(out, v), {"out": str(out)})
        elif k == "params":
            cfg.params.update(v)
    t0 = time.perf_counter()
    status, run_dir, report = run_suite(cfg)
    return report, time.perf_counter() - t0, run_dir


def _manifold_config(out, name):
    import json

    p = out / f"{name}.cfg.json"
    p.write_text(json.dumps({"manifold": name}))
    return str(p)


def _summary(report):
    gated = [c for c in report["criteria"] if c["gated"]]
    bad = [c for c in gated if not c["passed"]]
    if not bad:
        return f"{len(gated)}/{len(gated)} gated checks"
    return "; ".join(f"{c['name']}: {c['value']} not {c['relation']} {c['threshold']}" for c in bad)


def _value(report, prefix):
    return next(c["value"] for c in report["criteria"] if c["name"].startswith(prefix))


def _record(k, ok, title, detail):
    line = f"CRITERION {k:2d} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE[k] = line
    print(line)
    assert ok, line


def test_criterion_01_kernel_identities(tmp_path):
    details, ok, total = [], True, 0.0
    for name in ("flat", "hyperquadric", "sig22", "codim2"):
        rep, secs, _ = _run("kernel-identities", tmp_path, manifold=name)
        total += secs
        ok &= rep["passed"]
        worst = max(v for c in rep["criteria"] if c["gated"] for v in [c["value"]] if isinstance(v, float))
        details.append(f"{name} {worst:.1e}")
    ok &= total < 30
    _record(1, ok, "kernel identities < 1e-8 at 1000 probes", ", ".join(details) + f"; {total:.1f} s (< 30 s)")


def test_criterion_02_h_vanishing(tmp_path):
    rep, _, _ = _run("h-vanishing", tmp_path)
    _record(2, rep["passed"], "H kernel r=1 on sig22 < 1e-10, r=2 control > 1e-4", _summary(rep))


def test_criterion_03_barrier(tmp_path):
    ok, details = True, []
    for name in ("hyperquadric", "sig22"):
        rep, _, _ = _run("barrier", tmp_path, manifold=name)
        ok &= rep["passed"]
        ratio, slope = _value(rep, "min |Phi|"), _value(rep, "Re Phi Taylor slope")
        details.append(f"{name} min ratio {ratio:.3f}, slope {slope:.3f}")
    _record(3, ok, "barrier ratio > 0 and Re Phi slope 3 +- 0.2", "; ".join(details))


def test_criterion_04_bm(tmp_path):
    rep, _, _ = _run("bm", tmp_path)
    _record(4, rep["passed"], "BM reproduction within 1e-2, halving rate within 30%", _summary(rep))


def test_criterion_05_homotopy_residual(tmp_path):
    rep, secs, _ = _run("homotopy-residual", tmp_path)
    res = _value(rep, "residual non-increasing")
    ok = rep["passed"] and secs < 1800
    _record(5, ok, "homotopy residual non-increasing, finest < 0.1", f"{[round(r, 4) for r in res]}; {secs:.0f} s (< 1800 s)")


def test_criterion_06_model_integrals(tmp_path):
    rep, _, _ = _run("model-integrals", tmp_path)
    _record(6, rep["passed"], "model integral exponents within 0.15, I2 delta stable", _summary(rep))


def test_criterion_07_invert_map(tmp_path):
    rep, _, _ = _run("invert-map", tmp_path)
    _record(7, rep["passed"], "sup|F(G(z)) - z| < 1e-12 within the envelope", _summary(rep))


def test_criterion_08_graph_delta(tmp_path):
    rep, _, _ = _run("graph-delta", tmp_path)
    _record(8, rep["passed"], "graph refit linear within 10%, shift exact", _summary(rep))


def test_criterion_09_discrete_algebra(tmp_path):
    rep, _, _ = _run("discrete-algebra", tmp_path)
    _record(9, rep["passed"], "kernel chains, Neumann gate, assembled identity", _summary(rep))


def test_criterion_10_determinism(tmp_path):
    same, dirs = [], set()
    for suite in ("invert-map", "discrete-algebra", "bm", "model-integrals", "pseudoconcavity"):
        blobs = []
        for _ in range(2):
            rep, _, d = _run(suite, tmp_path)
            blobs.append((d / "report.json").read_bytes())
            dirs.add(d)
        same.append(blobs[0] == blobs[1])
    ok = all(same) and len(dirs) == 10
    _record(10, ok, "byte-identical report.json on re-run", f"{sum(same)}/{len(same)} suites identical; {len(dirs)} distinct run directories")
