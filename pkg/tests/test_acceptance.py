"""Acceptance criteria 1-10, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Criteria 8 and 9 share one full-scale pipeline run (about five minutes on one CPU).
"""
from __future__ import annotations

import csv
import filecmp
import itertools
import shutil
import sys
import tempfile
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bundlenet import harness as hz
from bundlenet import autodiff as ad
from bundlenet.eta_strategies import NULL, SERIOUS, EtaConfig, EtaState, Gates, long_term_gate, update_eta
from bundlenet.master_problem import kkt_residual, solve_dmp
from bundlenet.oracles import (GapParams, McndParams, gap_evaluate, gap_percent, generate_gap, generate_mcnd,
                               make_min_oracle, mcnd_evaluate, random_multipliers)
from bundlenet.solvers import SolverConfig, run_bundle

from conftest import (brute_gap_lr, brute_mcnd_lr, dmp_support_oracle, lp_simplex_projection,
                      pipeline_fd_errors, random_micro_gap, random_micro_mcnd, simplex_grid)


def _timed(fn):
    def wrapper():
        t0 = time.perf_counter()
        ok, detail = fn()
        return ok, f"{detail}; {time.perf_counter() - t0:.1f}s"
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# 1-3: oracles and the master problem


@_timed
def criterion_1():
    """Oracle exactness on 1000 micro-instances per family."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad_int = bad_cont = bad_gap = 0
    worst_cont = 0.0
    for _ in range(1000):
        inst = random_micro_mcnd(rng, integer=True)
        pi = rng.integers(-10, 11, size=inst.dimension).astype(float)
        bad_int += mcnd_evaluate(inst, pi).raw_lr_value != brute_mcnd_lr(inst, pi)
    for _ in range(1000):
        inst = random_micro_mcnd(rng, integer=False)
        pi = rng.uniform(-10, 10, size=inst.dimension)
        err = abs(mcnd_evaluate(inst, pi).raw_lr_value - brute_mcnd_lr(inst, pi))
        worst_cont = max(worst_cont, err)
        bad_cont += err > 1e-9
    for _ in range(1000):
        inst = random_micro_gap(rng)
        pi = rng.integers(0, 15, size=inst.dimension).astype(float)
        bad_gap += gap_evaluate(inst, pi).raw_lr_value != brute_gap_lr(inst, pi)
    elapsed = time.perf_counter() - t0
    ok = bad_int == bad_cont == bad_gap == 0 and elapsed < 30
    return ok, (f"mismatches mcnd-int {bad_int}/1000, mcnd-cont {bad_cont}/1000 "
                f"(max err {worst_cont:.1e}), gap {bad_gap}/1000")


@_timed
def criterion_2():
    """DMP objective within 1e-6 of the exact oracle and KKT residual <= 1e-10 on 500 bundles."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_obj = worst_res = 0.0
    grid_violations = 0
    grids = {n: simplex_grid(n, 0.05) for n in range(1, 5)}
    for _ in range(500):
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        G = rng.normal(0, 1, (n, d))
        alpha = np.abs(rng.normal(0, 1, n))
        alpha[int(rng.integers(n))] = 0.0
        eta = 10.0 ** rng.uniform(-2, 2)
        sol = solve_dmp(G, alpha, eta)
        Q = eta * G @ G.T
        obj = 0.5 * sol.theta @ Q @ sol.theta + alpha @ sol.theta
        worst_obj = max(worst_obj, abs(obj - dmp_support_oracle(G, alpha, eta)))
        worst_res = max(worst_res, kkt_residual(sol.theta, Q @ sol.theta + alpha))
        P = grids[n]
        grid_best = float(np.min(0.5 * np.einsum("ij,jk,ik->i", P, Q, P) + P @ alpha))
        grid_violations += obj > grid_best + 1e-12
    elapsed = time.perf_counter() - t0
    ok = worst_obj <= 1e-6 and worst_res <= 1e-10 and grid_violations == 0 and elapsed < 60
    return ok, (f"max |obj - exact| {worst_obj:.1e}, max KKT residual {worst_res:.1e}, "
                f"worse than 0.05-grid {grid_violations}/500")


@_timed
def criterion_3():
    """Subgradient inequality on 1000 (pi, pi') pairs per family."""
    rng = np.random.default_rng(303)
    worst = {}
    for fam in ("mcnd", "gap"):
        worst[fam] = -np.inf
        for i in range(1000):
            if fam == "mcnd":
                inst = generate_mcnd(McndParams(nodes=8, arcs=20, commodities=6), i) if i % 10 == 0 \
                    else random_micro_mcnd(rng, integer=False)
                ev = lambda p: mcnd_evaluate(inst, p)
            else:
                inst = generate_gap(GapParams(items=12, bins=3), i) if i % 10 == 0 else random_micro_gap(rng)
                ev = lambda p: gap_evaluate(inst, p)
            signed = fam == "gap"
            p, q = (random_multipliers(rng, inst.dimension, signed) for _ in range(2))
            a, b = ev(p), ev(q)
            lr_p, lr_q = a.raw_lr_value, b.raw_lr_value
            g = -a.subgradient if fam == "mcnd" else a.subgradient   # subgradient of LR itself
            lin = lr_p + g @ (q - p)
            # LR is concave for MCND (lies below its tangents) and convex for GAP (above)
            viol = (lr_q - lin) if fam == "mcnd" else (lin - lr_q)
            worst[fam] = max(worst[fam], viol / (1 + abs(lr_q)))
    ok = all(v <= 1e-9 for v in worst.values())
    return ok, f"max scaled violation mcnd {worst['mcnd']:.1e}, gap {worst['gap']:.1e}"


# ---------------------------------------------------------------------------
# 4-5: the bundle method and eta strategies


@_timed
def criterion_4():
    """Constant-eta bundle reaches 1% gap within 200 iterations on >= 18/20 MCND-small instances."""
    t0 = time.perf_counter()
    cfg = hz.merge_config(hz.DEFAULT_CONFIG, {})
    oracles = [make_min_oracle(generate_mcnd(McndParams(), 1000 + i)) for i in range(20)]
    refs = [hz.reference_bound(o, cfg) for o in oracles]
    results = {}
    monotone = True
    for eta0 in hz.ETA_GRID:
        hits = 0
        for o, ref in zip(oracles, refs):
            tr = run_bundle(o, np.zeros(o.dimension),
                            SolverConfig(max_iter=200, eta=EtaConfig(kind="constant", eta0=eta0),
                                         record_times=False))
            c = tr.center_values()
            monotone &= bool(np.all(np.diff(c) <= 0))
            best = max(r.raw_lr for r in tr.rows)
            hits += gap_percent(ref, best, "max") <= 1.0
        results[eta0] = hits
    eta_best = max(results, key=results.get)
    elapsed = time.perf_counter() - t0
    ok = results[eta_best] >= 18 and monotone and elapsed < 300
    grid = ", ".join(f"{k:g}:{v}" for k, v in results.items())
    return ok, f"best eta {eta_best:g} hits {results[eta_best]}/20 (grid {grid}); centers monotone {monotone}"


def _gate_expectation(kind, outcome, small, quad_small, lin_small):
    """Expected gates written out independently of the implementation."""
    if kind == "soft":
        return Gates(True, not (outcome == NULL and small), False)
    if kind == "hard":
        return Gates(True, True, small)
    inc = not (outcome == SERIOUS and quad_small)
    dec = not lin_small
    return Gates(inc, dec, False)


@_timed
def criterion_5():
    """Exhaustive gate truth table and a bitwise-constant eta trace."""
    m = 0.01
    cases = failures = 0
    for kind, outcome, small, quad_small, lin_small in itertools.product(
            ("soft", "hard", "balancing"), (SERIOUS, NULL), (True, False), (True, False), (True, False)):
        v_star = 0.5 if small else 2.0            # eps_star = 100 so m * eps_star = 1
        quad, lin = (0.001, 1.0) if quad_small else (1.0, 0.001)
        if kind == "balancing":
            # quad <= m lin and m quad >= lin cannot both hold, so pick each side separately
            quad, lin = (1e-3, 1.0) if quad_small else ((1000.0, 1.0) if lin_small else (1.0, 1.0))
            if quad_small and lin_small:
                continue
        g = long_term_gate(kind, v_star, 100.0, quad, lin, m, outcome)
        exp = _gate_expectation(kind, outcome, small, quad <= m * lin, m * quad >= lin)
        cases += 1
        failures += g != exp
        # the gates drive the update once the consecutive-step counter is satisfied
        cfg = EtaConfig(kind=kind, eta0=1.0, min_consec_ss=1, min_consec_ns=1)
        new = update_eta(EtaState(1.0), cfg, outcome, g).eta
        if exp.force_increase or (outcome == SERIOUS and exp.allow_increase):
            want = 1.1
        elif outcome == NULL and exp.allow_decrease:
            want = 0.9
        else:
            want = 1.0
        failures += new != want
    cases += 1
    failures += long_term_gate("constant", 0.5, 100.0, 1.0, 1.0, m, NULL) != Gates(False, False, False)

    o = make_min_oracle(generate_mcnd(McndParams(), 7))
    tr = run_bundle(o, np.zeros(o.dimension),
                    SolverConfig(max_iter=60, eta=EtaConfig(kind="constant", eta0=370.0), record_times=False))
    etas = np.array([r.eta for r in tr.rows])
    constant = bool(np.all(etas.view(np.int64) == np.float64(370.0).view(np.int64)))
    steps = {r.step for r in tr.rows}
    ok = failures == 0 and constant
    return ok, f"{cases} gate cases, {failures} failures; constant trace bitwise {constant} over steps {sorted(steps)}"


# ---------------------------------------------------------------------------
# 6-7: differentiation


@_timed
def criterion_6():
    """Finite-difference checks of every primitive, a composite network and sparsemax projection."""
    from test_autodiff import PRIMITIVES, away_from, fd_of, grad_of, stable_support

    worst = 0.0
    failures = 0

    def check(fn, *arrays):
        nonlocal worst, failures
        for an, nu in zip(grad_of(fn, *arrays), fd_of(fn, *arrays)):
            err = np.abs(an - nu)
            failures += int(np.sum(err > 1e-5 * np.abs(nu) + 1e-7))
            worst = max(worst, float(np.max(err / np.maximum(np.abs(nu), 1e-2), initial=0.0)))

    for name, (fn, arity) in sorted(PRIMITIVES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(10):
            n = int(rng.integers(1, 6))
            xs = [away_from(rng, n, [0.0] if name == "relu" else []) for _ in range(arity)]
            w = ad.constant(rng.normal(size=n))
            check(lambda *v: fn(*v, w), *xs)
    rng = np.random.default_rng(6)
    done = 0
    while done < 20:
        z = rng.normal(size=int(rng.integers(2, 6)))
        if stable_support(z):
            w = ad.constant(rng.normal(size=z.size))
            check(lambda a: ad.dot(ad.sparsemax(a), w), z)
            done += 1
    for _ in range(20):
        mu, sig, eps = rng.normal(size=(3, 4))
        w = ad.constant(rng.normal(size=4))
        check(lambda m_, s_: ad.dot(ad.gaussian_reparam(m_, s_, eps), w), mu, sig)
    # random composite network
    for _ in range(20):
        n = int(rng.integers(2, 5))
        A, x = rng.normal(size=(n, n)), rng.normal(size=n)
        if np.min(np.abs(A @ x)) < 1e-3:
            continue
        ks = ad.constant(rng.normal(size=n))

        def net(M, v):
            h = ad.relu(ad.matvec(M, v))
            th = ad.softmax(ad.mul(h, ks))
            return ad.mul(ad.softplus(ad.dot(th, ad.tanh(v))), ad.norm2(ad.sigmoid(v)))
        check(net, A, x)
    proj_err = 0.0
    for _ in range(1000):
        z = rng.normal(0, 3, size=int(rng.integers(1, 9)))
        proj_err = max(proj_err, float(np.max(np.abs(ad.sparsemax(ad.constant(z)).data
                                                     - lp_simplex_projection(z)))))
    ok = failures == 0 and proj_err <= 1e-8
    return ok, (f"{failures} entries outside 1e-5 relative, worst rel err {worst:.1e}; "
                f"sparsemax vs projection {proj_err:.1e}")


@_timed
def criterion_7():
    """Unrolled pipeline gradient against central differences, T=3."""
    t0 = time.perf_counter()
    errs = np.concatenate([pipeline_fd_errors(T=3, psi="softmax"), pipeline_fd_errors(T=3, psi="sparsemax")])
    elapsed = time.perf_counter() - t0
    ok = float(errs.max()) <= 1e-4 and elapsed < 120
    return ok, f"{errs.size} partial derivatives, max relative error {errs.max():.1e}"


# ---------------------------------------------------------------------------
# 8-10: the experiment pipeline

_PIPELINE: dict = {}


def _mean_gap(path: Path, budget: int) -> float:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["budget"]) == budget]
    return float(np.mean([float(r["gap_pct"]) for r in rows]))


def _full_pipeline() -> dict:
    """Generate, reference, grid-search, then train and evaluate up to three seeds."""
    if _PIPELINE:
        return _PIPELINE
    t0 = time.perf_counter()
    d = Path(tempfile.mkdtemp(prefix="bnet-acc-"))
    cfg = hz.merge_config(hz.DEFAULT_CONFIG, {"solver": {"record_times": False}})
    hz.cmd_generate(cfg, d)
    hz.cmd_reference(d, cfg)
    _, best = hz.cmd_gridsearch(d, cfg, "bundle-constant", (10,))
    baseline = float(best[0][3])
    seeds = []
    for seed in range(3):
        ck = d / f"ck{seed}.npz"
        _, hist = hz.cmd_train(d, cfg, ck, seed=seed)
        hz.cmd_evaluate(d, cfg, "learned", (10, 25, 50, 100), checkpoint=ck)
        res = d / f"results_learned_{seed}.csv"
        shutil.copy(d / "results_learned.csv", res)
        info = {"seed": seed, "first_loss": hist[0].mean_loss, "last_loss": hist[-1].mean_loss,
                "gaps": {b: _mean_gap(res, b) for b in (10, 25, 50, 100)}}
        seeds.append(info)
        if info["last_loss"] < info["first_loss"] and info["gaps"][10] <= 1.10 * baseline:
            break
    _PIPELINE.update(baseline=baseline, seeds=seeds, elapsed=time.perf_counter() - t0)
    shutil.rmtree(d, ignore_errors=True)
    return _PIPELINE


@_timed
def criterion_8():
    """Learned bundle within 10% of the best constant-eta bundle at budget 10 (up to 3 seeds)."""
    p = _full_pipeline()
    bound = 1.10 * p["baseline"]
    parts = []
    ok = False
    for s in p["seeds"]:
        dec = s["last_loss"] < s["first_loss"]
        hit = s["gaps"][10] <= bound
        ok |= dec and hit
        parts.append(f"seed {s['seed']}: loss {s['first_loss']:.2f}->{s['last_loss']:.2f}, "
                     f"gap@10 {s['gaps'][10]:.2f}%")
    ok &= p["elapsed"] < 45 * 60
    return ok, f"bound 1.10 x {p['baseline']:.2f}% = {bound:.2f}%; " + "; ".join(parts)


@_timed
def criterion_9():
    """Budget-10-trained checkpoints evaluate at 25/50/100 with nonincreasing mean gap."""
    p = _full_pipeline()
    ok = True
    parts = []
    for s in p["seeds"]:
        g = [s["gaps"][b] for b in (10, 25, 50, 100)]
        mono = all(b <= a for a, b in zip(g, g[1:]))
        ok &= mono
        parts.append(f"seed {s['seed']}: " + " >= ".join(f"{x:.2f}" for x in g))
    return ok, "; ".join(parts)


TINY = {
    "generator": {"name": "det", "n_train": 3, "n_test": 3, "seed": 5,
                  "params": {"nodes": 6, "arcs": 14, "commodities": 4}},
    "solver": {"record_times": False, "reference_iters": 300},
    "train": {"epochs": 2, "T": 4, "lr": 1e-3, "net": {"latent": 4, "decoder_hidden": 8}},
}


def _tiny_pipeline(d: Path) -> None:
    cfg = hz.merge_config(hz.DEFAULT_CONFIG, TINY)
    hz.cmd_generate(cfg, d)
    hz.cmd_reference(d, cfg)
    for method in ("bundle-constant", "bundle-soft", "descent", "adam"):
        hz.cmd_gridsearch(d, cfg, method, (5, 10), seed=0)
        hz.cmd_evaluate(d, cfg, method, (5, 10), seed=0)
    ck = d / "ck.npz"
    hz.cmd_train(d, cfg, ck, seed=0)
    hz.cmd_evaluate(d, cfg, "learned", (5, 10), seed=0, checkpoint=ck)
    hz.cmd_report(d)


@_timed
def criterion_10():
    """Two single-threaded runs with fixed seeds give byte-identical CSVs."""
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        _tiny_pipeline(a)
        _tiny_pipeline(b)
        files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
        other = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
        differ = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
        ok = files == other and not differ and len(files) > 10
        return ok, f"{len(files)} CSV files compared, differing: {differ or 'none'}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def _report(k: int, ok: bool, detail: str) -> str:
    return f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.parametrize("k", range(1, 11))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + _report(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or range(1, 11)
    status = 0
    for k in wanted:
        ok, detail = CRITERIA[k - 1]()
        print(_report(k, ok, detail), flush=True)
        status |= not ok
    sys.exit(status)
