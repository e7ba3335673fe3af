"""Acceptance criteria 1-9.

Each test prints one ``PASS``/``FAIL`` line with the measured quantity and
wall time, then asserts.  Run just this file with

    pytest tests/test_acceptance.py -v
"""

import json
import sys
import time

import numpy as np
import pytest

from bilevel import experiments
from bilevel.checks import KINDS, hypergradient_case, random_dynamics, random_problem, rel_err
from bilevel.cli import main
from bilevel.core import Dataset
from bilevel.dynamics import DynamicsSpec, unroll
from bilevel.exact import argmin_convergence_study, certificate, uniform_convergence_study
from bilevel.hypergrad import fd_hypergrad, implicit_hg, reverse_hg
from bilevel.meta import (EpisodeSampler, FoldSpec, HyperReprProblem, kfold_outer,
                          kfold_stochastic_mean, meta_hypergrad, sample_batch)
from bilevel.problems import (BilevelProblem, DiagTikhonovRidge, FeatureMapRidge,
                              ValidationLoss)


@pytest.fixture
def report(capsys):
    t0 = time.perf_counter()

    def emit(n, ok, detail, budget):
        dt = time.perf_counter() - t0
        ok = ok and dt < budget
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail} "
                  f"[{dt:.1f}s, budget {budget:.0f}s]")
        return ok
    return emit


def test_criterion_1_hypergradient_correctness(report):
    rng = np.random.default_rng(1)
    fd_errs, mode_errs, shapes = [], [], []
    for i in range(120):
        problem, lam = random_problem(KINDS[i % len(KINDS)], rng)
        spec = random_dynamics(problem, lam, rng)
        assert problem.d <= 10 and problem.m <= 12 and spec.schedule.T <= 20
        e_fd, e_mode = hypergradient_case(problem, lam, spec)
        fd_errs.append(e_fd)
        mode_errs.append(e_mode)
        shapes.append(spec.schedule.T)
    ok = max(fd_errs) <= 1e-5 and max(mode_errs) <= 1e-9
    assert report(1, ok, f"120 instances, max rel err vs FD {max(fd_errs):.2e} (<=1e-5), "
                         f"vs forward {max(mode_errs):.2e} (<=1e-9)", 60)


def test_criterion_2_exact_limit(report):
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(20):
        d_in = int(rng.integers(2, 4))
        inner = FeatureMapRidge(Dataset(rng.standard_normal((10, d_in)),
                                        rng.standard_normal(10)), float(rng.uniform(0.2, 2.0)))
        E = ValidationLoss(inner, Dataset(rng.standard_normal((8, d_in)),
                                          rng.standard_normal(8)))
        lam = np.eye(d_in).ravel() + 0.5 * rng.standard_normal(d_in * d_in)
        spec = DynamicsSpec.gd(1.0 / certificate(inner, lam).nu, 4096)
        ref = implicit_hg(inner, E, lam)
        errs.append(np.linalg.norm(reverse_hg(inner, E, lam, spec).grad - ref)
                    / np.linalg.norm(ref))
    assert report(2, max(errs) <= 1e-5,
                  f"20 instances, max ||rev(T=4096) - implicit|| / ||implicit|| = "
                  f"{max(errs):.2e} (<=1e-5)", 120)


def test_criterion_3_uniform_convergence(report):
    rng = np.random.default_rng(3)
    inner = FeatureMapRidge(Dataset(rng.standard_normal((12, 3)), rng.standard_normal(12)), 0.5)
    E = ValidationLoss(inner, Dataset(rng.standard_normal((10, 3)), rng.standard_normal(10)))
    direction = rng.standard_normal(9)
    grid = [np.eye(3).ravel() + t * direction for t in np.linspace(-0.5, 0.5, 50)]
    tab = uniform_convergence_study(BilevelProblem(inner, E), grid, [4, 16, 64, 256])
    w = tab.column("sup_w_err")
    f = tab.column("sup_f_err")
    within = bool(np.all(w <= tab.column("bound") * (1 + 1e-9)))
    decays = bool(np.all(np.diff(w) < 0)) and tab.meta["qbar"] < 1
    lip = bool(np.all(f <= tab.column("lipschitz_bound") * (1 + 1e-9)))
    ok = within and decays and lip
    assert report(3, ok, f"50-point grid, qbar={tab.meta['qbar']:.4f}, sup w err "
                         f"{', '.join(f'{v:.1e}' for v in w)} within C*qbar^T={within}, "
                         f"decreasing={decays}, sup|f_T-f| <= nu_E*sup w err={lip}", 60)


def _scalar_tikhonov(seed=1):
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(5)
    X, Xv = rng.standard_normal((40, 5)), rng.standard_normal((40, 5))
    inner = DiagTikhonovRidge(Dataset(X, X @ w_true + 2.0 * rng.standard_normal(40)), tied=True)
    E = ValidationLoss(inner, Dataset(Xv, Xv @ w_true + 2.0 * rng.standard_normal(40)))
    return BilevelProblem(inner, E)


def test_criterion_4_argmin_convergence(report):
    grid = [np.array([v]) for v in np.linspace(-2, 4, 61)]
    tab = argmin_convergence_study(_scalar_tikhonov(), grid, [4, 16, 64, 256])
    last = tab.rows[-1]
    ok = last["index_gap"] <= 1 and last["inf_gap"] <= 1e-6
    assert report(4, ok, f"T=256 argmin index {last['argmin_index']} vs "
                         f"{tab.meta['argmin_f_index']} (gap {last['index_gap']} <= 1 cell), "
                         f"|min f_T - min f| = {last['inf_gap']:.1e} (<=1e-6)", 60)


def test_criterion_5_sparse_ridge_trend(report):
    res = experiments.ridge_diag(experiments.params_for("ridge_diag"), seed=0)
    rows = res["rows"]
    val = [r["val_mape"] for r in rows if r["T"] != "Exact"]
    exact = [r["val_mape"] for r in rows if r["T"] == "Exact"][0]
    decreasing = all(a > b for a, b in zip(val, val[1:]))
    ok = decreasing and exact <= min(val)
    table = ", ".join(f"T={r['T']}: {r['val_mape']:.2f}/{r['test_mape']:.2f}" for r in rows)
    assert report(5, ok, f"val/test MAPE {table}; strictly decreasing={decreasing}, "
                         f"exact <= best unrolled={exact <= min(val)}", 300)


def test_criterion_6_runtime_linearity(report):
    p = experiments.params_for("effect_of_t")
    tr, va, _ = experiments.feature_map_data(p, 0)
    inner = FeatureMapRidge(tr, p["rho"])
    E = ValidationLoss(inner, va)
    H0 = np.eye(tr.d_in).ravel()
    eta = 0.5 / certificate(inner, H0).nu
    T_list = [1, 4, 16, 64, 256]
    times = experiments.time_reverse_hg(inner, E, H0, eta, T_list, repeats=7)
    r2 = experiments.linear_fit_r2(T_list, times)
    assert report(6, r2 >= 0.95, f"median times {', '.join(f'{t * 1e3:.2f}ms' for t in times)}"
                                 f", R^2 = {r2:.5f} (>=0.95)", 300)


def test_criterion_7_meta_plumbing(report):
    sampler = EpisodeSampler(seed=7)
    batch = sample_batch(sampler, 6)
    prob = HyperReprProblem(sampler.feature_dim)
    lam = prob.glorot_lambda(3)
    spec = DynamicsSpec.gd(0.1, 5)
    full = meta_hypergrad(prob, batch, lam, spec, mode="full", diagnostics=True)
    acc = np.zeros(prob.m)
    for ep in batch:
        acc = acc + meta_hypergrad(prob, [ep], lam, spec, mode="full").grad
    additive = bool(np.array_equal(full.grad, acc))
    explicit = np.zeros(prob.m)
    for ep in batch:
        obj, E = prob.pair(ep)
        explicit = explicit + E.grad_lam(unroll(obj, lam, spec).final, lam)
    approx_ok = bool(np.array_equal(meta_hypergrad(prob, batch, lam, spec, mode="approx").grad,
                                    explicit))
    diff = float(np.linalg.norm(full.grad - meta_hypergrad(prob, batch, lam, spec,
                                                           mode="bilevel_train").grad))
    ok = additive and approx_ok and diff > 1e-8
    assert report(7, ok, f"batch == sum of episodes exactly: {additive}; approx == explicit "
                         f"partial exactly: {approx_ok}; ||full - bilevel_train|| = {diff:.3e} "
                         f"(>1e-8)", 60)


def test_criterion_8_meta_end_to_end(report, tmp_path, capsys):
    rc = main(["meta", "--out", str(tmp_path), "--seed", "0"])
    capsys.readouterr()
    with open(tmp_path / "runlog_full_T5.jsonl") as fh:
        recs = [json.loads(line) for line in fh]
    acc = [(r["iter"], r["metric"]) for r in recs if r["metric"] is not None and r["iter"] <= 50]
    vals = [a for _, a in acc]
    monotone = all(b >= a for a, b in zip(vals, vals[1:])) and vals[-1] > vals[0]
    ok = rc == 0 and len(vals) >= 2 and monotone
    curve = ", ".join(f"{i}:{a:.3f}" for i, a in acc)
    assert report(8, ok, f"cmd_meta exit {rc}; meta-val accuracy {curve}; "
                         f"monotone improving={monotone}", 600)


def test_criterion_9_kfold(report):
    rng = np.random.default_rng(9)
    n, d = 12, 4
    data = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
    lam = rng.uniform(-1, 1, d)
    spec = DynamicsSpec.gd(0.02, 15)
    errs, exact = [], True
    for K in (3, n):
        folds = FoldSpec.make(n, K, seed=K)
        err, rep = kfold_outer(data, folds, DiagTikhonovRidge, lam, spec)
        fd = fd_hypergrad(lambda l: kfold_outer(data, folds, DiagTikhonovRidge, l, spec)[0], lam)
        errs.append(rel_err(rep.grad, fd))
        e_s, g_s = kfold_stochastic_mean(data, folds, DiagTikhonovRidge, lam, spec)
        exact = exact and e_s == err and bool(np.array_equal(g_s, rep.grad))
    ok = max(errs) <= 1e-5 and exact
    assert report(9, ok, f"K=3 / K=n rel err vs FD {errs[0]:.2e} / {errs[1]:.2e} (<=1e-5); "
                         f"single-fold mean == full K exactly: {exact}", 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
