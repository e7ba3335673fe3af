"""Numerical self-checks: gradients, mode agreement, certificates, convergence.

:func:`random_problem` builds the randomized instances used both here and
in the test-suite.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np

from .core import Dataset
from .dynamics import DynamicsSpec
from .exact import certificate, uniform_convergence_study
from .hypergrad import f_T, fd_hypergrad, forward_hg, reverse_hg
from .problems import (BilevelProblem, DiagTikhonovRidge, FeatureMapRidge, SharedOffsetLinear,
                       SoftmaxRegression, ValidationLoss)

KINDS = ("feature_map", "diag_tikhonov", "shared_offset", "softmax")


def rel_err(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_problem(kind: str, rng: np.random.Generator, n: int = 8):
    """Random ``(BilevelProblem, lam)`` with ``d <= 10`` and ``m <= 12``."""
    if kind == "feature_map":
        d_in = int(rng.integers(2, 4))
        k = int(rng.integers(2, 12 // d_in + 1))
        X, Xv = rng.standard_normal((n, d_in)), rng.standard_normal((n, d_in))
        tr, va = Dataset(X, rng.standard_normal(n)), Dataset(Xv, rng.standard_normal(n))
        inner = FeatureMapRidge(tr, float(rng.uniform(0.2, 2.0)), k)
        lam = np.eye(d_in, k).ravel() + 0.5 * rng.standard_normal(d_in * k)
    elif kind == "diag_tikhonov":
        d = int(rng.integers(2, 11))
        tr = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
        va = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
        inner = DiagTikhonovRidge(tr)
        lam = rng.uniform(-1.0, 1.0, d)
    elif kind == "shared_offset":
        d = int(rng.integers(2, 11))
        tr = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
        va = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
        inner = SharedOffsetLinear(tr, float(rng.uniform(0.2, 2.0)))
        lam = rng.standard_normal(d)
    elif kind == "softmax":
        C, k, d_in = 3, int(rng.integers(2, 4)), int(rng.integers(2, 5))
        tr = Dataset(rng.standard_normal((n, d_in)), rng.integers(0, C, n), n_classes=C)
        va = Dataset(rng.standard_normal((n, d_in)), rng.integers(0, C, n), n_classes=C)
        inner = SoftmaxRegression(tr, k, float(rng.uniform(0.01, 0.5)))
        lam = np.eye(d_in, k).ravel() + 0.5 * rng.standard_normal(d_in * k)
    else:
        raise ValueError(f"unknown problem kind {kind!r}")
    return BilevelProblem(inner, ValidationLoss(inner, va)), lam


def stable_eta(problem: BilevelProblem, lam) -> float:
    """``1 / nu`` from the Hessian at ``w = 0`` (an upper bound for softmax: 1/2 ||Z||^2)."""
    inner = problem.inner
    if inner.is_quadratic:
        return 1.0 / certificate(inner, lam).nu
    Z = inner.features(lam, inner.data.X)
    return 1.0 / (0.5 * np.linalg.norm(Z, 2) ** 2 + 2.0 * inner.l2)


def random_dynamics(problem: BilevelProblem, lam, rng) -> DynamicsSpec:
    T = int(rng.integers(0, 21))
    eta = stable_eta(problem, lam) * float(rng.uniform(0.3, 1.0))
    init = "zeros"
    if problem.inner.m == problem.inner.d and rng.random() < 0.5:
        init = "copy_lambda"
    elif rng.random() < 0.3:
        init = rng.standard_normal(problem.inner.d)
    if rng.random() < 0.3:
        return DynamicsSpec.momentum(eta * 0.5, T, float(rng.uniform(0.1, 0.8)), init)
    return DynamicsSpec.gd(eta, T, init)


def hypergradient_case(problem: BilevelProblem, lam, spec: DynamicsSpec):
    """``(rel_err(reverse, fd), rel_err(reverse, forward))`` on one instance."""
    inner, E = problem.inner, problem.outer
    rev = reverse_hg(inner, E, lam, spec).grad
    fwd = forward_hg(inner, E, lam, spec).grad
    fd = fd_hypergrad(lambda l: f_T(inner, E, l, spec), lam)
    return rel_err(rev, fd), rel_err(rev, fwd)


def _suite(name, cases, check):
    passed = failed = 0
    worst = 0.0
    failures = []
    for i, case in enumerate(cases):
        ok, err = check(case)
        worst = max(worst, err)
        if ok:
            passed += 1
        else:
            failed += 1
            failures.append(i)
    return {"suite": name, "passed": passed, "failed": failed, "max_err": worst,
            "failures": failures[:10]}


def run_checks(n_instances: int = 20, seed: int = 0,
               make_problem: Optional[Callable] = None) -> dict:
    """Run every suite and return a JSON-ready summary.

    ``make_problem(kind, rng)`` replaces :func:`random_problem`, which lets a
    test inject a deliberately broken objective.
    """
    make = make_problem or random_problem
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    cases = [make(KINDS[i % len(KINDS)], rng) for i in range(n_instances)]
    specs = [random_dynamics(p, lam, rng) for p, lam in cases]

    def grad_check(case):
        (problem, lam) = case
        inner = problem.inner
        w = rng.standard_normal(inner.d)
        g = inner.grad_w(w, lam)
        fd = fd_hypergrad(lambda x: inner.loss(x, lam), w)
        v = rng.standard_normal(inner.d)
        hv = inner.hvp_w(w, lam, v)
        fd_hv = fd_hypergrad(lambda x: v @ inner.grad_w(x, lam), w)
        cj = inner.cross_jvp(w, lam, v)
        fd_cj = fd_hypergrad(lambda l: v @ inner.grad_w(w, l), lam)
        err = max(rel_err(g, fd), rel_err(hv, fd_hv), rel_err(cj, fd_cj))
        return err <= 1e-5, err

    fd_errs, mode_errs = [], []

    def hg_check(i):
        e_fd, e_mode = hypergradient_case(cases[i][0], cases[i][1], specs[i])
        fd_errs.append(e_fd)
        mode_errs.append(e_mode)
        return e_fd <= 1e-5 and e_mode <= 1e-9, e_fd

    def cert_check(case):
        problem, lam = case
        if not problem.inner.is_quadratic:
            return True, 0.0
        c = certificate(problem.inner, lam)
        ev = np.linalg.eigvalsh(problem.inner.hessian(lam))
        err = max(abs(c.nu - ev[-1]) / ev[-1], abs(c.mu - ev[0]) / ev[0])
        return err <= 1e-6, err

    def conv_check(case):
        problem, lam = case
        if not problem.inner.is_quadratic:
            return True, 0.0
        grid = [lam + 0.1 * k for k in range(3)]
        tab = uniform_convergence_study(problem, grid, [4, 16, 64])
        w_err = tab.column("sup_w_err")
        ok = bool(np.all(w_err <= tab.column("bound") * (1 + 1e-9) + 1e-12)
                  and np.all(np.diff(w_err) <= 1e-12)
                  and np.all(tab.column("sup_f_err")
                             <= tab.column("lipschitz_bound") * (1 + 1e-9) + 1e-12))
        excess = float(np.max(w_err - tab.column("bound")))
        return ok, max(excess, 0.0)

    suites = [
        _suite("gradient_check", cases, grad_check),
        _suite("mode_agreement", range(len(cases)), hg_check),
        _suite("certificate", cases, cert_check),
        _suite("convergence_study", cases, conv_check),
    ]
    return {
        "ok": all(s["failed"] == 0 for s in suites),
        "suites": suites,
        "failing_suites": [s["suite"] for s in suites if s["failed"]],
        "max_fd_rel_err": float(max(fd_errs, default=0.0)),
        "max_mode_rel_err": float(max(mode_errs, default=0.0)),
        "n_instances": n_instances,
        "wall_time_s": time.perf_counter() - t0,
    }
