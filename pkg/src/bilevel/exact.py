"""Closed-form inner solutions, exact outer values, and convergence studies.

These are the reference oracles for quadratic inner problems: the closed
form ``w(lam)``, the exact value ``f(lam) = E(w(lam), lam)``, spectral
certificates ``(mu, nu)`` of the inner Hessian, and grid studies of how the
unrolled ``w_T`` and ``f_T`` approach them as ``T`` grows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla

from .core import BilevelError, StepSchedule
from .dynamics import DynamicsSpec, contraction_rate, unroll
from .problems import BilevelProblem, QuadraticObjective, lam_values


class ConvergenceError(BilevelError, RuntimeError):
    pass


def ridge_closed_form(X, y, H, rho: float) -> np.ndarray:
    """Minimizer of ``||y - X H w||^2 + rho ||w||^2``.

    Solves ``((XH)^T XH + rho I) w = (XH)^T y`` by Cholesky.  ``y`` may be a
    matrix of targets (one column per output), in which case ``w`` is too.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(H))):
        raise ValueError("non-finite inputs")
    Z = X @ H
    A = Z.T @ Z + rho * np.eye(Z.shape[1])
    return sla.cho_solve(sla.cho_factor(A), Z.T @ y)


def eval_f_exact(problem: BilevelProblem, lam) -> float:
    """Outer loss at the exact inner minimizer."""
    inner = problem.inner
    if not getattr(inner, "is_quadratic", False):
        raise TypeError("exact evaluation needs a quadratic inner objective")
    try:
        w = inner.minimizer(lam)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular inner Hessian") from exc
    return problem.outer.loss(w, lam)


@dataclass(frozen=True)
class ConvexityCertificate:
    mu: float
    nu: float
    rate: float

    def __post_init__(self):
        if not 0 < self.mu <= self.nu:
            raise ValueError(f"need 0 < mu <= nu, got mu={self.mu}, nu={self.nu}")


def power_iteration(matvec, d: int, tol: float = 1e-10, max_iter: int = 10_000,
                    seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric positive semi-definite operator."""
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    theta_old = np.inf
    for _ in range(max_iter):
        Av = matvec(v)
        theta = float(v @ Av)
        res = np.linalg.norm(Av - theta * v)
        scale = max(abs(theta), np.finfo(float).tiny)
        # clustered top eigenvalues stall the residual but not the Rayleigh quotient
        if res <= tol * scale or abs(theta - theta_old) <= 1e-15 * scale:
            return theta
        theta_old = theta
        nrm = np.linalg.norm(Av)
        if nrm == 0:
            return 0.0
        v = Av / nrm
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def certificate(obj: QuadraticObjective, lam, eta: Optional[float] = None,
                tol: float = 1e-10) -> ConvexityCertificate:
    """Strong-convexity modulus and gradient Lipschitz constant of the inner loss.

    ``nu`` comes from power iteration on the Hessian and ``mu`` from inverse
    iteration (power iteration on the Cholesky-solved inverse).  ``eta``
    defaults to ``1 / nu``.
    """
    if not getattr(obj, "is_quadratic", False):
        raise TypeError("certificates are computed for quadratic inner objectives")
    A = obj.hessian(lam)
    d = A.shape[0]
    nu = power_iteration(lambda v: A @ v, d, tol)
    factor = sla.cho_factor(A)
    inv_top = power_iteration(lambda v: sla.cho_solve(factor, v), d, tol, seed=1)
    mu = 1.0 / inv_top
    # both estimates carry ~tol relative error; keep the pair ordered
    mu = min(mu, nu)
    if eta is None:
        eta = 1.0 / nu
    return ConvexityCertificate(mu, nu, contraction_rate(mu, nu, eta))


@dataclass
class StudyTable:
    """Rows of a convergence study plus scalar metadata."""

    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                            for k, v in r.items() if k in self.columns})


def _grid(lambda_grid) -> np.ndarray:
    G = np.asarray([lam_values(l) for l in lambda_grid], dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("lambda grid must be a non-empty sequence of vectors")
    return G


def default_eta(problem: BilevelProblem, grid: np.ndarray) -> float:
    """``1 / max nu`` over the grid: a single step size stable at every point."""
    return 1.0 / max(certificate(problem.inner, lam).nu for lam in grid)


def uniform_convergence_study(problem: BilevelProblem, lambda_grid, T_list: Sequence[int],
                              eta: Optional[float] = None) -> StudyTable:
    """Sup over the grid of ``||w_T - w(lam)||`` and ``|f_T - f|`` for each ``T``.

    Metadata holds the certificate bound ``C * qbar^T`` (``C`` the largest
    initial distance, ``qbar`` the largest contraction rate on the grid) and
    ``nu_E``, an outer Lipschitz estimate: for convex ``E`` the largest
    gradient norm at the two endpoints bounds ``|E(a) - E(b)| / ||a - b||``.
    """
    G = _grid(lambda_grid)
    T_list = sorted(int(t) for t in T_list)
    if eta is None:
        eta = default_eta(problem, G)
    Tmax = T_list[-1]
    spec = DynamicsSpec.gd(eta, Tmax)
    inner, E = problem.inner, problem.outer
    w_err = np.zeros((len(G), len(T_list)))
    f_err = np.zeros_like(w_err)
    rates, init_dist, grad_norms = [], [], []
    for i, lam in enumerate(G):
        w_star = inner.minimizer(lam)
        f_star = E.loss(w_star, lam)
        tape = unroll(inner, lam, spec, Tmax)
        cert = certificate(inner, lam, eta)
        rates.append(cert.rate)
        init_dist.append(np.linalg.norm(tape.iterates[0] - w_star))
        grad_norms.append(np.linalg.norm(E.grad_w(w_star, lam)))
        for j, T in enumerate(T_list):
            wT = tape.iterates[T]
            w_err[i, j] = np.linalg.norm(wT - w_star)
            f_err[i, j] = abs(E.loss(wT, lam) - f_star)
            grad_norms.append(np.linalg.norm(E.grad_w(wT, lam)))
    qbar = max(rates)
    C = max(init_dist)
    nu_E = max(grad_norms)
    table = StudyTable(["T", "sup_w_err", "sup_f_err", "bound", "lipschitz_bound"],
                       meta={"eta": eta, "qbar": qbar, "C": C, "nu_E": nu_E,
                             "n_grid": len(G)})
    for j, T in enumerate(T_list):
        table.rows.append({"T": T, "sup_w_err": float(w_err[:, j].max()),
                           "sup_f_err": float(f_err[:, j].max()),
                           "bound": C * qbar ** T,
                           "lipschitz_bound": nu_E * float(w_err[:, j].max())})
    return table


def argmin_convergence_study(problem: BilevelProblem, lambda_grid, T_list: Sequence[int],
                             eta: Optional[float] = None) -> StudyTable:
    """Grid argmin and minimum of ``f_T`` per ``T`` against those of ``f``.

    Ties are broken by the lowest grid index.
    """
    G = _grid(lambda_grid)
    T_list = sorted(int(t) for t in T_list)
    if eta is None:
        eta = default_eta(problem, G)
    Tmax = T_list[-1]
    spec = DynamicsSpec.gd(eta, Tmax)
    inner, E = problem.inner, problem.outer
    f = np.array([eval_f_exact(problem, lam) for lam in G])
    fT = np.empty((len(G), len(T_list)))
    for i, lam in enumerate(G):
        tape = unroll(inner, lam, spec, Tmax)
        for j, T in enumerate(T_list):
            fT[i, j] = E.loss(tape.iterates[T], lam)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(fT))):
        raise ValueError("non-finite objective values on the grid")
    i_star = int(np.argmin(f))
    m = G.shape[1]
    cols = (["T", "argmin_index"] + [f"argmin_lambda_{k}" for k in range(m)]
            + ["inf_fT", "inf_f", "index_gap", "inf_gap"])
    table = StudyTable(cols, meta={"eta": eta, "argmin_f_index": i_star,
                                   "argmin_f": G[i_star].tolist(), "inf_f": float(f[i_star])})
    for j, T in enumerate(T_list):
        i_T = int(np.argmin(fT[:, j]))
        row = {"T": T, "argmin_index": i_T, "inf_fT": float(fT[i_T, j]),
               "inf_f": float(f[i_star]), "index_gap": abs(i_T - i_star),
               "inf_gap": abs(float(fT[i_T, j]) - float(f[i_star]))}
        for k in range(m):
            row[f"argmin_lambda_{k}"] = float(G[i_T, k])
        table.rows.append(row)
    return table
