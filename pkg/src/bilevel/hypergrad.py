"""Hypergradients of ``f_T(lam) = E(w_T(lam), lam)``.

Four engines share one report type:

* :func:`reverse_hg`  backward adjoint recursion over a stored trajectory
* :func:`forward_hg`  forward propagation of the Jacobian ``dw_t/dlam``
* :func:`approx_hg`   explicit partial only (trajectory treated as constant)
* :func:`implicit_hg` exact gradient of ``f`` for quadratic inner problems
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg as sla

from .core import BilevelError
from .dynamics import DynamicsSpec, unroll
from .problems import InnerObjective, QuadraticObjective, ValidationLoss, lam_values

CONDITION_LIMIT = 1e12


class IllConditionedError(BilevelError, np.linalg.LinAlgError):
    pass


@dataclass
class HypergradReport:
    grad: np.ndarray
    f_value: float
    T: int
    wall_time: float = 0.0
    per_episode: Optional[list] = None

    def to_dict(self) -> dict:
        d = {"grad": [float(g) for g in self.grad], "f_value": float(self.f_value),
             "T": int(self.T), "wall_time_s": float(self.wall_time)}
        if self.per_episode is not None:
            d["per_episode"] = [[float(g) for g in p] for p in self.per_episode]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "HypergradReport":
        pe = d.get("per_episode")
        return cls(np.array(d["grad"], dtype=np.float64), float(d["f_value"]), int(d["T"]),
                   float(d.get("wall_time_s", 0.0)),
                   None if pe is None else [np.array(p, dtype=np.float64) for p in pe])

    @classmethod
    def from_json(cls, s: str) -> "HypergradReport":
        return cls.from_dict(json.loads(s))


@dataclass
class AdjointState:
    alpha: np.ndarray
    p: np.ndarray
    alpha_v: Optional[np.ndarray] = None


def _reverse_pass(obj: InnerObjective, E: ValidationLoss, lam, spec: DynamicsSpec, tape):
    sched = tape.schedule
    wT = tape.final
    gw, glam = E.grads(wT, lam)
    st = AdjointState(alpha=np.array(gw, dtype=np.float64), p=np.array(glam, dtype=np.float64),
                      alpha_v=np.zeros(obj.d) if sched.momentum > 0 else None)
    mu = sched.momentum
    for t in range(tape.T - 1, -1, -1):
        eta = sched.etas[t]
        w = tape.iterates[t]
        # s is the adjoint of the gradient evaluated at w_t
        s = -eta * st.alpha
        if st.alpha_v is not None:
            s = s + st.alpha_v
        st.p += obj.cross_jvp(w, lam, s)
        st.alpha = st.alpha + obj.hvp_w(w, lam, s)
        if st.alpha_v is not None:
            st.alpha_v = mu * s
    if spec.init_depends_on_lambda:
        st.p += st.alpha
    return st


def reverse_hg(obj: InnerObjective, E: ValidationLoss, lam, spec: DynamicsSpec,
               T: Optional[int] = None) -> HypergradReport:
    """Gradient of ``f_T`` by one forward unroll and a backward adjoint sweep.

    Only Hessian-vector and mixed vector-Jacobian products are used, so no
    ``d x d`` or ``d x m`` matrix is ever formed.
    """
    t0 = time.perf_counter()
    tape = unroll(obj, lam, spec, T)
    st = _reverse_pass(obj, E, lam, spec, tape)
    f = E.loss(tape.final, lam)
    return HypergradReport(st.p, f, tape.T, time.perf_counter() - t0)


def forward_hg(obj: InnerObjective, E: ValidationLoss, lam, spec: DynamicsSpec,
               T: Optional[int] = None) -> HypergradReport:
    """Gradient of ``f_T`` by forward propagation of ``Z_t = dw_t/dlam`` (d x m)."""
    t0 = time.perf_counter()
    T = spec.schedule.T if T is None else int(T)
    sched = spec.schedule_for(T)
    d, m = obj.d, obj.m
    w = spec.initial(d, lam)
    Z = np.eye(d, m) if spec.init_depends_on_lambda else np.zeros((d, m))
    mu = sched.momentum
    v = np.zeros(d)
    Vz = np.zeros((d, m))
    for t in range(T):
        eta = sched.etas[t]
        g = obj.grad_w(w, lam)
        HZ = np.column_stack([obj.hvp_w(w, lam, Z[:, j]) for j in range(m)]) if m else Z
        dG = HZ + obj.cross_matrix(w, lam)
        if mu > 0:
            v = mu * v + g
            Vz = mu * Vz + dG
            w = w - eta * v
            Z = Z - eta * Vz
        else:
            w = w - eta * g
            Z = Z - eta * dG
    gw, glam = E.grads(w, lam)
    return HypergradReport(Z.T @ gw + glam, E.loss(w, lam), T, time.perf_counter() - t0)


def approx_hg(obj: InnerObjective, E: ValidationLoss, lam, spec: DynamicsSpec,
              T: Optional[int] = None) -> HypergradReport:
    """Explicit partial ``dE/dlam`` at ``w_T``, ignoring how ``w_T`` depends on lam."""
    t0 = time.perf_counter()
    tape = unroll(obj, lam, spec, T)
    wT = tape.final
    return HypergradReport(np.array(E.grad_lam(wT, lam), dtype=np.float64), E.loss(wT, lam),
                           tape.T, time.perf_counter() - t0)


def implicit_hg(obj: QuadraticObjective, E: ValidationLoss, lam) -> np.ndarray:
    """Exact gradient of ``f(lam) = E(w(lam), lam)`` for a quadratic inner problem."""
    return implicit_hg_report(obj, E, lam).grad


def implicit_hg_report(obj: QuadraticObjective, E: ValidationLoss, lam) -> HypergradReport:
    if not getattr(obj, "is_quadratic", False):
        raise TypeError("implicit differentiation needs a quadratic inner objective")
    t0 = time.perf_counter()
    A = obj.hessian(lam)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(f"inner Hessian condition number {cond:.3g} exceeds limit")
    try:
        factor = sla.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("inner Hessian is not positive definite") from exc
    w = sla.cho_solve(factor, obj.linear_term(lam))
    gw, glam = E.grads(w, lam)
    s = sla.cho_solve(factor, gw)
    grad = glam - obj.cross_jvp(w, lam, s)
    return HypergradReport(grad, E.loss(w, lam), -1, time.perf_counter() - t0)


ENGINES: dict[str, Callable] = {"reverse": reverse_hg, "forward": forward_hg,
                                "approx": approx_hg}


def batch_hg(pairs: Sequence, lam, spec: DynamicsSpec, T: Optional[int] = None,
             engine: str = "reverse", diagnostics: bool = False,
             threads: int = 1) -> HypergradReport:
    """Sum of per-task hypergradients over ``pairs`` of ``(inner, outer)``.

    With ``threads == 1`` tasks run in order and the reduction is sequential,
    which makes the result bit-reproducible.  With more threads the sum is
    accumulated in completion order, so the last bits may vary between runs.
    """
    fn = ENGINES[engine]
    t0 = time.perf_counter()
    m = pairs[0][0].m if pairs else lam_values(lam).size
    grad = np.zeros(m)
    f = 0.0
    per = [None] * len(pairs) if diagnostics else None
    T_eff = spec.schedule.T if T is None else int(T)
    if threads <= 1 or len(pairs) <= 1:
        for j, (obj, E) in enumerate(pairs):
            rep = fn(obj, E, lam, spec, T)
            grad = grad + rep.grad
            f += rep.f_value
            if per is not None:
                per[j] = rep.grad
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(fn, obj, E, lam, spec, T): j for j, (obj, E) in enumerate(pairs)}
            for fut in as_completed(futs):
                rep = fut.result()
                grad = grad + rep.grad
                f += rep.f_value
                if per is not None:
                    per[futs[fut]] = rep.grad
    return HypergradReport(grad, f, T_eff, time.perf_counter() - t0, per)


def fd_hypergrad(fT: Callable[[np.ndarray], float], lam, h: Optional[float] = None) -> np.ndarray:
    """Central finite differences of a scalar function of ``lam``.

    Default step is ``1e-6 * max(1, ||lam||_inf)``.
    """
    lam = np.array(lam_values(lam), dtype=np.float64)
    if h is None:
        h = 1e-6 * max(1.0, float(np.max(np.abs(lam), initial=0.0)))
    g = np.empty_like(lam)
    for i in range(lam.size):
        lp = lam.copy()
        lm = lam.copy()
        lp[i] += h
        lm[i] -= h
        g[i] = (fT(lp) - fT(lm)) / (2 * h)
    return g


def f_T(obj: InnerObjective, E: ValidationLoss, lam, spec: DynamicsSpec,
        T: Optional[int] = None) -> float:
    """Value of the unrolled outer objective."""
    return E.loss(unroll(obj, lam, spec, T).final, lam)
