"""Unrolled inner optimization: gradient descent and heavy-ball momentum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import DivergenceError, DimensionError, StepSchedule, TrajectoryTape
from .problems import InnerObjective, lam_values

DIVERGENCE_THRESHOLD = 1e100

KINDS = ("gd", "gd_momentum")


@dataclass(frozen=True, eq=False)
class DynamicsSpec:
    """Which map to unroll and how to initialize it.

    ``init`` is ``"zeros"``, ``"copy_lambda"`` (w_0 = lam, needs m == d) or an
    explicit starting vector.
    """

    schedule: StepSchedule
    kind: str = "gd"
    init: Union[str, np.ndarray] = "zeros"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dynamics kind {self.kind!r}")
        if self.kind == "gd" and self.schedule.momentum > 0:
            raise ValueError("plain gd does not take a momentum factor")
        if self.kind == "gd_momentum" and self.schedule.momentum == 0:
            raise ValueError("gd_momentum needs a positive momentum factor")
        if not isinstance(self.init, str):
            v = np.array(self.init, dtype=np.float64).ravel()
            v.setflags(write=False)
            object.__setattr__(self, "init", v)
        elif self.init not in ("zeros", "copy_lambda"):
            raise ValueError(f"unknown initialization {self.init!r}")

    @classmethod
    def gd(cls, eta: float, T: int, init="zeros") -> "DynamicsSpec":
        return cls(StepSchedule.constant(eta, T), "gd", init)

    @classmethod
    def momentum(cls, eta: float, T: int, mu: float, init="zeros") -> "DynamicsSpec":
        return cls(StepSchedule.constant(eta, T, mu), "gd_momentum", init)

    @property
    def init_depends_on_lambda(self) -> bool:
        return isinstance(self.init, str) and self.init == "copy_lambda"

    def initial(self, d: int, lam) -> np.ndarray:
        lam = lam_values(lam)
        if isinstance(self.init, str):
            if self.init == "zeros":
                return np.zeros(d)
            if lam.size != d:
                raise DimensionError("copy_lambda initialization needs m == d")
            return lam.copy()
        if self.init.size != d:
            raise DimensionError(f"initial vector has {self.init.size} entries, expected {d}")
        return self.init.copy()

    def schedule_for(self, T: int) -> StepSchedule:
        if T < 0:
            raise ValueError("T must be non-negative")
        return self.schedule.truncate(T)


def _check_finite(w: np.ndarray, t: int):
    if not np.all(np.isfinite(w)) or np.max(np.abs(w), initial=0.0) > DIVERGENCE_THRESHOLD:
        raise DivergenceError(t)


def unroll(obj: InnerObjective, lam, spec: DynamicsSpec, T: Optional[int] = None,
           data=None) -> TrajectoryTape:
    """Run ``T`` inner steps from ``spec.init`` and record every iterate."""
    T = spec.schedule.T if T is None else int(T)
    sched = spec.schedule_for(T)
    w = spec.initial(obj.d, lam)
    W = np.empty((T + 1, obj.d))
    W[0] = w
    mu = sched.momentum
    V = None
    if mu > 0:
        V = np.empty((T + 1, obj.d))
        V[0] = 0.0
    for t in range(1, T + 1):
        g = obj.grad_w(W[t - 1], lam, data)
        if V is not None:
            V[t] = mu * V[t - 1] + g
            W[t] = W[t - 1] - sched.etas[t - 1] * V[t]
        else:
            W[t] = W[t - 1] - sched.etas[t - 1] * g
        _check_finite(W[t], t)
    return TrajectoryTape(W, sched, V)


def contraction_rate(mu: float, nu: float, eta: float) -> float:
    """Per-step contraction factor of gradient descent on a (mu, nu) quadratic."""
    if not (0 < mu <= nu) or not np.isfinite(nu):
        raise ValueError(f"invalid moduli mu={mu}, nu={nu}")
    if not eta > 0:
        raise ValueError("step size must be positive")
    return max(abs(1.0 - eta * mu), abs(1.0 - eta * nu))
