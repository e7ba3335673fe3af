"""Outer loop: hypergradient descent on ``lam`` with Adam or momentum."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import DivergenceError, HyperParams, as_hyper
from .dynamics import DIVERGENCE_THRESHOLD

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class OuterOptState:
    lam: HyperParams
    first_moment: np.ndarray
    second_moment: np.ndarray
    velocity: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    lr_decay: float = 0.0

    @classmethod
    def init(cls, lam, lr: float = 1e-3, lr_decay: float = 0.0) -> "OuterOptState":
        lam = as_hyper(lam)
        z = np.zeros(lam.m)
        return cls(lam, z, z.copy(), z.copy(), 0, float(lr), float(lr_decay))

    @property
    def lr_effective(self) -> float:
        return self.lr / (1.0 + self.lr_decay * self.step_count)


def _check_grad(state: OuterOptState, grad) -> np.ndarray:
    g = np.ravel(np.asarray(grad, dtype=np.float64))
    if g.size != state.lam.m:
        raise ValueError(f"gradient has {g.size} entries, expected {state.lam.m}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite hypergradient")
    return g


def adam_step(state: OuterOptState, grad) -> OuterOptState:
    """One bias-corrected Adam step with ``lr / (1 + decay * step)`` and projection."""
    g = _check_grad(state, grad)
    t = state.step_count + 1
    m = ADAM_BETA1 * state.first_moment + (1 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.second_moment + (1 - ADAM_BETA2) * g * g
    m_hat = m / (1 - ADAM_BETA1 ** t)
    v_hat = v / (1 - ADAM_BETA2 ** t)
    new = state.lam.values - state.lr_effective * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return replace(state, lam=state.lam.replace(new), first_moment=m, second_moment=v,
                   step_count=t)


def momentum_step(state: OuterOptState, grad, momentum: float = 0.9) -> OuterOptState:
    """Heavy-ball step: ``vel = momentum * vel + g``; ``lam -= lr_eff * vel``."""
    g = _check_grad(state, grad)
    vel = momentum * state.velocity + g
    new = state.lam.values - state.lr_effective * vel
    return replace(state, lam=state.lam.replace(new), velocity=vel,
                   step_count=state.step_count + 1)


@dataclass(frozen=True)
class StopPolicy:
    patience: int = 5
    metric: str = "meta_val_accuracy"
    eval_every: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.metric not in ("meta_val_accuracy", "meta_val_loss"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "meta_val_accuracy"


class EarlyStopper:
    """Counts consecutive evaluations without improvement."""

    def __init__(self, policy: StopPolicy):
        self.policy = policy
        self.best = None
        self.bad = 0

    def update(self, value: float) -> bool:
        better = self.best is None or (value > self.best if self.policy.higher_is_better
                                       else value < self.best)
        if better:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.policy.patience


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    lam: Optional[HyperParams] = None
    best_lam: Optional[HyperParams] = None

    def column(self, key) -> list:
        return [r[key] for r in self.records]

    def trajectory(self) -> list:
        """Records without wall-clock fields, for reproducibility comparisons."""
        return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


@dataclass
class DriverConfig:
    """Everything :func:`hyper_iterate` needs.

    ``hypergrad(lam, batch)`` returns a report with ``grad`` and ``f_value``;
    ``batcher(it)`` returns the batch for hyperiteration ``it`` (``None``
    means full batch); ``metric(lam)`` is the meta-validation score.
    """

    hypergrad: Callable
    max_iters: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 0.0
    momentum: float = 0.9
    batcher: Optional[Callable] = None
    metric: Optional[Callable] = None
    stop: Optional[StopPolicy] = None
    log_path: Optional[str] = None
    callback: Optional[Callable] = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "momentum", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def hyper_iterate(config: DriverConfig, lam0) -> RunLog:
    """Run the outer loop and return its log.

    Record ``k`` describes the state after ``k`` optimizer steps: the
    hypergradient report at ``lam_k`` and, every ``eval_every`` iterations,
    the metric.  The loop ends after ``max_iters`` steps or when the stop
    policy fires.
    """
    state = OuterOptState.init(lam0, config.lr, config.lr_decay)
    log = RunLog()
    stopper = EarlyStopper(config.stop) if config.stop is not None else None
    eval_every = config.stop.eval_every if config.stop is not None else 1
    fh = open(config.log_path, "w") if config.log_path else None
    t0 = time.perf_counter()
    best_val = None
    try:
        for it in range(config.max_iters + 1):
            batch = config.batcher(it) if config.batcher is not None else None
            try:
                rep = config.hypergrad(state.lam, batch)
            except DivergenceError as exc:
                raise DivergenceError(exc.step, it) from exc
            metric = None
            if config.metric is not None and it % eval_every == 0:
                metric = float(config.metric(state.lam))
            rec = {"iter": it, "fT": float(rep.f_value),
                   "grad_norm": float(np.linalg.norm(rep.grad)), "metric": metric,
                   "lr_effective": state.lr_effective,
                   "wall_time_s": time.perf_counter() - t0}
            log.records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if config.callback is not None:
                config.callback(it, state, rep)
            if metric is not None:
                improved = best_val is None or (
                    metric > best_val if stopper is None or stopper.policy.higher_is_better
                    else metric < best_val)
                if improved:
                    best_val = metric
                    log.best_lam = state.lam
                if stopper is not None and stopper.update(metric):
                    log.stop_reason = "early_stopping"
                    break
            if it == config.max_iters:
                log.stop_reason = "max_iters"
                break
            if config.optimizer == "adam":
                state = adam_step(state, rep.grad)
            elif config.optimizer == "momentum":
                state = momentum_step(state, rep.grad, config.momentum)
            else:
                state = momentum_step(state, rep.grad, 0.0)
            lv = state.lam.values
            if not np.all(np.isfinite(lv)) or np.max(np.abs(lv), initial=0.0) > DIVERGENCE_THRESHOLD:
                raise DivergenceError(0, it + 1)
    finally:
        if fh is not None:
            fh.close()
    log.lam = state.lam
    if log.best_lam is None:
        log.best_lam = state.lam
    return log
