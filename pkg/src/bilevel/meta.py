"""Episodic meta-learning, K-fold cross-validation, and synthetic generators.

The synthetic episode generator is a stand-in for a real meta-distribution:
class centres lie on the unit sphere of a low-dimensional latent space that
a planted orthogonal map embeds in feature space, and the remaining feature
directions carry nuisance noise.  A linear representation that projects the
nuisance away is therefore enough to help few-shot classifiers.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, DivergenceError, Episode, HyperParams, RngSeed, as_seed
from .dynamics import DynamicsSpec, unroll
from .hypergrad import HypergradReport, batch_hg, reverse_hg
from .problems import InnerObjective, SoftmaxRegression, ValidationLoss, lam_values

POOLS = {"train": 0, "val": 1, "test": 2}
MODES = ("full", "approx", "bilevel_train", "approx_train", "classic")


@dataclass(frozen=True)
class EpisodeSampler:
    """Seeded episode generator with disjoint meta-train/val/test class pools.

    ``pool_fractions`` splits the ``n_classes_total`` class indices (in order)
    between the three pools.
    """

    kind: str = "synthetic_classes"
    n_classes_total: int = 60
    n_way: int = 5
    k_shot: int = 1
    n_val_per_class: int = 15
    feature_dim: int = 16
    latent_dim: int = 4
    noise_scale: float = 0.3
    nuisance_scale: float = 1.0
    pool_fractions: tuple = (0.6, 0.2, 0.2)
    task_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic_classes", "synthetic_regression"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.latent_dim > self.feature_dim:
            raise ValueError("latent_dim cannot exceed feature_dim")

    @property
    def rng_seed(self) -> RngSeed:
        return as_seed(self.seed)

    def planted_map(self) -> np.ndarray:
        """Orthogonal ``feature_dim x feature_dim`` matrix; first columns span the signal."""
        A = self.rng_seed.generator(99).standard_normal((self.feature_dim, self.feature_dim))
        Q, R = np.linalg.qr(A)
        return Q * np.sign(np.diag(R))

    def class_pools(self) -> dict:
        n = self.n_classes_total
        a = int(round(self.pool_fractions[0] * n))
        b = a + int(round(self.pool_fractions[1] * n))
        idx = np.arange(n)
        return {"train": idx[:a], "val": idx[a:b], "test": idx[b:]}

    def class_means(self) -> np.ndarray:
        """Latent class centres on the unit sphere, one row per class."""
        M = self.rng_seed.generator(98).standard_normal((self.n_classes_total, self.latent_dim))
        return M / np.linalg.norm(M, axis=1, keepdims=True)

    def draw_points(self, rng, classes, per_class):
        Q = self.planted_map()
        means = self.class_means()
        r = self.latent_dim
        X, y = [], []
        for label, c in enumerate(classes):
            latent = means[c] + self.noise_scale * rng.standard_normal((per_class, r))
            nuis = self.nuisance_scale * rng.standard_normal((per_class, self.feature_dim - r))
            X.append(np.hstack([latent, nuis]) @ Q.T)
            y.append(np.full(per_class, label))
        return np.vstack(X), np.concatenate(y)

    def common_weights(self) -> np.ndarray:
        return self.rng_seed.generator(97).standard_normal(self.feature_dim)


def sample_batch(sampler: EpisodeSampler, B: int, batch_index: int = 0,
                 pool: str = "train", k_shot: Optional[int] = None) -> list:
    """``B`` episodes, reproducible from ``(seed, pool, batch_index)``.

    ``k_shot`` overrides the sampler's shots (used by the no-validation
    variants, which train on larger episodes).
    """
    if B < 1:
        raise ValueError("batch size must be at least 1")
    k = sampler.k_shot if k_shot is None else int(k_shot)
    rng = sampler.rng_seed.generator(POOLS[pool], batch_index)
    episodes = []
    if sampler.kind == "synthetic_regression":
        w_bar = sampler.common_weights()
        for j in range(B):
            w_task = w_bar + sampler.task_spread * rng.standard_normal(sampler.feature_dim)
            Xtr = rng.standard_normal((k, sampler.feature_dim))
            Xva = rng.standard_normal((sampler.n_val_per_class, sampler.feature_dim))
            ytr = Xtr @ w_task + sampler.noise_scale * rng.standard_normal(k)
            yva = Xva @ w_task + sampler.noise_scale * rng.standard_normal(len(Xva))
            episodes.append(Episode(Dataset(Xtr, ytr, "train"), Dataset(Xva, yva, "val"),
                                    batch_index * B + j))
        return episodes
    classes_pool = sampler.class_pools()[pool]
    if len(classes_pool) < sampler.n_way:
        raise ValueError(f"insufficient classes: pool {pool!r} has {len(classes_pool)}, "
                         f"need {sampler.n_way}")
    for j in range(B):
        classes = rng.choice(classes_pool, size=sampler.n_way, replace=False)
        Xtr, ytr = sampler.draw_points(rng, classes, k)
        Xva, yva = sampler.draw_points(rng, classes, sampler.n_val_per_class)
        episodes.append(Episode(Dataset(Xtr, ytr, "train", sampler.n_way),
                                Dataset(Xva, yva, "val", sampler.n_way),
                                batch_index * B + j))
    return episodes


def save_batch(path, episodes: Sequence[Episode], meta: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump({"meta": meta or {}, "episodes": [e.to_dict() for e in episodes]}, fh)


def load_batch(path) -> list:
    with open(path) as fh:
        return [Episode.from_dict(e) for e in json.load(fh)["episodes"]]


@dataclass(frozen=True)
class HyperReprProblem:
    """Shared linear representation ``H`` (``d_in x k``) with per-episode softmax heads."""

    d_in: int
    k: Optional[int] = None
    l2: float = 1e-2

    @property
    def out_dim(self) -> int:
        return self.d_in if self.k is None else self.k

    @property
    def shape_hint(self):
        return (self.d_in, self.out_dim)

    @property
    def m(self) -> int:
        return self.d_in * self.out_dim

    def identity_lambda(self) -> HyperParams:
        return HyperParams(np.eye(self.d_in, self.out_dim), self.shape_hint)

    def glorot_lambda(self, seed=0) -> HyperParams:
        lim = np.sqrt(6.0 / (self.d_in + self.out_dim))
        H = as_seed(seed).generator(7).uniform(-lim, lim, self.shape_hint)
        return HyperParams(H, self.shape_hint)

    def inner(self, data: Dataset) -> SoftmaxRegression:
        return SoftmaxRegression(data, self.out_dim, self.l2)

    def pair(self, episode: Episode, use_train_as_val: bool = False):
        obj = self.inner(episode.train)
        val = episode.train if use_train_as_val else episode.val
        return obj, ValidationLoss(obj, val)


def meta_fT(problem: HyperReprProblem, batch: Sequence[Episode], lam, spec: DynamicsSpec,
            T: Optional[int] = None) -> float:
    """Sum over episodes of the validation loss after ``T`` inner steps from zero."""
    total = 0.0
    for ep in batch:
        obj, E = problem.pair(ep)
        total += E.loss(unroll(obj, lam, spec, T).final, lam)
    return total


def classic_objective(problem: HyperReprProblem, batch, lam, ws):
    """Joint training loss ``sum_j L^j(w^j, lam, D^j_tr)`` and its gradients."""
    f, g_lam, g_ws = 0.0, np.zeros(problem.m), []
    for ep, w in zip(batch, ws):
        obj = problem.inner(ep.train)
        f += obj.loss(w, lam)
        g_lam = g_lam + obj.grad_lam(w, lam)
        g_ws.append(obj.grad_w(w, lam))
    return f, g_lam, g_ws


def meta_hypergrad(problem: HyperReprProblem, batch: Sequence[Episode], lam,
                   spec: DynamicsSpec, T: Optional[int] = None, mode: str = "full",
                   ws=None, diagnostics: bool = False, threads: int = 1) -> HypergradReport:
    """Batch hypergradient for one of the ablation modes.

    ``full``           reverse-mode through the inner dynamics, validation outer
    ``approx``         explicit partial only, validation outer
    ``bilevel_train``  as ``full`` with each episode's training set as validation
    ``approx_train``   as ``approx`` with training sets
    ``classic``        gradient in lam of the joint training loss at ``ws``
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "classic":
        t0 = time.perf_counter()
        if ws is None:
            ws = [np.zeros(problem.inner(ep.train).d) for ep in batch]
        f, g, _ = classic_objective(problem, batch, lam, ws)
        return HypergradReport(g, f, 0, time.perf_counter() - t0)
    on_train = mode in ("bilevel_train", "approx_train")
    engine = "reverse" if mode in ("full", "bilevel_train") else "approx"
    pairs = [problem.pair(ep, on_train) for ep in batch]
    return batch_hg(pairs, lam, spec, T, engine, diagnostics, threads)


def episode_accuracy(problem: HyperReprProblem, episode: Episode, lam, spec: DynamicsSpec,
                     T: Optional[int] = None) -> float:
    obj = problem.inner(episode.train)
    w = unroll(obj, lam, spec, T).final
    return float(np.mean(obj.predict(w, lam, episode.val.X) == episode.val.y))


def meta_accuracy(problem: HyperReprProblem, episodes: Sequence[Episode], lam,
                  spec: DynamicsSpec, T: Optional[int] = None) -> float:
    """Mean validation accuracy of heads trained with ``T`` inner steps."""
    return float(np.mean([episode_accuracy(problem, ep, lam, spec, T) for ep in episodes]))


def classic_train(problem: HyperReprProblem, sampler: EpisodeSampler, lam0, n_steps: int,
                  lr_lam: float, lr_w: float, batch_size: int = 4, resample_every: int = 5,
                  k_shot: Optional[int] = None, callback: Optional[Callable] = None):
    """Joint multitask training of ``lam`` and per-episode heads.

    A fresh batch is drawn every ``resample_every`` steps and its heads start
    from zero.  Returns the final hyperparameters.
    """
    lam = lam0 if isinstance(lam0, HyperParams) else HyperParams(lam0, problem.shape_hint)
    batch, ws = None, None
    for step in range(n_steps):
        if step % resample_every == 0:
            batch = sample_batch(sampler, batch_size, step // resample_every, "train", k_shot)
            ws = [np.zeros(problem.inner(ep.train).d) for ep in batch]
        f, g_lam, g_ws = classic_objective(problem, batch, lam, ws)
        if not np.isfinite(f):
            raise DivergenceError(0, step)
        ws = [w - lr_w * g for w, g in zip(ws, g_ws)]
        lam = lam.replace(lam.values - lr_lam * g_lam)
        if callback is not None:
            callback(step, lam, f)
    return lam


@dataclass(frozen=True, eq=False)
class FoldSpec:
    """Fold label in ``[0, K)`` for each of ``n`` rows."""

    K: int
    assignment: np.ndarray

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if a.size and (a.min() < 0 or a.max() >= self.K):
            raise ValueError("fold labels must lie in [0, K)")

    @classmethod
    def make(cls, n: int, K: int, seed=0) -> "FoldSpec":
        """Balanced random folds; ``K == n`` gives leave-one-out."""
        if not 2 <= K <= n:
            raise ValueError("need 2 <= K <= n")
        perm = as_seed(seed).generator().permutation(n)
        a = np.empty(n, dtype=np.int64)
        a[perm] = np.arange(n) % K
        return cls(K, a)

    def indices(self, j: int):
        val = np.flatnonzero(self.assignment == j)
        if val.size == 0:
            raise ValueError(f"empty fold {j}")
        return np.flatnonzero(self.assignment != j), val

    def to_dict(self) -> dict:
        return {"K": int(self.K), "assignment": [int(a) for a in self.assignment]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(int(d["K"]), d["assignment"])


def kfold_outer(d: Dataset, folds: FoldSpec, inner_factory: Callable[[Dataset], InnerObjective],
                lam, spec: DynamicsSpec, T: Optional[int] = None, fold: Optional[int] = None):
    """K-fold cross-validation error of unrolled models and its hypergradient.

    Model ``j`` is trained on every fold but ``j`` and scored (summed loss)
    on fold ``j``; the CV error is the mean over folds.  With ``fold`` set,
    only that fold is computed and its unscaled error/hypergradient returned,
    a stochastic estimate whose mean over a uniform fold equals the full value.
    """
    todo = range(folds.K) if fold is None else [int(fold)]
    t0 = time.perf_counter()
    errs, grads = [], []
    for j in todo:
        tr, va = folds.indices(j)
        obj = inner_factory(d.subset(tr, f"fold{j}_train"))
        E = ValidationLoss(obj, d.subset(va, f"fold{j}_val"))
        rep = reverse_hg(obj, E, lam, spec, T)
        errs.append(rep.f_value)
        grads.append(rep.grad)
    err, grad = _fold_mean(errs, grads)
    T_eff = spec.schedule.T if T is None else int(T)
    return err, HypergradReport(grad, err, T_eff, time.perf_counter() - t0,
                                grads if fold is None else None)


def _fold_mean(errs, grads):
    K = len(errs)
    e, g = 0.0, np.zeros_like(grads[0])
    for ej, gj in zip(errs, grads):
        e += ej
        g = g + gj
    return e / K, g / K


def kfold_stochastic_mean(d: Dataset, folds: FoldSpec, inner_factory, lam, spec, T=None):
    """Average of single-fold estimates over every fold (exhaustive enumeration)."""
    outs = [kfold_outer(d, folds, inner_factory, lam, spec, T, fold=j) for j in range(folds.K)]
    return _fold_mean([o[0] for o in outs], [o[1].grad for o in outs])


def gen_appendixC_data(seed=0, n: int = 90, d: int = 30, n_informative: int = 5,
                       noise_scale: float = 0.1, return_coef: bool = False):
    """Sparse linear regression data: ``n`` noisy points, ``n_informative`` of ``d`` features used."""
    rng = as_seed(seed).generator(3)
    X = rng.standard_normal((n, d))
    w = np.zeros(d)
    support = np.sort(rng.choice(d, size=n_informative, replace=False))
    w[support] = rng.uniform(1.0, 3.0, n_informative) * rng.choice([-1.0, 1.0], n_informative)
    y = X @ w + noise_scale * rng.standard_normal(n)
    data = Dataset(X, y, "sparse_regression")
    return (data, w) if return_coef else data


def mape(pred, target) -> float:
    """Mean absolute percentage error, in percent."""
    pred = np.ravel(np.asarray(pred, dtype=np.float64))
    target = np.ravel(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError("pred and target must have the same length")
    if np.any(target == 0):
        raise ValueError("MAPE undefined for zero targets")
    return float(100.0 * np.mean(np.abs(pred - target) / np.abs(target)))


def sample_pool_batch(data: Dataset, n_way: int, k_shot: int, n_val_per_class: int, B: int,
                      rng: np.random.Generator) -> list:
    """Episodes drawn from a labelled pool instead of the synthetic generator."""
    if data.n_classes is None:
        raise ValueError("episodes need a classification dataset")
    need = k_shot + n_val_per_class
    labels = np.unique(data.y)
    usable = [c for c in labels if np.count_nonzero(data.y == c) >= need]
    if len(usable) < n_way:
        raise ValueError(f"insufficient classes: {len(usable)} have >= {need} examples, "
                         f"need {n_way}")
    episodes = []
    for j in range(B):
        classes = rng.choice(usable, size=n_way, replace=False)
        tr_idx, va_idx, tr_lab, va_lab = [], [], [], []
        for label, c in enumerate(classes):
            rows = rng.choice(np.flatnonzero(data.y == c), size=need, replace=False)
            tr_idx.extend(rows[:k_shot])
            va_idx.extend(rows[k_shot:])
            tr_lab += [label] * k_shot
            va_lab += [label] * n_val_per_class
        episodes.append(Episode(Dataset(data.X[tr_idx], tr_lab, "train", n_way),
                                Dataset(data.X[va_idx], va_lab, "val", n_way), j))
    return episodes
