"""scikit-learn compatible wrappers around the hypergradient machinery.

``HyperRidgeRegressor`` tunes per-feature ridge penalties on a held-out
split and then predicts like any regressor.  ``HyperRepresentation`` learns
a shared linear feature map from few-shot episodes drawn out of a labelled
pool and exposes it through ``transform``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset, check_features, check_positive
from .core import HyperParams
from .dynamics import DynamicsSpec, unroll
from .hypergrad import approx_hg, forward_hg, implicit_hg_report, reverse_hg
from .meta import HyperReprProblem, meta_hypergrad, sample_pool_batch
from .outer import DriverConfig, hyper_iterate
from .problems import DiagTikhonovRidge, ValidationLoss

_ENGINES = {"reverse": reverse_hg, "forward": forward_hg, "approx": approx_hg}


class HyperRidgeRegressor(RegressorMixin, BaseEstimator):
    """Linear regression with one ridge penalty ``exp(lam_i)`` per feature.

    The penalties are fit by hypergradient descent on the validation error
    of ``T`` gradient steps (``hypergrad`` in ``reverse``, ``forward``,
    ``approx``) or of the exact ridge solution (``hypergrad="implicit"``).

    Parameters
    ----------
    T : int
        Inner gradient steps.
    eta : float or None
        Inner step size; ``None`` picks one that is stable on the whole box.
    hypergrad : str
    n_hyper_iter, lr : int, float
        Adam iterations and learning rate on ``lam``.
    lam_init, lam_bounds : float, (float, float)
    validation_fraction : float
        Share of ``X`` held out for the outer loss when no explicit
        validation set is passed to :meth:`fit`.
    random_state : int
    """

    def __init__(self, T=100, eta=None, hypergrad="reverse", n_hyper_iter=300, lr=0.1,
                 lam_init=0.0, lam_bounds=(-10.0, 6.0), validation_fraction=0.5,
                 random_state=0):
        self.T = T
        self.eta = eta
        self.hypergrad = hypergrad
        self.n_hyper_iter = n_hyper_iter
        self.lr = lr
        self.lam_init = lam_init
        self.lam_bounds = lam_bounds
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        if self.hypergrad not in (*_ENGINES, "implicit"):
            raise ValueError(f"unknown hypergrad {self.hypergrad!r}")
        data, _ = check_dataset(X, y)
        if X_val is None:
            f = float(self.validation_fraction)
            if not 0 < f < 1:
                raise ValueError("validation_fraction must lie in (0, 1)")
            tr, va = _two_way(data, f, self.random_state)
        else:
            tr = data
            va, _ = check_dataset(X_val, y_val)
        inner = DiagTikhonovRidge(tr)
        E = ValidationLoss(inner, va)
        lo, hi = self.lam_bounds
        lam0 = HyperParams(np.full(inner.d, float(self.lam_init)), None, lo, hi)
        if self.hypergrad == "implicit":
            def hg(lam, _b):
                return implicit_hg_report(inner, E, lam)
            spec = None
        else:
            if self.eta is None:
                eta = 1.0 / (2.0 * (np.linalg.eigvalsh(tr.X.T @ tr.X)[-1] + np.exp(hi)))
            else:
                eta = check_positive(self.eta, "eta")
            spec = DynamicsSpec.gd(eta, int(self.T))
            engine = _ENGINES[self.hypergrad]

            def hg(lam, _b):
                return engine(inner, E, lam, spec)

        log = hyper_iterate(DriverConfig(hypergrad=hg, max_iters=int(self.n_hyper_iter),
                                         optimizer="adam", lr=self.lr), lam0)
        self.lambda_ = log.lam.values.copy()
        self.coef_ = inner.minimizer(log.lam) if spec is None else unroll(inner, log.lam,
                                                                          spec).final.copy()
        self.run_log_ = log
        self.n_features_in_ = data.d_in
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_features(X, self.n_features_in_) @ self.coef_


def _two_way(data, frac, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    n_val = max(1, int(round(frac * data.n)))
    if n_val >= data.n:
        raise ValueError("validation split leaves no training rows")
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


class HyperRepresentation(TransformerMixin, BaseEstimator):
    """Linear representation ``x -> x H`` meta-learned from few-shot episodes.

    ``fit(X, y)`` treats ``(X, y)`` as a labelled pool, draws ``n_way``-way
    ``k_shot``-shot episodes from it and runs Adam on ``H`` with the batch
    hypergradient of the chosen ``mode``.
    """

    def __init__(self, n_components=None, T=5, eta=0.1, l2=1e-2, n_way=5, k_shot=1,
                 n_val_per_class=5, batch_size=8, n_hyper_iter=100, lr=0.01, lr_decay=1e-5,
                 mode="full", random_state=0):
        self.n_components = n_components
        self.T = T
        self.eta = eta
        self.l2 = l2
        self.n_way = n_way
        self.k_shot = k_shot
        self.n_val_per_class = n_val_per_class
        self.batch_size = batch_size
        self.n_hyper_iter = n_hyper_iter
        self.lr = lr
        self.lr_decay = lr_decay
        self.mode = mode
        self.random_state = random_state

    def fit(self, X, y):
        data, classes = check_dataset(X, y, classification=True)
        problem = HyperReprProblem(data.d_in, self.n_components, self.l2)
        spec = DynamicsSpec.gd(check_positive(self.eta, "eta"), int(self.T))
        rng = np.random.default_rng(self.random_state)

        def batcher(_it):
            return sample_pool_batch(data, self.n_way, self.k_shot, self.n_val_per_class,
                                     self.batch_size, rng)

        def hg(lam, batch):
            return meta_hypergrad(problem, batch, lam, spec, mode=self.mode)

        log = hyper_iterate(DriverConfig(hypergrad=hg, max_iters=int(self.n_hyper_iter),
                                         optimizer="adam", lr=self.lr, lr_decay=self.lr_decay,
                                         batcher=batcher), problem.identity_lambda())
        self.components_ = log.lam.matrix().copy()
        self.classes_ = classes
        self.run_log_ = log
        self.n_features_in_ = data.d_in
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return check_features(X, self.n_features_in_) @ self.components_
