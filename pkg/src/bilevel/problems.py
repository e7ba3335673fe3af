"""Inner/outer objectives with analytic first- and mixed second-order oracles.

Every inner objective is a function ``L(w, lam; S)`` of the inner weights
``w`` (flat, size ``d``), the hyperparameters ``lam`` (flat, size ``m``) and
a data slot ``S``.  Losses are plain sums over examples.  The oracles are

``loss``        L
``grad_w``      dL/dw
``grad_lam``    explicit partial dL/dlam
``hvp_w``       (d^2 L / dw^2) v
``cross_jvp``   v^T (d^2 L / dlam dw), a vector of size m

Each oracle takes ``penalty``; with ``penalty=False`` only the data term is
used, which is what :class:`ValidationLoss` evaluates on held-out data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .core import Dataset, DimensionError, HyperParams


def lam_values(lam) -> np.ndarray:
    if isinstance(lam, HyperParams):
        return lam.values
    return np.ravel(np.asarray(lam, dtype=np.float64))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class InnerObjective:
    """Base class; subclasses fill in the oracles and ``d``/``m``."""

    is_quadratic = False

    def __init__(self, data: Dataset):
        self.data = data

    d: int
    m: int

    def with_data(self, data: Dataset) -> "InnerObjective":
        raise NotImplementedError

    def _check(self, w, lam, data):
        data = self.data if data is None else data
        w = np.ravel(np.asarray(w, dtype=np.float64))
        lam = lam_values(lam)
        if w.size != self.d:
            raise DimensionError(f"w has {w.size} entries, expected {self.d}")
        if lam.size != self.m:
            raise DimensionError(f"lambda has {lam.size} entries, expected {self.m}")
        if data.d_in != self.data.d_in:
            raise DimensionError(f"data has {data.d_in} features, expected {self.data.d_in}")
        return w, lam, data

    def _check_v(self, v, size):
        v = np.ravel(np.asarray(v, dtype=np.float64))
        if v.size != size:
            raise DimensionError(f"direction has {v.size} entries, expected {size}")
        return v

    def loss(self, w, lam, data=None, penalty=True) -> float:
        raise NotImplementedError

    def grad_w(self, w, lam, data=None, penalty=True) -> np.ndarray:
        raise NotImplementedError

    def grad_lam(self, w, lam, data=None, penalty=True) -> np.ndarray:
        raise NotImplementedError

    def hvp_w(self, w, lam, v, data=None, penalty=True) -> np.ndarray:
        raise NotImplementedError

    def cross_jvp(self, w, lam, v, data=None, penalty=True) -> np.ndarray:
        raise NotImplementedError

    def cross_matrix(self, w, lam, data=None, penalty=True) -> np.ndarray:
        """Dense (d, m) mixed partial, assembled row by row from ``cross_jvp``."""
        C = np.empty((self.d, self.m))
        e = np.zeros(self.d)
        for i in range(self.d):
            e[i] = 1.0
            C[i] = self.cross_jvp(w, lam, e, data, penalty)
            e[i] = 0.0
        return C

    def hessian_w(self, w, lam, data=None, penalty=True) -> np.ndarray:
        Hm = np.empty((self.d, self.d))
        e = np.zeros(self.d)
        for i in range(self.d):
            e[i] = 1.0
            Hm[:, i] = self.hvp_w(w, lam, e, data, penalty)
            e[i] = 0.0
        return Hm


class QuadraticObjective(InnerObjective):
    """Inner objective quadratic in ``w``: ``L = 1/2 w^T A w - b^T w + const``."""

    is_quadratic = True

    def hessian(self, lam) -> np.ndarray:
        return self.hessian_w(np.zeros(self.d), lam)

    def linear_term(self, lam) -> np.ndarray:
        return -self.grad_w(np.zeros(self.d), lam)

    def minimizer(self, lam) -> np.ndarray:
        A = self.hessian(lam)
        return sla.cho_solve(sla.cho_factor(A), self.linear_term(lam))


class FeatureMapRidge(QuadraticObjective):
    """``||y - X H w||^2 + rho ||w||^2`` with the feature map ``H`` as hyperparameter.

    ``H`` is ``lam`` reshaped to ``(d_in, k)`` (square by default).  With
    ``n_classes`` set, targets are one-hot encoded and ``w`` is a ``(k, C)``
    matrix flattened row-major.
    """

    def __init__(self, data: Dataset, rho: float = 1.0, k: Optional[int] = None):
        super().__init__(data)
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.rho = float(rho)
        self.k = data.d_in if k is None else int(k)
        self.n_out = 1 if data.n_classes is None else data.n_classes
        self.d = self.k * self.n_out
        self.m = data.d_in * self.k

    @property
    def shape_hint(self):
        return (self.data.d_in, self.k)

    def with_data(self, data):
        return FeatureMapRidge(data, self.rho, self.k)

    def _parts(self, w, lam, data):
        w, lam, data = self._check(w, lam, data)
        H = lam.reshape(data.d_in, self.k)
        W = w.reshape(self.k, self.n_out)
        Y = data.one_hot() if data.n_classes is not None else data.y[:, None]
        Z = data.X @ H
        return W, H, Z, Y, data

    def loss(self, w, lam, data=None, penalty=True):
        W, H, Z, Y, data = self._parts(w, lam, data)
        r = Z @ W - Y
        val = float(np.sum(r * r))
        if penalty:
            val += self.rho * float(np.sum(W * W))
        return val

    def grad_w(self, w, lam, data=None, penalty=True):
        W, H, Z, Y, data = self._parts(w, lam, data)
        G = 2.0 * Z.T @ (Z @ W - Y)
        if penalty:
            G += 2.0 * self.rho * W
        return G.ravel()

    def grad_lam(self, w, lam, data=None, penalty=True):
        W, H, Z, Y, data = self._parts(w, lam, data)
        R = Z @ W - Y
        return (2.0 * data.X.T @ R @ W.T).ravel()

    def hvp_w(self, w, lam, v, data=None, penalty=True):
        W, H, Z, Y, data = self._parts(w, lam, data)
        V = self._check_v(v, self.d).reshape(self.k, self.n_out)
        out = 2.0 * Z.T @ (Z @ V)
        if penalty:
            out += 2.0 * self.rho * V
        return out.ravel()

    def cross_jvp(self, w, lam, v, data=None, penalty=True):
        W, H, Z, Y, data = self._parts(w, lam, data)
        V = self._check_v(v, self.d).reshape(self.k, self.n_out)
        R = Z @ W - Y
        X = data.X
        return (2.0 * X.T @ R @ V.T + 2.0 * X.T @ (Z @ V) @ W.T).ravel()

    def hessian(self, lam):
        lam = lam_values(lam)
        if lam.size != self.m:
            raise DimensionError(f"lambda has {lam.size} entries, expected {self.m}")
        Z = self.data.X @ lam.reshape(self.data.d_in, self.k)
        A = 2.0 * (Z.T @ Z + self.rho * np.eye(self.k))
        return np.kron(A, np.eye(self.n_out)) if self.n_out > 1 else A

    def minimizer(self, lam):
        from .exact import ridge_closed_form

        H = lam_values(lam).reshape(self.data.d_in, self.k)
        Y = self.data.one_hot() if self.data.n_classes is not None else self.data.y
        return np.ravel(ridge_closed_form(self.data.X, Y, H, self.rho))

    def predict(self, w, lam, X):
        H = lam_values(lam).reshape(self.data.d_in, self.k)
        out = np.asarray(X, dtype=np.float64) @ H @ np.ravel(w).reshape(self.k, self.n_out)
        return out[:, 0] if self.n_out == 1 else out


class DiagTikhonovRidge(QuadraticObjective):
    """``||X w - y||^2 + sum_i exp(lam_i) w_i^2``.

    With ``tied=True`` a single scalar ``lam`` scales the whole penalty.
    """

    def __init__(self, data: Dataset, tied: bool = False):
        super().__init__(data)
        if data.n_classes is not None:
            raise ValueError("DiagTikhonovRidge needs real-valued targets")
        self.tied = bool(tied)
        self.d = data.d_in
        self.m = 1 if tied else data.d_in

    def with_data(self, data):
        return DiagTikhonovRidge(data, self.tied)

    def penalties(self, lam) -> np.ndarray:
        return np.broadcast_to(np.exp(lam_values(lam)), (self.d,))

    def _reduce(self, per_coord):
        return np.array([per_coord.sum()]) if self.tied else per_coord

    def loss(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        r = data.X @ w - data.y
        val = float(r @ r)
        if penalty:
            val += float(self.penalties(lam) @ (w * w))
        return val

    def grad_w(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        g = 2.0 * data.X.T @ (data.X @ w - data.y)
        if penalty:
            g += 2.0 * self.penalties(lam) * w
        return g

    def grad_lam(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        if not penalty:
            return np.zeros(self.m)
        return self._reduce(self.penalties(lam) * w * w)

    def hvp_w(self, w, lam, v, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        v = self._check_v(v, self.d)
        out = 2.0 * data.X.T @ (data.X @ v)
        if penalty:
            out += 2.0 * self.penalties(lam) * v
        return out

    def cross_jvp(self, w, lam, v, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        v = self._check_v(v, self.d)
        if not penalty:
            return np.zeros(self.m)
        return self._reduce(2.0 * self.penalties(lam) * w * v)

    def hessian(self, lam):
        X = self.data.X
        return 2.0 * (X.T @ X + np.diag(self.penalties(lam)))

    def linear_term(self, lam):
        return 2.0 * self.data.X.T @ self.data.y

    def predict(self, w, lam, X):
        return np.asarray(X, dtype=np.float64) @ np.ravel(w)


class SharedOffsetLinear(QuadraticObjective):
    """Model ``<w + lam, x>`` with square loss and ``rho ||w||^2``.

    ``lam`` is a common model that task-specific weights ``w`` deviate from.
    """

    def __init__(self, data: Dataset, rho: float = 1.0):
        super().__init__(data)
        if rho <= 0:
            raise ValueError("rho must be positive")
        if data.n_classes is not None:
            raise ValueError("SharedOffsetLinear needs real-valued targets")
        self.rho = float(rho)
        self.d = self.m = data.d_in

    def with_data(self, data):
        return SharedOffsetLinear(data, self.rho)

    def _resid(self, w, lam, data):
        return data.X @ (w + lam) - data.y

    def loss(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        r = self._resid(w, lam, data)
        val = float(r @ r)
        if penalty:
            val += self.rho * float(w @ w)
        return val

    def grad_w(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        g = 2.0 * data.X.T @ self._resid(w, lam, data)
        if penalty:
            g += 2.0 * self.rho * w
        return g

    def grad_lam(self, w, lam, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        return 2.0 * data.X.T @ self._resid(w, lam, data)

    def hvp_w(self, w, lam, v, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        v = self._check_v(v, self.d)
        out = 2.0 * data.X.T @ (data.X @ v)
        if penalty:
            out += 2.0 * self.rho * v
        return out

    def cross_jvp(self, w, lam, v, data=None, penalty=True):
        w, lam, data = self._check(w, lam, data)
        v = self._check_v(v, self.d)
        return 2.0 * data.X.T @ (data.X @ v)

    def hessian(self, lam):
        X = self.data.X
        return 2.0 * (X.T @ X + self.rho * np.eye(self.d))

    def linear_term(self, lam):
        X = self.data.X
        return 2.0 * X.T @ (self.data.y - X @ lam_values(lam))

    def predict(self, w, lam, X):
        return np.asarray(X, dtype=np.float64) @ (np.ravel(w) + lam_values(lam))


class SoftmaxRegression(InnerObjective):
    """Multinomial logistic regression on linear features ``X H``.

    ``w`` is a ``(k, C)`` weight matrix flattened row-major.  With ``k=None``
    the representation is the identity and there are no hyperparameters.
    ``l2`` adds ``l2 * ||w||^2`` (strong convexity with modulus ``2 * l2``).
    """

    def __init__(self, data: Dataset, k: Optional[int] = None, l2: float = 1e-2,
                 identity: bool = False):
        super().__init__(data)
        if data.n_classes is None:
            raise ValueError("SoftmaxRegression needs class-index targets")
        if l2 < 0:
            raise ValueError("l2 must be non-negative")
        self.identity = bool(identity)
        self.k = data.d_in if (k is None or identity) else int(k)
        self.C = data.n_classes
        self.l2 = float(l2)
        self.d = self.k * self.C
        self.m = 0 if self.identity else data.d_in * self.k

    @property
    def shape_hint(self):
        return None if self.identity else (self.data.d_in, self.k)

    def with_data(self, data):
        return SoftmaxRegression(data, self.k, self.l2, self.identity)

    def features(self, lam, X):
        X = np.asarray(X, dtype=np.float64)
        if self.identity:
            return X
        return X @ lam_values(lam).reshape(X.shape[1], self.k)

    def _parts(self, w, lam, data):
        w, lam, data = self._check(w, lam, data)
        W = w.reshape(self.k, self.C)
        Z = self.features(lam, data.X)
        logits = Z @ W
        return W, Z, logits, data

    def _probs(self, logits):
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    @staticmethod
    def _softmax_jvp(P, D):
        # row-wise (diag(p) - p p^T) d
        PD = P * D
        return PD - P * PD.sum(axis=1, keepdims=True)

    def loss(self, w, lam, data=None, penalty=True):
        W, Z, logits, data = self._parts(w, lam, data)
        ls = log_softmax(logits)
        val = -float(ls[np.arange(data.n), data.y].sum())
        if penalty:
            val += self.l2 * float(np.sum(W * W))
        return val

    def grad_w(self, w, lam, data=None, penalty=True):
        W, Z, logits, data = self._parts(w, lam, data)
        G = self._probs(logits) - data.one_hot()
        out = Z.T @ G
        if penalty:
            out += 2.0 * self.l2 * W
        return out.ravel()

    def grad_lam(self, w, lam, data=None, penalty=True):
        if self.identity:
            return np.zeros(0)
        W, Z, logits, data = self._parts(w, lam, data)
        G = self._probs(logits) - data.one_hot()
        return (data.X.T @ G @ W.T).ravel()

    def hvp_w(self, w, lam, v, data=None, penalty=True):
        W, Z, logits, data = self._parts(w, lam, data)
        V = self._check_v(v, self.d).reshape(self.k, self.C)
        P = self._probs(logits)
        out = Z.T @ self._softmax_jvp(P, Z @ V)
        if penalty:
            out += 2.0 * self.l2 * V
        return out.ravel()

    def cross_jvp(self, w, lam, v, data=None, penalty=True):
        if self.identity:
            return np.zeros(0)
        W, Z, logits, data = self._parts(w, lam, data)
        V = self._check_v(v, self.d).reshape(self.k, self.C)
        P = self._probs(logits)
        G = P - data.one_hot()
        X = data.X
        return (X.T @ G @ V.T + X.T @ self._softmax_jvp(P, Z @ V) @ W.T).ravel()

    def predict_proba(self, w, lam, X):
        return self._probs(self.features(lam, X) @ np.ravel(w).reshape(self.k, self.C))

    def predict(self, w, lam, X):
        return self.predict_proba(w, lam, X).argmax(axis=1)


class ValidationLoss:
    """Outer objective: the data term of ``inner`` evaluated on ``data``.

    For ridge-type inner problems this is the validation squared error; for
    feature-map objectives the hyperparameters enter the outer loss through
    the features, so ``grad_lam`` is nonzero.
    """

    def __init__(self, inner: InnerObjective, data: Dataset, include_penalty: bool = False):
        self.inner = inner
        self.data = data
        self.include_penalty = include_penalty

    def loss(self, w, lam) -> float:
        return self.inner.loss(w, lam, self.data, penalty=self.include_penalty)

    def grad_w(self, w, lam) -> np.ndarray:
        return self.inner.grad_w(w, lam, self.data, penalty=self.include_penalty)

    def grad_lam(self, w, lam) -> np.ndarray:
        return self.inner.grad_lam(w, lam, self.data, penalty=self.include_penalty)

    def grads(self, w, lam):
        return self.grad_w(w, lam), self.grad_lam(w, lam)


def outer_grads(E: ValidationLoss, w, lam):
    """``(dE/dw, explicit dE/dlam)`` at ``(w, lam)``."""
    return E.grads(w, lam)


@dataclass(frozen=True)
class BilevelProblem:
    """A single inner/outer pair (one task, or a plain HO problem)."""

    inner: InnerObjective
    outer: ValidationLoss

    @classmethod
    def from_split(cls, inner: InnerObjective, val: Dataset) -> "BilevelProblem":
        return cls(inner, ValidationLoss(inner, val))

    @property
    def m(self) -> int:
        return self.inner.m

    @property
    def d(self) -> int:
        return self.inner.d


# functional forms of the oracles, for callers that prefer obj-first calls
def loss(obj: InnerObjective, w, lam, S: Optional[Dataset] = None) -> float:
    return obj.loss(w, lam, S)


def grad_w(obj: InnerObjective, w, lam, S: Optional[Dataset] = None) -> np.ndarray:
    return obj.grad_w(w, lam, S)


def hvp_w(obj: InnerObjective, w, lam, S, v) -> np.ndarray:
    return obj.hvp_w(w, lam, v, S)


def cross_jvp(obj: InnerObjective, w, lam, S, v) -> np.ndarray:
    return obj.cross_jvp(w, lam, v, S)
