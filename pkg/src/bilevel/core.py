"""Shared domain types: datasets, parameter vectors, step schedules, tapes.

All arrays are float64 (class indices are int64).  Every type is frozen
after construction; arrays are copied and flagged read-only so they can be
shared between workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class BilevelError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(BilevelError, ValueError):
    pass


class DivergenceError(BilevelError, FloatingPointError):
    """An unrolled iterate became non-finite or exploded.

    ``step`` is the (1-based) inner step at which it happened; ``iteration``
    is filled in by outer loops that catch and re-raise it.
    """

    def __init__(self, step: int, iteration: Optional[int] = None):
        self.step = step
        self.iteration = iteration
        msg = f"divergence at step {step}"
        if iteration is not None:
            msg += f" (hyperiteration {iteration})"
        super().__init__(msg)


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _float_list(a) -> list:
    # repr() of a Python float is the shortest string that round-trips
    return [float(v) for v in np.ravel(a)]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix ``X`` (n, d_in) with targets ``y``.

    ``n_classes`` is set for classification; ``y`` then holds class indices.
    """

    X: np.ndarray
    y: np.ndarray
    name: str = ""
    n_classes: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DimensionError("X must be a 2-D matrix")
        if self.n_classes is not None:
            y = np.asarray(self.y)
            if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("class targets must be integers")
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"class indices must lie in [0, {self.n_classes})")
            object.__setattr__(self, "y", _frozen(y, np.int64))
        else:
            y = np.asarray(self.y, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise ValueError("targets contain non-finite entries")
            object.__setattr__(self, "y", _frozen(y))
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DimensionError(
                f"row count mismatch: X has {X.shape[0]} rows, y has shape {y.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "X", _frozen(X))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], name if name is not None else self.name,
                       self.n_classes)

    def one_hot(self) -> np.ndarray:
        if self.n_classes is None:
            raise ValueError("one_hot() needs a classification dataset")
        Y = np.zeros((self.n, self.n_classes))
        Y[np.arange(self.n), self.y] = 1.0
        return Y

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.name == other.name and self.n_classes == other.n_classes
                and np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y))

    def to_dict(self) -> dict:
        return {"name": self.name, "n_classes": self.n_classes,
                "X": [_float_list(r) for r in self.X],
                "y": [int(v) for v in self.y] if self.n_classes is not None
                else _float_list(self.y)}

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        X = np.array(d["X"], dtype=np.float64).reshape(len(d["X"]), -1)
        return cls(X, d["y"], d.get("name", ""), d.get("n_classes"))

    def to_csv(self, path) -> None:
        """Write ``x0..x{d-1},y`` with a header row; floats at 17 significant digits."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(self.d_in)] + ["y"])
            for row, t in zip(self.X, self.y):
                tgt = str(int(t)) if self.n_classes is not None else f"{t:.17g}"
                w.writerow([f"{v:.17g}" for v in row] + [tgt])

    @classmethod
    def from_csv(cls, path, name: Optional[str] = None,
                 n_classes: Optional[int] = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if "y" not in header:
            raise ValueError(f"{path}: missing target column 'y'")
        yi = header.index("y")
        xcols = sorted((c for c in header if c != "y"), key=lambda c: int(c[1:]))
        xi = [header.index(c) for c in xcols]
        X = np.array([[float(r[i]) for i in xi] for r in body], dtype=np.float64)
        X = X.reshape(len(body), len(xi))
        y = [float(r[yi]) for r in body]
        if name is None:
            name = os.path.splitext(os.path.basename(str(path)))[0]
        return cls(X, y, name, n_classes)


def save_manifest(path, datasets: dict, flags: Optional[dict] = None) -> None:
    """Store each dataset as CSV next to a JSON manifest listing paths and split flags."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for split, ds in datasets.items():
        fname = f"{ds.name or split}_{split}.csv"
        ds.to_csv(os.path.join(base, fname))
        entries.append({"split": split, "path": fname, "name": ds.name,
                        "n_classes": ds.n_classes})
    with open(path, "w") as fh:
        json.dump({"datasets": entries, "flags": flags or {}}, fh, indent=2)


def load_manifest(path) -> tuple[dict, dict]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        m = json.load(fh)
    out = {}
    for e in m["datasets"]:
        out[e["split"]] = Dataset.from_csv(os.path.join(base, e["path"]), e.get("name"),
                                           e.get("n_classes"))
    return out, m.get("flags", {})


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Outer variable: flat vector with optional matrix view and box bounds."""

    values: np.ndarray
    shape_hint: Optional[tuple] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        v = _frozen(np.ravel(np.asarray(self.values, dtype=np.float64)))
        object.__setattr__(self, "values", v)
        if not np.all(np.isfinite(v)):
            raise ValueError("hyperparameters must be finite")
        if self.shape_hint is not None:
            r, c = (int(s) for s in self.shape_hint)
            if r * c != v.size:
                raise DimensionError(f"shape_hint {(r, c)} incompatible with {v.size} values")
            object.__setattr__(self, "shape_hint", (r, c))
        for name in ("lower", "upper"):
            b = getattr(self, name)
            if b is not None:
                b = np.broadcast_to(np.asarray(b, dtype=np.float64), v.shape)
                object.__setattr__(self, name, _frozen(b))
        if self.lower is not None and np.any(v < self.lower):
            raise ValueError("hyperparameters below lower bound")
        if self.upper is not None and np.any(v > self.upper):
            raise ValueError("hyperparameters above upper bound")

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def bounded(self) -> bool:
        return self.lower is not None or self.upper is not None

    def matrix(self) -> np.ndarray:
        if self.shape_hint is None:
            raise ValueError("no shape_hint: cannot view hyperparameters as a matrix")
        return self.values.reshape(self.shape_hint)

    def project(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if self.lower is not None:
            v = np.maximum(v, self.lower)
        if self.upper is not None:
            v = np.minimum(v, self.upper)
        return v

    def replace(self, values) -> "HyperParams":
        """Same shape/domain, new (projected) values."""
        return HyperParams(self.project(np.ravel(values)), self.shape_hint, self.lower, self.upper)

    def __eq__(self, other):
        if not isinstance(other, HyperParams):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b))

        return (np.array_equal(self.values, other.values) and self.shape_hint == other.shape_hint
                and same(self.lower, other.lower) and same(self.upper, other.upper))

    def to_dict(self) -> dict:
        return {"values": _float_list(self.values),
                "shape_hint": list(self.shape_hint) if self.shape_hint else None,
                "lower": None if self.lower is None else _float_list(self.lower),
                "upper": None if self.upper is None else _float_list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        sh = d.get("shape_hint")
        return cls(d["values"], tuple(sh) if sh else None, d.get("lower"), d.get("upper"))


def as_hyper(lam, shape_hint=None) -> HyperParams:
    if isinstance(lam, HyperParams):
        return lam
    return HyperParams(lam, shape_hint)


@dataclass(frozen=True, eq=False)
class InnerParams:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(np.ravel(np.asarray(self.values, dtype=np.float64)))
        if not np.all(np.isfinite(v)):
            raise ValueError("inner parameters must be finite")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, InnerParams):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {"values": _float_list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "InnerParams":
        return cls(d["values"])


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Inner step sizes ``etas`` (one per step) and an optional heavy-ball factor."""

    etas: np.ndarray
    momentum: float = 0.0

    def __post_init__(self):
        e = _frozen(np.ravel(np.asarray(self.etas, dtype=np.float64)))
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise ValueError("step sizes must be positive and finite")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "etas", e)
        object.__setattr__(self, "momentum", float(self.momentum))

    @classmethod
    def constant(cls, eta: float, T: int, momentum: float = 0.0) -> "StepSchedule":
        return cls(np.full(int(T), float(eta)), momentum)

    @property
    def T(self) -> int:
        return self.etas.size

    def truncate(self, T: int) -> "StepSchedule":
        if T > self.T:
            raise ValueError(f"schedule has {self.T} steps, {T} requested")
        return StepSchedule(self.etas[:T], self.momentum)

    def __eq__(self, other):
        if not isinstance(other, StepSchedule):
            return NotImplemented
        return self.momentum == other.momentum and np.array_equal(self.etas, other.etas)

    def to_dict(self) -> dict:
        return {"etas": _float_list(self.etas), "momentum": self.momentum}

    @classmethod
    def from_dict(cls, d: dict) -> "StepSchedule":
        return cls(d["etas"], d.get("momentum", 0.0))


@dataclass(frozen=True, eq=False)
class TrajectoryTape:
    """Iterates ``w_0..w_T`` stacked as a (T+1, d) array, plus velocities for momentum."""

    iterates: np.ndarray
    schedule: StepSchedule
    aux: Optional[np.ndarray] = None

    def __post_init__(self):
        it = _frozen(np.asarray(self.iterates, dtype=np.float64))
        if it.ndim != 2:
            raise DimensionError("iterates must be a (T+1, d) array")
        if it.shape[0] != self.schedule.T + 1:
            raise DimensionError(
                f"tape has {it.shape[0]} iterates for a {self.schedule.T}-step schedule")
        object.__setattr__(self, "iterates", it)
        if (self.aux is not None) != (self.schedule.momentum > 0):
            raise ValueError("velocities must be recorded iff momentum > 0")
        if self.aux is not None:
            aux = _frozen(np.asarray(self.aux, dtype=np.float64))
            if aux.shape != it.shape:
                raise DimensionError("velocity tape shape must match iterates")
            object.__setattr__(self, "aux", aux)

    @property
    def T(self) -> int:
        return self.iterates.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def __len__(self):
        return self.iterates.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryTape):
            return NotImplemented
        aux_eq = (self.aux is None and other.aux is None) or (
            self.aux is not None and other.aux is not None
            and np.array_equal(self.aux, other.aux))
        return (self.schedule == other.schedule and aux_eq
                and np.array_equal(self.iterates, other.iterates))

    def to_dict(self) -> dict:
        return {"iterates": [_float_list(r) for r in self.iterates],
                "schedule": self.schedule.to_dict(),
                "aux": None if self.aux is None else [_float_list(r) for r in self.aux]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryTape":
        sched = StepSchedule.from_dict(d["schedule"])
        it = np.array(d["iterates"], dtype=np.float64).reshape(sched.T + 1, -1)
        aux = None if d.get("aux") is None else np.array(d["aux"]).reshape(it.shape)
        return cls(it, sched, aux)


@dataclass(frozen=True, eq=False)
class Episode:
    train: Dataset
    val: Dataset
    task_id: int = 0
    disjoint: bool = True

    def __post_init__(self):
        if self.train.d_in != self.val.d_in:
            raise DimensionError("train and val must share the input dimension")
        if self.train.n_classes != self.val.n_classes:
            raise DimensionError("train and val must share the number of classes")

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.task_id == other.task_id and self.disjoint == other.disjoint
                and self.train == other.train and self.val == other.val)

    def to_dict(self) -> dict:
        return {"task_id": int(self.task_id), "disjoint": bool(self.disjoint),
                "train": self.train.to_dict(), "val": self.val.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(Dataset.from_dict(d["train"]), Dataset.from_dict(d["val"]),
                   int(d["task_id"]), bool(d.get("disjoint", True)))


@dataclass(frozen=True)
class RngSeed:
    seed: int = 0

    def __post_init__(self):
        s = int(self.seed)
        if not 0 <= s < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", s)

    def generator(self, *stream: int) -> np.random.Generator:
        """Independent PCG64 stream keyed by ``(seed, *stream)``."""
        return np.random.default_rng([self.seed, *(int(s) for s in stream)])


def as_seed(seed) -> RngSeed:
    return seed if isinstance(seed, RngSeed) else RngSeed(seed)


def split_dataset(d: Dataset, fractions: Sequence[float], seed=0):
    """Randomly partition ``d`` into (train, val, test).

    Sizes are ``floor(n * f_i)`` with the remainder added to train.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be three positive numbers summing to 1")
    n = d.n
    if n < 3:
        raise ValueError("need at least 3 rows to split")
    # the small epsilon keeps e.g. 90 * (1/3) from flooring to 29
    sizes = np.floor(n * fr + 1e-9).astype(int)
    sizes[0] += n - sizes.sum()
    if np.any(sizes == 0):
        raise ValueError("empty split")
    perm = as_seed(seed).generator().permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return (d.subset(np.sort(perm[:a]), f"{d.name}_train"),
            d.subset(np.sort(perm[a:b]), f"{d.name}_val"),
            d.subset(np.sort(perm[b:]), f"{d.name}_test"))


def split_indices(n: int, fractions: Sequence[float], seed=0):
    """Row indices that :func:`split_dataset` would assign to each part."""
    dummy = Dataset(np.arange(n, dtype=np.float64)[:, None], np.zeros(n))
    return tuple(part.X[:, 0].astype(np.int64) for part in split_dataset(dummy, fractions, seed))
