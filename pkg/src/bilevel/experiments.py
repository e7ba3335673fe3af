"""Desk-scale experiment runners used by the command-line harness.

Each runner takes a parameter dict (see ``DEFAULTS``) and returns plain
Python results; writing files is left to :mod:`bilevel.cli`.
"""

from __future__ import annotations

import os
import time
from typing import Optional

import numpy as np

from .core import Dataset, HyperParams, split_dataset
from .dynamics import DynamicsSpec, unroll
from .exact import certificate, eval_f_exact
from .hypergrad import implicit_hg_report, reverse_hg
from .meta import (EpisodeSampler, HyperReprProblem, classic_train, gen_appendixC_data,
                   mape, meta_accuracy, meta_hypergrad, sample_batch)
from .outer import DriverConfig, StopPolicy, hyper_iterate
from .problems import BilevelProblem, DiagTikhonovRidge, FeatureMapRidge, ValidationLoss

DEFAULTS = {
    "effect_of_t": {
        "T_list": [1, 4, 16, 64, 256], "eta": 0.0, "rho": 1.0, "lr": 0.002, "momentum": 0.9,
        "hyper_iters": 200, "n_classes": 10, "feature_dim": 12, "per_class_train": 3,
        "per_class_val": 3, "per_class_test": 15, "noise_scale": 0.3, "eval_every": 10,
        "timing_repeats": 5,
    },
    "ridge_diag": {
        "T_list": [10, 50, 100, 250], "noise_scale": 0.02, "lr": 0.3, "hyper_iters": 1000,
        "lam_init": 0.0, "lam_lower": -10.0, "lam_upper": 6.0,
    },
    "meta": {
        "T_list": [3, 5, 8, 12], "modes": ["full", "bilevel_train", "approx", "approx_train",
                                           "classic"],
        "eta": 0.1, "l2": 0.01, "lr": 0.01, "lr_decay": 1e-5, "hyper_iters": 50,
        "batch_size": 8, "n_way": 5, "k_shot": 1, "n_val_per_class": 15,
        "k_shot_no_val": 16, "n_classes_total": 60, "feature_dim": 16, "latent_dim": 4,
        "noise_scale": 0.3, "nuisance_scale": 1.0, "meta_val_episodes": 20,
        "meta_test_episodes": 40, "eval_every": 10, "patience": 50, "T": 5,
        "classic_lr": 0.001, "classic_lr_w": 0.1, "classic_batch": 4, "classic_resample": 5,
    },
    "check": {"n_instances": 20, "seed_offset": 0},
}


def params_for(experiment: str, overrides: Optional[dict] = None) -> dict:
    p = dict(DEFAULTS[experiment])
    p.update(overrides or {})
    return p


def linear_fit_r2(x, y) -> float:
    """R^2 of the least-squares line through ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def time_reverse_hg(obj, E, lam, eta: float, T_list, repeats: int = 5) -> list:
    """Median wall time of :func:`reverse_hg` for each ``T``."""
    out = []
    for T in T_list:
        spec = DynamicsSpec.gd(eta, T)
        reverse_hg(obj, E, lam, spec, T)  # warm-up
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            reverse_hg(obj, E, lam, spec, T)
            ts.append(time.perf_counter() - t0)
        out.append(float(np.median(ts)))
    return out


# ---------------------------------------------------------------- sparse ridge


def ridge_diag(params: dict, seed: int = 0) -> dict:
    """Tune a per-feature ridge penalty on sparse synthetic data for several ``T``.

    Returns the MAPE table rows (one per ``T`` plus the exact-hypergradient
    run) and the final hyperparameters of each run.
    """
    p = params
    data = gen_appendixC_data(seed, noise_scale=p["noise_scale"])
    tr, va, te = split_dataset(data, (1 / 3, 1 / 3, 1 / 3), seed)
    inner = DiagTikhonovRidge(tr)
    E = ValidationLoss(inner, va)
    problem = BilevelProblem(inner, E)
    d = inner.d
    lam0 = HyperParams(np.full(d, p["lam_init"]), None, p["lam_lower"], p["lam_upper"])
    # one step size that is stable for every lam inside the box
    nu_max = 2.0 * (np.linalg.eigvalsh(tr.X.T @ tr.X)[-1] + np.exp(p["lam_upper"]))
    eta = 1.0 / nu_max
    rows = []
    finals = {}

    def scores(w):
        return mape(va.X @ w, va.y), mape(te.X @ w, te.y)

    for T in p["T_list"]:
        spec = DynamicsSpec.gd(eta, T)
        cfg = DriverConfig(hypergrad=lambda lam, _b, spec=spec: reverse_hg(inner, E, lam, spec),
                           max_iters=p["hyper_iters"], optimizer="adam", lr=p["lr"])
        log = hyper_iterate(cfg, lam0)
        w = unroll(inner, log.lam, spec).final
        v, t = scores(w)
        rows.append({"T": str(T), "val_mape": v, "test_mape": t})
        finals[str(T)] = log.lam
    cfg = DriverConfig(hypergrad=lambda lam, _b: implicit_hg_report(inner, E, lam),
                       max_iters=p["hyper_iters"], optimizer="adam", lr=p["lr"])
    log = hyper_iterate(cfg, lam0)
    v, t = scores(inner.minimizer(log.lam))
    rows.append({"T": "Exact", "val_mape": v, "test_mape": t})
    finals["Exact"] = log.lam
    return {"rows": rows, "lam": finals, "eta": eta,
            "f_exact_final": eval_f_exact(problem, log.lam)}


# ---------------------------------------------------------------- effect of T


def feature_map_data(params: dict, seed: int = 0):
    """Gaussian class blobs split into train/val/test with fixed counts per class."""
    p = params
    rng = np.random.default_rng([int(seed), 11])
    C, d = p["n_classes"], p["feature_dim"]
    means = rng.standard_normal((C, d))
    sets = []
    for key in ("per_class_train", "per_class_val", "per_class_test"):
        k = p[key]
        y = np.repeat(np.arange(C), k)
        X = means[y] + p["noise_scale"] * rng.standard_normal((C * k, d)) * np.sqrt(d)
        sets.append(Dataset(X / np.sqrt(d), y, key.split("_")[-1], C))
    return tuple(sets)


def effect_of_t(params: dict, seed: int = 0) -> dict:
    """Optimize a linear feature map ``H`` on ``f_T`` for each ``T`` and on ``f``.

    Every run uses momentum gradient descent on ``H`` with the same start,
    step size and momentum.  Returns per-hyperiteration curves, per-run wall
    times and the runtime-linearity fit.
    """
    p = params
    tr, va, te = feature_map_data(p, seed)
    inner = FeatureMapRidge(tr, p["rho"])
    E = ValidationLoss(inner, va)
    problem = BilevelProblem(inner, E)
    H0 = HyperParams(np.eye(tr.d_in), inner.shape_hint)
    eta = p["eta"] if p["eta"] > 0 else 0.5 / certificate(inner, H0).nu

    def test_acc(w, lam):
        pred = inner.predict(w, lam, te.X).argmax(axis=1)
        return float(np.mean(pred == te.y))

    curves, times = [], []
    runs = [(str(T), T) for T in p["T_list"]] + [("Exact", None)]
    for label, T in runs:
        spec = DynamicsSpec.gd(eta, T) if T is not None else None
        rows = []

        def hg(lam, _b, spec=spec):
            if spec is None:
                return implicit_hg_report(inner, E, lam)
            return reverse_hg(inner, E, lam, spec)

        def record(it, state, rep, spec=spec, rows=rows, label=label):
            lam = state.lam
            if it % p["eval_every"] and it != p["hyper_iters"]:
                return
            w = inner.minimizer(lam) if spec is None else unroll(inner, lam, spec).final
            rows.append({"hyperiter": it, "T": label, "fT": rep.f_value,
                         "f_exact": eval_f_exact(problem, lam), "test_metric": test_acc(w, lam)})

        t0 = time.perf_counter()
        hyper_iterate(DriverConfig(hypergrad=hg, max_iters=p["hyper_iters"],
                                   optimizer="momentum", lr=p["lr"], momentum=p["momentum"],
                                   callback=record), H0)
        times.append({"T": label, "wall_time_s": time.perf_counter() - t0})
        curves.extend(rows)
    T_num = [float(t["T"]) for t in times if t["T"] != "Exact"]
    hg_times = time_reverse_hg(inner, E, H0, eta, p["T_list"], p["timing_repeats"])
    for t, h in zip(times, hg_times):
        t["hg_time_s"] = h
    out = {"curves": curves, "times": times, "eta": eta}
    if len(T_num) >= 3:
        out["r2_run"] = linear_fit_r2(T_num, [t["wall_time_s"] for t in times[:len(T_num)]])
        out["r2_hg"] = linear_fit_r2(T_num, hg_times)
    return out


# ---------------------------------------------------------------- meta-learning


def make_sampler(p: dict, seed: int) -> EpisodeSampler:
    return EpisodeSampler(n_classes_total=p["n_classes_total"], n_way=p["n_way"],
                          k_shot=p["k_shot"], n_val_per_class=p["n_val_per_class"],
                          feature_dim=p["feature_dim"], latent_dim=p["latent_dim"],
                          noise_scale=p["noise_scale"], nuisance_scale=p["nuisance_scale"],
                          seed=seed)


def meta_run(params: dict, mode: str, T: int, seed: int = 0, log_path=None,
             threads: int = 1) -> dict:
    """Train a hyper-representation with one ablation mode and inner horizon ``T``.

    The meta-validation metric is evaluated with the reference protocol
    (``k_shot`` training examples, ``T`` inner steps) on a fixed set of
    meta-validation episodes, so it is a deterministic function of ``lam``.
    """
    p = params
    sampler = make_sampler(p, seed)
    problem = HyperReprProblem(p["feature_dim"], None, p["l2"])
    spec = DynamicsSpec.gd(p["eta"], T)
    val_eps = sample_batch(sampler, p["meta_val_episodes"], 0, "val")
    test_eps = sample_batch(sampler, p["meta_test_episodes"], 0, "test")
    lam0 = problem.identity_lambda()
    no_val = mode in ("bilevel_train", "approx_train", "classic")
    shots = p["k_shot_no_val"] if no_val else None

    def metric(lam):
        return meta_accuracy(problem, val_eps, lam, spec)

    if mode == "classic":
        lam = classic_train(problem, sampler, lam0, p["hyper_iters"] * p["classic_resample"],
                            p["classic_lr"], p["classic_lr_w"], p["classic_batch"],
                            p["classic_resample"], shots)
        return {"mode": mode, "T": T, "meta_val_acc": metric(lam),
                "meta_test_acc": meta_accuracy(problem, test_eps, lam, spec), "log": None,
                "lam": lam}

    def batcher(it):
        return sample_batch(sampler, p["batch_size"], it, "train", shots)

    def hg(lam, batch):
        return meta_hypergrad(problem, batch, lam, spec, T, mode, threads=threads)

    cfg = DriverConfig(hypergrad=hg, max_iters=p["hyper_iters"], optimizer="adam", lr=p["lr"],
                       lr_decay=p["lr_decay"], batcher=batcher, metric=metric,
                       stop=StopPolicy(p["patience"], "meta_val_accuracy", p["eval_every"]),
                       log_path=log_path)
    log = hyper_iterate(cfg, lam0)
    best = log.best_lam
    return {"mode": mode, "T": T, "meta_val_acc": metric(best),
            "meta_test_acc": meta_accuracy(problem, test_eps, best, spec), "log": log,
            "lam": best}


def meta_experiment(params: dict, seed: int = 0, log_dir=None, threads: int = 1) -> dict:
    """Sweep ``T`` with the full hypergradient, then compare modes at ``T = params['T']``."""
    p = params
    sweep = []
    for T in p["T_list"]:
        path = os.path.join(log_dir, f"runlog_full_T{T}.jsonl") if log_dir else None
        r = meta_run(p, "full", T, seed, path, threads)
        sweep.append({"T": T, "meta_val_acc": r["meta_val_acc"],
                      "meta_test_acc": r["meta_test_acc"]})
    table = []
    for mode in p["modes"]:
        path = os.path.join(log_dir, f"runlog_{mode}_T{p['T']}.jsonl") if log_dir else None
        r = meta_run(p, mode, p["T"], seed, path, threads)
        table.append({"mode": mode, "T": p["T"], "meta_val_acc": r["meta_val_acc"],
                      "meta_test_acc": r["meta_test_acc"]})
    return {"sweep": sweep, "table": table}
