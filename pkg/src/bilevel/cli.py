"""``bilevel`` command-line harness.

    bilevel <command> [--config PATH] [--out DIR] [--seed N] [--threads K]
                      [--deterministic] [--set key=value ...]

Commands: ``effect-of-t``, ``ridge-diag``, ``meta``, ``check``.
Exit codes: 0 success, 1 check failure, 2 config error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import experiments
from .checks import run_checks
from .core import DivergenceError

log = logging.getLogger("bilevel")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

COMMANDS = {"effect-of-t": "effect_of_t", "ridge-diag": "ridge_diag", "meta": "meta",
            "check": "check"}


class ConfigError(ValueError):
    pass


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = like[0] if like else ""
            return [_parse(s, elem, key) for s in items]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


@dataclass
class RunConfig:
    """Experiment id, run settings and the experiment's numeric knobs.

    Stored as an INI-style file with a ``[run]`` and a ``[params]`` section.
    """

    experiment: str
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1
    deterministic: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in experiments.DEFAULTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        defaults = experiments.DEFAULTS[self.experiment]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        self.params = experiments.params_for(self.experiment, self.params)
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    def set(self, key: str, raw: str) -> None:
        defaults = experiments.DEFAULTS[self.experiment]
        if key in ("seed", "threads"):
            setattr(self, key, _parse(raw, 0, key))
        elif key == "out_dir":
            self.out_dir = raw
        elif key == "deterministic":
            self.deterministic = _parse(raw, True, key)
        elif key in defaults:
            self.params[key] = _parse(raw, defaults[key], key)
        else:
            raise ConfigError(f"unknown key {key!r}")

    def dumps(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"experiment": self.experiment, "seed": str(self.seed),
                     "out_dir": self.out_dir, "threads": str(self.threads),
                     "deterministic": _format(self.deterministic)}
        cp["params"] = {k: _format(v) for k, v in self.params.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, experiment: Optional[str] = None) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        run = dict(cp["run"]) if cp.has_section("run") else {}
        exp = run.pop("experiment", None) or experiment
        if exp is None:
            raise ConfigError("config does not name an experiment")
        if experiment is not None and exp != experiment:
            raise ConfigError(f"config is for {exp!r}, command runs {experiment!r}")
        cfg = cls(exp)
        for k, v in run.items():
            cfg.set(k, v)
        if cp.has_section("params"):
            for k, v in cp["params"].items():
                cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path, experiment: Optional[str] = None) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.loads(fh.read(), experiment)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "out_dir": self.out_dir,
                "threads": self.threads, "deterministic": self.deterministic,
                "params": self.params}


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, artifacts: list, status: dict) -> str:
    path = os.path.join(cfg.out_dir, "run_manifest.json")
    with open(os.path.join(cfg.out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.dumps())
    manifest = {"config": cfg.to_dict(), "seeds": {"seed": cfg.seed},
                "artifacts": {os.path.basename(a): _sha256(a) for a in artifacts},
                "status": status}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
    return path


def cmd_effect_of_t(cfg: RunConfig):
    p = cfg.params
    res = experiments.effect_of_t(p, cfg.seed)
    curves = os.path.join(cfg.out_dir, "curves.csv")
    times = os.path.join(cfg.out_dir, "times.csv")
    write_csv(curves, ["hyperiter", "T", "fT", "f_exact", "test_metric"], res["curves"])
    write_csv(times, ["T", "wall_time_s", "hg_time_s"], res["times"])
    status = {"eta": res["eta"]}
    ok = True
    if "r2_hg" in res:
        status.update(r2_hg=res["r2_hg"], r2_run=res["r2_run"])
        ok = res["r2_hg"] >= 0.95
        status["runtime_linear"] = ok
    return [curves, times], status, ok


def cmd_ridge_diag(cfg: RunConfig):
    res = experiments.ridge_diag(cfg.params, cfg.seed)
    table = os.path.join(cfg.out_dir, "table.csv")
    write_csv(table, ["T", "val_mape", "test_mape"], res["rows"])
    val = [r["val_mape"] for r in res["rows"] if r["T"] != "Exact"]
    exact = [r["val_mape"] for r in res["rows"] if r["T"] == "Exact"][0]
    decreasing = all(a > b for a, b in zip(val, val[1:]))
    exact_best = exact <= min(val)
    status = {"val_mape_decreasing": decreasing, "exact_beats_unrolled": exact_best,
              "rows": res["rows"]}
    return [table], status, decreasing


def cmd_meta(cfg: RunConfig):
    res = experiments.meta_experiment(cfg.params, cfg.seed, cfg.out_dir,
                                      1 if cfg.deterministic else cfg.threads)
    table = os.path.join(cfg.out_dir, "table.csv")
    sweep = os.path.join(cfg.out_dir, "t_sweep.csv")
    write_csv(table, ["mode", "T", "meta_val_acc", "meta_test_acc"], res["table"])
    write_csv(sweep, ["T", "meta_val_acc", "meta_test_acc"], res["sweep"])
    logs = sorted(os.path.join(cfg.out_dir, f) for f in os.listdir(cfg.out_dir)
                  if f.startswith("runlog_"))
    best_T = max(res["sweep"], key=lambda r: r["meta_val_acc"])["T"]
    return [table, sweep] + logs, {"best_T": best_T}, True


def cmd_check(cfg: RunConfig):
    summary = run_checks(cfg.params["n_instances"], cfg.seed + cfg.params["seed_offset"])
    path = os.path.join(cfg.out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
    ok = summary["ok"] and summary["max_fd_rel_err"] <= 1e-5
    return [path], {"ok": ok, "failing_suites": summary["failing_suites"],
                    "max_fd_rel_err": summary["max_fd_rel_err"]}, ok


HANDLERS = {"effect_of_t": cmd_effect_of_t, "ridge_diag": cmd_ridge_diag, "meta": cmd_meta,
            "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bilevel", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI config with [run] and [params] sections")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--deterministic", action="store_true", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    exp = COMMANDS[args.command]
    try:
        cfg = RunConfig.load(args.config, exp) if args.config else RunConfig(exp)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        if args.threads is not None:
            cfg.set("threads", str(args.threads))
        if args.deterministic:
            cfg.deterministic = True
        if args.out:
            cfg.out_dir = args.out
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        artifacts, status, ok = HANDLERS[exp](cfg)
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        # non-finite iterates or a numerically singular system after blow-up
        print(f"numerical divergence: {exc}", file=sys.stderr)
        write_manifest(cfg, [], {"diverged": str(exc)})
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status["ok"] = ok
    write_manifest(cfg, artifacts, status)
    print(json.dumps({"command": args.command, "out_dir": cfg.out_dir, **status},
                     default=_json_default))
    return EXIT_OK if ok else EXIT_CHECK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
