"""Command-line front end.

Exit status: 0 when every check passes, 1 on a check failure, 2 on a config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientError, TimeCoefficients, coefficients_from_json
from .geometry import DriftStructure, StructureError, drift_from_json
from .holder import box_grid, schauder_ratio
from .kernel import KernelContext, MultiIndex, dump_kernel_csv
from .solver import (
    SourceField,
    TimeWindow,
    cancellation_integral,
    cauchy_homogeneous,
    duhamel,
    manufactured_family,
    second_derivative,
)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
FMT = "{:.17g}".format


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


@dataclass
class GridSpec:
    box: list
    points_per_axis: int
    times: list

    def points(self) -> np.ndarray:
        return box_grid(self.box, self.points_per_axis)


@dataclass
class RunConfig:
    drift: DriftStructure
    coeffs: object
    nu: float
    alpha: float
    grid: GridSpec | None = None
    params: dict = field(default_factory=dict)
    seed: int = 0

    def context(self) -> KernelContext:
        if not isinstance(self.coeffs, TimeCoefficients):
            raise ConfigError([("coefficients", "this command needs coefficients depending on t only")])
        return KernelContext(self.drift, self.coeffs)


def parse_grid(spec, N, path="grid") -> GridSpec:
    errors = []
    box = spec.get("box")
    if not isinstance(box, list) or len(box) != N or any(len(b) != 2 or b[0] >= b[1] for b in box):
        errors.append((f"{path}.box", f"need {N} intervals [lo, hi] with lo < hi"))
    ppa = spec.get("points_per_axis")
    if not isinstance(ppa, int) or ppa < 1:
        errors.append((f"{path}.points_per_axis", "need a positive integer"))
    times = spec.get("times")
    if not isinstance(times, list) or not times:
        errors.append((f"{path}.times", "need a nonempty list of times"))
    if errors:
        raise ConfigError(errors)
    return GridSpec([list(map(float, b)) for b in box], ppa, [float(t) for t in times])


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    errors = []
    drift = None
    try:
        if "preset" in raw:
            drift = drift_from_json({"preset": raw["preset"], "n": raw.get("n", 1)})
        elif "m" in raw:
            drift = drift_from_json({"m": raw["m"], "blocks": raw.get("blocks")})
        else:
            errors.append(("preset", "need either 'preset' or 'm'/'blocks'"))
    except (StructureError, ValueError, TypeError, KeyError) as exc:
        errors.append(("m" if "m" in raw else "preset", str(exc)))
    coeffs = None
    if "coefficients" not in raw:
        errors.append(("coefficients", "required field missing"))
    elif drift is not None:
        try:
            coeffs = coefficients_from_json(raw["coefficients"], drift.q)
        except (CoefficientError, KeyError, TypeError, ValueError) as exc:
            errors.append(("coefficients", str(exc)))
    for name, lo, hi in (("nu", 0.0, 1.0), ("alpha", 0.0, 1.0)):
        if name not in raw:
            errors.append((name, "required field missing"))
        elif not isinstance(raw[name], (int, float)) or not lo < raw[name] <= hi:
            errors.append((name, f"must be a number in ({lo}, {hi}]"))
    if isinstance(raw.get("alpha"), (int, float)) and raw["alpha"] >= 1:
        errors.append(("alpha", "must be < 1"))
    grid = None
    if "grid" in raw and drift is not None:
        try:
            grid = parse_grid(raw["grid"], drift.N)
        except ConfigError as exc:
            errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    if coeffs is not None and getattr(coeffs, "nu", None) is None:
        coeffs.nu = float(raw["nu"])
    return RunConfig(drift, coeffs, float(raw["nu"]), float(raw["alpha"]), grid,
                     {k: v for k, v in raw.items()
                      if k not in ("preset", "n", "m", "blocks", "coefficients", "nu", "alpha", "grid")},
                     int(raw.get("seed", 0)))


def parse_config(path) -> RunConfig:
    """Read and validate a JSON run config; raises :class:`ConfigError` listing
    every problem as ``(field path, message)``."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([("config", f"cannot read {path}: {exc.strerror}")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([("config", f"malformed JSON: {exc}")]) from None
    return config_from_dict(raw)


# -- data specs ---------------------------------------------------------------


def datum_from_spec(spec: dict, N: int):
    """Initial datum ``f(Y) -> (P,)`` from a JSON spec."""
    kind = spec.get("type")
    if kind == "constant":
        c = float(spec.get("value", 1.0))
        return lambda Y: np.full(len(Y), c)
    if kind == "gaussian_bump":
        c = np.asarray(spec.get("center", [0.0] * N), dtype=float)
        w = float(spec.get("width", 1.0))
        a = float(spec.get("amp", 1.0))
        return lambda Y: a * np.exp(-0.5 * np.sum((Y - c) ** 2, axis=1) / w**2)
    if kind == "coordinate":
        i = int(spec.get("index", 0))
        return lambda Y: Y[:, i]
    raise ConfigError([("datum.type", f"unknown datum type {kind!r}")])


def source_from_spec(spec: dict, cfg: RunConfig, tau: float) -> SourceField:
    kind = spec.get("type")
    if kind == "manufactured":
        ms = manufactured_family(cfg.drift, int(spec.get("index", 0)) + 1,
                                 seed=int(spec.get("seed", cfg.seed)), tau=tau)[-1]
        return ms.source(cfg.coeffs, alpha=cfg.alpha)
    f0 = datum_from_spec(spec, cfg.drift.N)
    return SourceField(lambda Y, s: f0(Y), tau=tau, alpha=cfg.alpha)


# -- commands -----------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("KFP_THREADS", "1")))
    except ValueError:
        return 1


def _sweep(fn, times):
    """Evaluate ``fn(t)`` for each time; results keep the input order."""
    n = min(_threads(), len(times))
    if n <= 1:
        return [fn(t) for t in times]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, times))


def _write_grid_csv(out, X, times, values):
    N = X.shape[1]
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        wr = csv.writer(fh)
        wr.writerow([f"x{i + 1}" for i in range(N)] + ["t", "value"])
        for t, vals in zip(times, values):
            for x, v in zip(X, vals):
                wr.writerow([FMT(c) for c in x] + [FMT(t), FMT(v)])
    finally:
        if out:
            fh.close()


def _emit_json(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_verify(cfg: RunConfig, args) -> int:
    selection = [s for part in (args.suite or ["all"]) for s in part.split(",") if s]
    try:
        ctx = cfg.context()
        res = run_suite(ctx, selection, nu=cfg.nu, alpha=cfg.alpha, seed=args.seed)
    except ValueError as exc:
        raise ConfigError([("suite", str(exc))]) from None
    _emit_json(res.to_json(include_timing=not args.no_timing), args.out)
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_kernel(cfg: RunConfig, args) -> int:
    ctx = cfg.context()
    N = cfg.drift.N
    spec = cfg.params.get("kernel", {})
    derivs = [MultiIndex.parse(d) for d in spec.get("derivatives", [])]
    for m in derivs:
        if len(m.alpha) != N:
            raise ConfigError([("kernel.derivatives", f"multi-index {m.key()} needs {N} entries")])
    if "points" in spec:
        rows = []
        for k, p in enumerate(spec["points"]):
            if len(p) != 2 * N + 2:
                raise ConfigError([(f"kernel.points[{k}]", f"need {2 * N + 2} numbers x..., t, y..., s")])
            rows.append((p[:N], p[N], p[N + 1:2 * N + 1], p[2 * N + 1]))
    elif cfg.grid is not None:
        y = spec.get("y", [0.0] * N)
        s = float(spec.get("s", 0.0))
        rows = [(x, t, y, s) for t in cfg.grid.times for x in cfg.grid.points()]
    else:
        raise ConfigError([("kernel.points", "need kernel.points or a grid")])
    dump_kernel_csv(ctx, rows, args.out or "/dev/stdout", derivs)
    return EXIT_OK


def cmd_solve(cfg: RunConfig, args) -> int:
    if cfg.grid is None:
        raise ConfigError([("grid", "solve needs a grid")])
    ctx = cfg.context()
    X = cfg.grid.points()
    times = cfg.grid.times
    if args.kind == "cauchy":
        s = float(cfg.params.get("s", 0.0))
        if "datum" not in cfg.params:
            raise ConfigError([("datum", "required for solve cauchy")])
        f = datum_from_spec(cfg.params["datum"], cfg.drift.N)
        if any(t <= s for t in times):
            raise ConfigError([("grid.times", f"all times must exceed s = {s}")])
        vals = _sweep(lambda t: cauchy_homogeneous(ctx, f, s, X, t), times)
    else:
        w = cfg.params.get("window", {"tau": 0.0, "T": max(times)})
        try:
            window = TimeWindow(float(w["tau"]), float(w["T"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError([("window", str(exc))]) from None
        if "source" not in cfg.params:
            raise ConfigError([("source", f"required for solve {args.kind}")])
        f = source_from_spec(cfg.params["source"], cfg, window.tau)
        if args.kind == "duhamel":
            vals = _sweep(lambda t: duhamel(ctx, f, window, X, t), times)
        else:
            i, j = cfg.params.get("ij", [0, 0])
            vals = _sweep(lambda t: second_derivative(ctx, f, window, X, t, int(i), int(j)), times)
    _write_grid_csv(args.out, X, times, vals)
    return EXIT_OK


def cmd_schauder(cfg: RunConfig, args) -> int:
    if cfg.grid is None:
        raise ConfigError([("grid", "schauder needs a grid")])
    spec = cfg.params.get("schauder", {})
    fam = manufactured_family(cfg.drift, int(spec.get("count", 10)), seed=args.seed)
    reports = []
    for ms in fam:
        rep = schauder_ratio(cfg.drift, cfg.coeffs, ms, cfg.alpha, cfg.grid.points(), cfg.grid.times,
                             seed=args.seed)
        reports.append(rep.to_json())
    ok = all(math.isfinite(r["ratio"]) and math.isfinite(r["space_time_quotient"]) for r in reports)
    _emit_json({"status": "pass" if ok else "fail",
                "max_ratio": max(r["ratio"] for r in reports),
                "max_space_time_quotient": max(r["space_time_quotient"] for r in reports),
                "reports": reports}, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_cancellation(cfg: RunConfig, args) -> int:
    ctx = cfg.context()
    spec = cfg.params.get("cancellation", {})
    rs = [float(r) for r in spec.get("r", [2.0**k for k in range(-8, 4)])]
    t = float(spec.get("t", 100.0))
    tau = float(spec.get("tau", 0.0))
    i, j = spec.get("ij", [0, 0])
    x = np.zeros(cfg.drift.N)
    vals = _sweep(lambda r: cancellation_integral(ctx, x, t, tau, r, int(i), int(j)), rs)
    ok = all(math.isfinite(v) for v in vals)
    spread = max(vals) / min(vals) if min(vals) > 0 else math.inf
    _emit_json({"status": "pass" if ok else "fail", "r": rs, "values": vals, "spread": spread},
               args.out)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfp", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--grid", help="JSON grid spec file, overrides the config's grid")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run check suites")
    v.add_argument("--suite", action="append", help=f"one of {', '.join(SUITES)}, or all")
    v.add_argument("--no-timing", action="store_true", help="omit runtimes for reproducible reports")
    k = sub.add_parser("kernel", help="kernel evaluation")
    ksub = k.add_subparsers(dest="action", required=True)
    ksub.add_parser("eval", parents=[common], help="write kernel values as CSV")
    s = sub.add_parser("solve", help="solution operators on a grid")
    s.add_argument("kind", choices=["cauchy", "duhamel", "d2"])
    for a in common._actions:
        if a.dest != "help":
            s._add_action(a)
    sub.add_parser("schauder", parents=[common], help="Schauder ratios for a manufactured family")
    sub.add_parser("cancellation", parents=[common], help="cancellation integral over radii")
    return p


COMMANDS = {"verify": cmd_verify, "kernel": cmd_kernel, "solve": cmd_solve,
            "schauder": cmd_schauder, "cancellation": cmd_cancellation}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.grid:
            try:
                with open(args.grid) as fh:
                    cfg.grid = parse_grid(json.load(fh), cfg.drift.N)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError([("grid", f"cannot read {args.grid}: {exc}")]) from None
        if args.seed is None:
            args.seed = cfg.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
