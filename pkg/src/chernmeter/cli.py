"""
Command-line front end.

    chernmeter run CONFIG.yaml [--out DIR] [--format csv|json] [--workers N] [--strict] [--dry-run]
    chernmeter preset FIGURE-ID [same flags]
    chernmeter selftest

Configuration files are flat YAML mappings in laboratory units (MHz, us).
Every run writes ``resolved_config.yaml`` (all defaults filled in, re-runnable
as is), one dataset per observable and ``diagnostics.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .experiments import OBSERVABLES, SweepSpec, default_delta2_grid, run_sweep
from .model import TWO_PI, CouplingLaw, DriveParams
from .propagator import IntegratorConfig

log = logging.getLogger("chernmeter")

FIG_X = [-0.5, -0.35, -0.1, 0.0, 0.1, 0.35, 0.5]
FIG_DX = [0.1, 0.5, 1.0, 2.0, 3.0]

DEFAULTS = {
    "figure": None,
    "protocol": "single",
    "delta1_mhz": 30.0,
    "omega1_mhz": 10.0,
    "phi": 0.0,
    "tq_us": 1.0,
    "delta2_mhz": "default",
    "dx": [1.0],
    "x_values": [0.0],
    "coupling": "berry",
    "outputs": ["mean_p"],
    "grid_n": None,
    "half_width": "default",
    "steps_per_tq": 20000,
    "samples": 1001,
    "strict": False,
    "snapshots_per_segment": 9,
    "out": "results",
    "format": "csv",
    "workers": 1,
    "verbosity": 1,
}

PRESETS = {
    "f1a": {"protocol": "single", "delta2_mhz": [0.3], "x_values": FIG_X,
            "outputs": ["bloch_series"]},
    "f1b": {"protocol": "single", "delta2_mhz": [0.3], "x_values": FIG_X,
            "outputs": ["curvature_series"]},
    "f1c": {"protocol": "single", "delta2_mhz": "default",
            "dx": [0.01, 0.1, 0.5, 1.0, 2.0, 3.0],
            "outputs": ["chern_ideal", "mean_p", "mean_p_corrected"]},
    "f1d": {"protocol": "single", "delta2_mhz": [-10.0],
            "dx": [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0],
            "outputs": ["mean_p", "mean_p_corrected"]},
    "f2a": {"protocol": "single", "delta2_mhz": [-60.0 + 7.5 * k for k in range(17)],
            "dx": [0.1, 0.15, 0.2, 0.23, 0.3, 0.4, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            "outputs": ["std_p"]},
    "f2b": {"protocol": "single", "delta2_mhz": "default", "dx": FIG_DX,
            "outputs": ["std_p"]},
    "f2c": {"protocol": "single", "delta2_mhz": [0.0, 15.0, 27.0, 33.0, 45.0, 60.0],
            "dx": [1.0], "outputs": ["momentum_density", "std_p"]},
    "f3a": {"protocol": "triple", "delta2_mhz": [0.3], "x_values": [0.0],
            "outputs": ["bloch_series", "chern_ideal"]},
    "f3b": {"protocol": "triple", "delta2_mhz": [0.3], "x_values": [0.0],
            "outputs": ["curvature_series", "chern_ideal"]},
    "f3c": {"protocol": "triple", "delta2_mhz": [0.3], "x_values": FIG_X,
            "outputs": ["curvature_series", "phase_decomposition"]},
    "f3d": {"protocol": "triple", "delta2_mhz": "default", "dx": FIG_DX,
            "outputs": ["std_p"]},
}

FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass
class RunConfig:
    values: dict
    lines: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def delta2_mhz_list(self) -> list:
        if self.values["delta2_mhz"] == "default":
            return [float(v) for v in default_delta2_grid(self.values["delta1_mhz"])]
        return list(self.values["delta2_mhz"])

    def resolved(self) -> dict:
        out = dict(self.values)
        out["delta2_mhz"] = self.delta2_mhz_list()
        return out

    def sweep_spec(self) -> SweepSpec:
        v = self.values
        base = DriveParams.from_mhz(v["delta1_mhz"], 0.0, v["omega1_mhz"], v["phi"], v["tq_us"])
        return SweepSpec(
            base=base,
            protocol_kind=v["protocol"],
            delta2_values=tuple(TWO_PI * d for d in self.delta2_mhz_list()),
            dx_values=tuple(v["dx"]),
            grid_n=v["grid_n"],
            half_width_policy=v["half_width"],
            integrator=IntegratorConfig(v["steps_per_tq"], v["samples"], strict=v["strict"]),
            outputs=tuple(v["outputs"]),
            x_values=tuple(v["x_values"]),
            coupling=CouplingLaw(v["coupling"]),
            snapshots_per_segment=v["snapshots_per_segment"],
        )


def _key_lines(text: str) -> dict:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def _number(key, value, line, positive=False, allow_zero=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", key, line)
    if positive and not (value > 0 or (allow_zero and value == 0)):
        raise ConfigError(f"must be {'non-negative' if allow_zero else 'positive'}, got {value!r}",
                          key, line)
    return float(value)


def _number_list(key, value, line, positive=False):
    if not isinstance(value, list):
        value = [value]
    if not value:
        raise ConfigError("list must be non-empty", key, line)
    return [_number(key, v, line, positive, allow_zero=False) for v in value]


def validate(raw: dict, lines: dict | None = None) -> RunConfig:
    lines = lines or {}
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        k = unknown[0]
        raise ConfigError(f"unknown key(s) {unknown}; valid keys: {sorted(DEFAULTS)}", k,
                          lines.get(k))
    figure = raw.get("figure")
    if figure is not None and figure not in PRESETS:
        raise ConfigError(f"unknown figure {figure!r}; valid: {sorted(PRESETS)}", "figure",
                          lines.get("figure"))
    v = dict(DEFAULTS)
    if figure is not None:
        v.update(PRESETS[figure])
    v.update(raw)

    def at(k):
        return lines.get(k)

    if v["protocol"] not in ("single", "triple"):
        raise ConfigError(f"protocol must be 'single' or 'triple', got {v['protocol']!r}",
                          "protocol", at("protocol"))
    v["delta1_mhz"] = _number("delta1_mhz", v["delta1_mhz"], at("delta1_mhz"))
    v["omega1_mhz"] = _number("omega1_mhz", v["omega1_mhz"], at("omega1_mhz"), positive=True)
    v["phi"] = _number("phi", v["phi"], at("phi"))
    v["tq_us"] = _number("tq_us", v["tq_us"], at("tq_us"), positive=True, allow_zero=False)
    if v["delta2_mhz"] != "default":
        d2 = v["delta2_mhz"] if isinstance(v["delta2_mhz"], list) else [v["delta2_mhz"]]
        if not d2:
            raise ConfigError("list must be non-empty", "delta2_mhz", at("delta2_mhz"))
        v["delta2_mhz"] = [_number("delta2_mhz", d, at("delta2_mhz")) for d in d2]
    v["dx"] = _number_list("dx", v["dx"], at("dx"), positive=True)
    xv = v["x_values"] if isinstance(v["x_values"], list) else [v["x_values"]]
    if not xv:
        raise ConfigError("list must be non-empty", "x_values", at("x_values"))
    v["x_values"] = [_number("x_values", x, at("x_values")) for x in xv]
    if v["coupling"] not in [c.value for c in CouplingLaw]:
        raise ConfigError(f"coupling must be one of {[c.value for c in CouplingLaw]}",
                          "coupling", at("coupling"))
    outs = v["outputs"] if isinstance(v["outputs"], list) else [v["outputs"]]
    bad = [o for o in outs if o not in OBSERVABLES]
    if bad or not outs:
        raise ConfigError(f"unknown observables {bad}; valid: {list(OBSERVABLES)}", "outputs",
                          at("outputs"))
    v["outputs"] = list(outs)
    if v["grid_n"] is not None:
        n = v["grid_n"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 256 or n & (n - 1):
            raise ConfigError(f"grid_n must be a power of two >= 256, got {n!r}", "grid_n",
                              at("grid_n"))
    if v["half_width"] != "default":
        v["half_width"] = _number("half_width", v["half_width"], at("half_width"),
                                  positive=True, allow_zero=False)
    for k in ("steps_per_tq", "samples", "snapshots_per_segment", "workers", "verbosity"):
        if isinstance(v[k], bool) or not isinstance(v[k], int) or v[k] < 0:
            raise ConfigError(f"expected a non-negative integer, got {v[k]!r}", k, at(k))
    if v["format"] not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}", "format", at("format"))
    if not isinstance(v["strict"], bool):
        raise ConfigError("strict must be true or false", "strict", at("strict"))
    v["out"] = str(v["out"])
    cfg = RunConfig(v, lines)
    try:
        cfg.sweep_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{path}: malformed YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping", line=1)
    return validate(raw, _key_lines(text))


# -- output writers -------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v + 0.0:.12g}"  # + 0.0 folds -0.0 into 0.0
    return v


class _Writer:
    def __init__(self, out: Path, fmt: str):
        self.out, self.fmt = out, fmt
        self.files = []

    def write(self, name: str, columns: list, rows):
        if self.fmt == "csv":
            path = self.out / f"{name}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(columns)
                w.writerows([_fmt(v) for v in r] for r in rows)
        else:
            path = self.out / f"{name}.json"
            recs = [{c: _json_value(v) for c, v in zip(columns, r)} for r in rows]
            path.write_text(json.dumps(recs, indent=1) + "\n", encoding="utf-8")
        self.files.append(path.name)


def _json_value(v):
    # same 12 significant digits as the CSV; non-finite values become null
    if isinstance(v, float):
        return float(_fmt(v)) if math.isfinite(v) else None
    return v


def _mhz(rad: float) -> float:
    return rad / TWO_PI


def write_datasets(result, out: Path, fmt: str) -> list:
    w = _Writer(out, fmt)
    outputs = set(result.spec.outputs)
    ok = [r for r in result.meter if r.error is None]
    if "mean_p" in outputs or "mean_p_corrected" in outputs:
        cols = ["delta2_MHz", "dx", "mean_p", "beta", "corrected"]
        rows = [[_mhz(r.delta2), r.dx, r.scalars["mean_p"], r.scalars["beta"],
                 r.scalars["corrected"]] for r in ok]
        if "mean_p" in outputs:
            w.write("chern_raw", cols, rows)
        if "mean_p_corrected" in outputs:
            w.write("chern_corrected", cols, rows)
    if "std_p" in outputs:
        cols = ["delta2_MHz", "dx", "std_p", "std_p_initial", "f", "dp_prediction"]
        w.write("std_p", cols, [[_mhz(r.delta2), r.dx, r.scalars["std_p"], 0.5 / r.dx,
                                 r.scalars.get("f", float("nan")),
                                 r.scalars.get("dp_prediction", float("nan"))] for r in ok])
    if outputs & {"mean_p", "mean_p_corrected", "std_p"}:
        rows = []
        for r in ok:
            s = r.series["meter_snapshots"]
            for k in range(s["t_us"].size):
                rows.append([_mhz(r.delta2), r.dx, float(s["t_us"][k]), float(s["mean_p"][k]),
                             float(s["std_p"][k]), float(s["mean_p_heisenberg"][k])])
        w.write("meter_snapshots", ["delta2_MHz", "dx", "t_us", "mean_p", "std_p",
                                    "mean_p_heisenberg"], rows)
    if "momentum_density" in outputs:
        rows = []
        for r in ok:
            s = r.series["momentum_density"]
            for k in range(s["p"].size):
                rows.append([_mhz(r.delta2), r.dx, float(s["p"][k]), float(s["density_e"][k]),
                             float(s["density_g"][k]), float(s["density"][k])])
        w.write("momentum_density", ["delta2_MHz", "dx", "p", "density_e", "density_g",
                                     "density"], rows)
    tok = [r for r in result.trajectories if r.error is None]
    if "chern_ideal" in outputs:
        nseg = 3 if result.spec.protocol_kind == "triple" else 1
        cols = ["delta2_MHz", "chern_ideal"] + [f"partial_{k + 1}" for k in range(nseg)]
        w.write("chern_ideal", cols, [[_mhz(r.delta2), r.scalars["chern_ideal"],
                                       *r.scalars["chern_partial"]] for r in tok])
    series_cols = {
        "bloch_series": ["t_us", "theta", "segment", "sx", "sy", "sz", "branch"],
        "curvature_series": ["t_us", "theta", "segment", "b_x", "running_chern"],
        "phase_decomposition": ["t_us", "gamma_total", "gamma_d", "gamma_g", "branch"],
    }
    for name, cols in series_cols.items():
        if name not in outputs:
            continue
        rows = []
        for r in tok:
            for x, s in r.series[name].items():
                for k in range(s["t_us"].size):
                    rows.append([_mhz(r.delta2), x] + [s[c][k].item() for c in cols])
        w.write(name, ["delta2_MHz", "x"] + cols, rows)
    return w.files


def diagnostics(result, wall_time: float) -> dict:
    points = []
    for r in result.records:
        points.append({
            "kind": "meter" if r.dx is not None else "trajectory",
            "delta2_MHz": _mhz(r.delta2),
            "dx": r.dx,
            "error": r.error,
            **r.diagnostics,
        })
    drifts = [p["max_norm_drift"] for p in points if "max_norm_drift" in p]
    conv = [p["convergence_delta"] for p in points if "convergence_delta" in p]
    return {
        "spec_hash": result.spec_hash,
        "wall_time_s": wall_time,
        "n_points": len(points),
        "n_failed": len(result.failed),
        "max_norm_drift": max(drifts) if drifts else None,
        "max_convergence_delta": max(conv) if conv else None,
        "points": points,
    }


def execute(cfg: RunConfig, dry_run: bool = False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(
        yaml.safe_dump(cfg.resolved(), sort_keys=True), encoding="utf-8")
    if dry_run:
        log.info("dry run: wrote %s", out / "resolved_config.yaml")
        return 0
    spec = cfg.sweep_spec()
    t0 = time.perf_counter()
    result = run_sweep(spec, workers=cfg.workers)
    wall = time.perf_counter() - t0
    files = write_datasets(result, out, cfg.format)
    diag = diagnostics(result, wall)
    diag["files"] = files
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=1) + "\n", encoding="utf-8")
    for r in result.failed:
        log.error("%s", r.error)
    log.info("%d points, %d failed, %.1f s; wrote %s", diag["n_points"], diag["n_failed"], wall,
             ", ".join(files))
    if result.records and len(result.failed) == len(result.records):
        return 1
    return 0


def _error_report(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc),
                       "key": getattr(exc, "key", None), "line": getattr(exc, "line", None)})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chernmeter",
                                 description="Meter-based Chern number readout simulations.")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=FORMATS)
    common.add_argument("--workers", type=int, help="parallel sweep workers (0 = all cores)")
    common.add_argument("--strict", action="store_true", default=None,
                        help="treat step-size warnings as errors")
    common.add_argument("--dry-run", action="store_true",
                        help="write the resolved config only")
    common.add_argument("-v", "--verbose", action="count", default=0)
    run = sub.add_parser("run", parents=[common], help="run a YAML configuration")
    run.add_argument("config")
    pre = sub.add_parser("preset", parents=[common], help="run a named figure preset")
    pre.add_argument("figure", choices=sorted(PRESETS))
    sub.add_parser("selftest", help="run the built-in invariant checks")
    return ap


def _apply_flags(raw: dict, args) -> dict:
    raw = dict(raw)
    for key in ("out", "format", "workers", "strict"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    return raw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", 0) or args.command != "selftest"
                        else logging.WARNING, format="%(message)s")
    if args.command == "selftest":
        from .selftest import run_selftest
        return run_selftest()
    try:
        if args.command == "run":
            base = parse_config(args.config)
            cfg = validate(_apply_flags(base.values, args), base.lines)
        else:
            cfg = validate(_apply_flags({"figure": args.figure, "out": f"results/{args.figure}"},
                                        args))
        return execute(cfg, dry_run=args.dry_run)
    except (ConfigError, OSError) as exc:
        print(_error_report(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
