"""
Parameter sweeps over (delta2, dx) for the single and triple quench protocols.

A sweep splits into meter jobs, one per (delta2, dx), which propagate the
joint state on a grid, and trajectory jobs, one per delta2, which record
x-conditioned series. Jobs are independent and are collected in submission
order, so results do not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import multiprocessing
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .meter import (
    MAX_N,
    AliasingError,
    default_half_width,
    make_grid,
    momentum_transform,
    propagate_grid,
    required_grid_size,
)
from .model import CouplingLaw, DegeneracyError, DriveParams, Protocol, dynamic_phase_coefficient
from .propagator import IntegratorConfig, build_schedule, evolve, propagate_batch

OBSERVABLES = (
    "chern_ideal",
    "mean_p",
    "mean_p_corrected",
    "std_p",
    "curvature_series",
    "momentum_density",
    "phase_decomposition",
    "bloch_series",
)
METER_OBSERVABLES = {"mean_p", "mean_p_corrected", "std_p", "momentum_density"}
TRAJECTORY_OBSERVABLES = {"chern_ideal", "curvature_series", "phase_decomposition", "bloch_series"}

PROTOCOL_KINDS = ("single", "triple")


def default_delta2_grid(delta1: float) -> np.ndarray:
    """41 uniform points on [0, 2 delta1] plus 5 refinement points near delta1."""
    uniform = np.linspace(0.0, 2.0 * delta1, 41)
    refine = delta1 * (1.0 + np.array([-0.075, -0.025, 0.01, 0.025, 0.075]))
    return np.union1d(uniform, refine)


@dataclass(frozen=True)
class SweepSpec:
    base: DriveParams
    protocol_kind: str = "single"
    delta2_values: tuple = ()
    dx_values: tuple = (1.0,)
    grid_n: int | None = None  # None: smallest size that avoids aliasing
    half_width_policy: object = "default"
    integrator: IntegratorConfig = IntegratorConfig()
    outputs: tuple = ("mean_p",)
    x_values: tuple = (0.0,)
    coupling: CouplingLaw = CouplingLaw.BERRY_WEIGHTED
    snapshots_per_segment: int = 9

    def __post_init__(self):
        object.__setattr__(self, "delta2_values", tuple(float(v) for v in self.delta2_values))
        object.__setattr__(self, "dx_values", tuple(float(v) for v in self.dx_values))
        object.__setattr__(self, "x_values", tuple(float(v) for v in self.x_values))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if self.protocol_kind not in PROTOCOL_KINDS:
            raise ValueError(f"protocol_kind must be one of {PROTOCOL_KINDS}, got {self.protocol_kind!r}")
        if not self.delta2_values or not self.dx_values or not self.x_values:
            raise ValueError("delta2_values, dx_values and x_values must be non-empty")
        if not self.outputs:
            raise ValueError("no observables requested")
        unknown = [o for o in self.outputs if o not in OBSERVABLES]
        if unknown:
            raise ValueError(f"unknown observables {unknown}; valid: {list(OBSERVABLES)}")

    def protocol(self, delta2: float) -> Protocol:
        params = self.base.with_delta2(delta2)
        if self.protocol_kind == "single":
            return Protocol.single(params, self.coupling)
        return Protocol.triple(params, self.coupling)

    def to_dict(self) -> dict:
        b = self.base
        return {
            "base": {"delta1": b.delta1, "delta2": b.delta2, "omega1": b.omega1,
                     "phi": b.phi, "tq": b.tq},
            "protocol_kind": self.protocol_kind,
            "delta2_values": list(self.delta2_values),
            "dx_values": list(self.dx_values),
            "grid_n": self.grid_n,
            "half_width_policy": self.half_width_policy,
            "integrator": {"steps_per_tq": self.integrator.steps_per_tq,
                           "samples": self.integrator.samples,
                           "method": self.integrator.method.value,
                           "strict": self.integrator.strict},
            "outputs": list(self.outputs),
            "x_values": list(self.x_values),
            "coupling": self.coupling.value,
            "snapshots_per_segment": self.snapshots_per_segment,
        }

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PointRecord:
    """Observables for one sweep point; ``dx`` is None for trajectory jobs."""

    spec_hash: str
    delta2: float
    dx: float | None
    scalars: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class ExperimentResult:
    spec: SweepSpec
    spec_hash: str
    meter: list  # PointRecord per (delta2, dx)
    trajectories: list  # PointRecord per delta2

    @property
    def records(self) -> list:
        return self.meter + self.trajectories

    @property
    def failed(self) -> list:
        return [r for r in self.records if r.error is not None]

    def scalar_table(self, name: str):
        """(delta2, dx, value) rows for a scalar observable."""
        return [(r.delta2, r.dx, r.scalars[name]) for r in self.meter
                if r.error is None and name in r.scalars]


def _convergence_delta(p: Protocol, cfg: IntegratorConfig, xs) -> float:
    """Largest change of the final amplitudes when the step count is doubled."""
    fine = IntegratorConfig(2 * cfg.steps_per_tq, cfg.samples, cfg.method, cfg.strict)
    last = [build_schedule(p, cfg).sample_times.size - 1]
    a = propagate_batch(xs, p, cfg, snapshot_index=last).states[:, -1]
    b = propagate_batch(xs, p, fine, snapshot_index=last).states[:, -1]
    return float(np.max(np.abs(a - b)))


def _meter_job(spec: SweepSpec, delta2: float, dx: float) -> PointRecord:
    rec = PointRecord(spec.spec_hash(), delta2, dx)
    p = spec.protocol(delta2)
    L = (default_half_width(dx) if spec.half_width_policy == "default"
         else float(spec.half_width_policy))
    n = spec.grid_n or required_grid_size(dx, p, L)
    while True:
        grid = make_grid(dx, n, spec.half_width_policy)
        run = propagate_grid(grid, p, spec.integrator, per_segment=spec.snapshots_per_segment)
        try:
            md = momentum_transform(run.joint_state(-1))
            break
        except AliasingError:
            if n >= MAX_N:
                raise
            n *= 2
    beta = analysis.beta_closed_form(dx)
    heis = analysis.heisenberg_mean_p(run)
    rec.scalars.update(
        mean_p=md.mean_p,
        std_p=md.std_p,
        beta=beta,
        corrected=md.mean_p / beta,
        mean_p_heisenberg=float(heis[-1]),
    )
    if "std_p" in spec.outputs and spec.base.omega1 > 0:
        try:
            f = dynamic_phase_coefficient(p.params)
        except DegeneracyError:
            f = float("nan")
        enh = 1.0
        if spec.protocol_kind == "triple":
            enh = 4.0 if abs(delta2) > abs(spec.base.delta1) else 0.0
        rec.scalars.update(f=f, dp_prediction=analysis.dp_prediction(dx, f, spec.base.tq, enh))
    snaps = []
    for k in range(run.snapshot_index.size):
        try:
            m = momentum_transform(run.joint_state(k))
            snaps.append((float(run.snapshot_times[k]), m.mean_p, m.std_p))
        except AliasingError:
            snaps.append((float(run.snapshot_times[k]), float("nan"), float("nan")))
    rec.series["meter_snapshots"] = {
        "t_us": np.array([s[0] for s in snaps]),
        "mean_p": np.array([s[1] for s in snaps]),
        "std_p": np.array([s[2] for s in snaps]),
        "mean_p_heisenberg": heis[run.snapshot_index],
    }
    if "momentum_density" in spec.outputs:
        keep = md.density > 1e-14 * md.density.max()
        rec.series["momentum_density"] = {
            "p": md.p_grid[keep], "density_e": md.density_e[keep],
            "density_g": md.density_g[keep], "density": md.density[keep],
        }
    rec.diagnostics.update(
        grid_n=n,
        half_width=grid.half_width,
        n_integrated=int(run.active.sum()),
        max_norm_drift=run.max_norm_drift,
        convergence_delta=_convergence_delta(p, spec.integrator, [0.0, 2.0 * dx]),
    )
    return rec


def _trajectory_job(spec: SweepSpec, delta2: float) -> PointRecord:
    rec = PointRecord(spec.spec_hash(), delta2, None)
    p = spec.protocol(delta2)
    drift = []
    if "chern_ideal" in spec.outputs:
        bare = Protocol(p.params, p.multiplicities, CouplingLaw.OFF)
        cs = analysis.berry_curvature(evolve(0.0, bare, spec.integrator))
        partial = analysis.partial_chern(cs)
        rec.scalars["chern_ideal"] = float(partial[-1])
        rec.scalars["chern_partial"] = [float(v) for v in partial]
    want = TRAJECTORY_OBSERVABLES.intersection(spec.outputs) - {"chern_ideal"}
    for x in spec.x_values if want else ():
        traj = evolve(x, p, spec.integrator)
        drift.append(traj.norm_drift)
        if "bloch_series" in spec.outputs:
            rec.series.setdefault("bloch_series", {})[x] = {
                "t_us": traj.times, "theta": traj.theta, "segment": traj.segment,
                "sx": traj.bloch[:, 0], "sy": traj.bloch[:, 1], "sz": traj.bloch[:, 2],
                "branch": traj.branch,
            }
        if "curvature_series" in spec.outputs:
            cs = analysis.berry_curvature(traj)
            rec.series.setdefault("curvature_series", {})[x] = {
                "t_us": cs.times, "theta": cs.theta, "segment": traj.segment,
                "b_x": cs.b_x, "running_chern": analysis.running_chern(cs),
            }
            rec.scalars.setdefault("chern", {})[x] = analysis.chern_integral(cs)
        if "phase_decomposition" in spec.outputs:
            pd = analysis.phase_decompose(traj)
            rec.series.setdefault("phase_decomposition", {})[x] = {
                "t_us": pd.times, "gamma_total": pd.gamma_total, "gamma_d": pd.gamma_d,
                "gamma_g": pd.gamma_g, "branch": pd.branch,
            }
            rec.scalars.setdefault("phase_valid", {})[x] = bool(pd.valid and not traj.degenerate)
    rec.diagnostics["max_norm_drift"] = max(drift) if drift else 0.0
    return rec


def _job(args):
    kind, spec, delta2, dx = args
    try:
        if kind == "meter":
            return _meter_job(spec, delta2, dx)
        return _trajectory_job(spec, delta2)
    except Exception as exc:  # recorded per point; the sweep carries on
        rec = PointRecord(spec.spec_hash(), delta2, dx)
        rec.error = f"{type(exc).__name__}: {exc} [delta2={delta2!r}, dx={dx!r}]"
        return rec


def _jobs(spec: SweepSpec):
    jobs = []
    if METER_OBSERVABLES.intersection(spec.outputs):
        jobs += [("meter", spec, d2, dx) for d2 in spec.delta2_values for dx in spec.dx_values]
    if TRAJECTORY_OBSERVABLES.intersection(spec.outputs):
        jobs += [("trajectory", spec, d2, None) for d2 in spec.delta2_values]
    return jobs


def run_sweep(spec: SweepSpec, workers: int = 1) -> ExperimentResult:
    jobs = _jobs(spec)
    if workers == 0:
        workers = os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        # the numba kernel runs on OpenMP threads, which do not survive fork()
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            out = list(pool.map(_job, jobs))
    else:
        out = [_job(j) for j in jobs]
    meter = [r for j, r in zip(jobs, out) if j[0] == "meter"]
    traj = [r for j, r in zip(jobs, out) if j[0] == "trajectory"]
    return ExperimentResult(spec, spec.spec_hash(), meter, traj)


def run_single_quench(spec: SweepSpec, workers: int = 1) -> ExperimentResult:
    if spec.protocol_kind != "single":
        raise ValueError("run_single_quench needs protocol_kind='single'")
    return run_sweep(spec, workers)


def run_triple_quench(spec: SweepSpec, workers: int = 1) -> ExperimentResult:
    if spec.protocol_kind != "triple":
        raise ValueError("run_triple_quench needs protocol_kind='triple'")
    return run_sweep(spec, workers)


@dataclass
class TransitionEstimate:
    delta2: np.ndarray
    std_p: np.ndarray
    low_plateau: float
    high_plateau: float
    crossings: list
    estimate: float | None

    @property
    def determinate(self) -> bool:
        return self.estimate is not None


def transition_indicator(spec: SweepSpec, workers: int = 1, result: ExperimentResult | None = None,
                         min_contrast: float = 1e-3) -> TransitionEstimate:
    """
    Locate the topological transition from the jump in triple-quench std_p.

    Plateaus are the medians of std_p for delta2 <= delta1/2 and for
    delta2 >= 3 delta1/2; the estimate is the first upward crossing of their
    midpoint (linear interpolation). All crossings are reported.
    """
    if spec.protocol_kind != "triple":
        raise ValueError("transition_indicator needs protocol_kind='triple'")
    if result is None:
        if "std_p" not in spec.outputs:
            spec = SweepSpec(**{**spec.__dict__, "outputs": spec.outputs + ("std_p",)})
        result = run_triple_quench(spec, workers)
    dx = spec.dx_values[0]
    rows = sorted((d2, v) for d2, d, v in result.scalar_table("std_p") if d == dx)
    d2 = np.array([r[0] for r in rows])
    sp = np.array([r[1] for r in rows])
    d1 = abs(spec.base.delta1)
    lo_mask, hi_mask = np.abs(d2) <= 0.5 * d1, np.abs(d2) >= 1.5 * d1
    if not lo_mask.any() or not hi_mask.any():
        raise ValueError("sweep must cover delta2 <= delta1/2 and delta2 >= 3 delta1/2")
    lo, hi = float(np.median(sp[lo_mask])), float(np.median(sp[hi_mask]))
    mid = 0.5 * (lo + hi)
    crossings = []
    if abs(hi - lo) > min_contrast * max(abs(lo), abs(hi)):
        s = np.sign(sp - mid)
        for i in range(len(sp) - 1):
            if s[i] != s[i + 1] and s[i] != 0:
                w = (mid - sp[i]) / (sp[i + 1] - sp[i])
                crossings.append(float(d2[i] + w * (d2[i + 1] - d2[i])))
    estimate = None
    if crossings:
        direction = 1.0 if hi > lo else -1.0
        for i in range(len(sp) - 1):
            if direction * (sp[i] - mid) < 0 <= direction * (sp[i + 1] - mid):
                w = (mid - sp[i]) / (sp[i + 1] - sp[i])
                estimate = float(d2[i] + w * (d2[i + 1] - d2[i]))
                break
    return TransitionEstimate(d2, sp, lo, hi, crossings, estimate)
