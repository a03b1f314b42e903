"""
Fixed-step RK4 integration of i d|chi>/dt = H(t; x)|chi> at fixed meter position.

Since x is conserved, every meter position gives an independent two-level
trajectory. ``propagate_batch`` integrates many positions at once with a
numba kernel; ``evolve`` wraps it for a single x and records the full
trajectory.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np

from .model import (
    CouplingLaw,
    Protocol,
    adiabatic_energy,
    adiabatic_states,
    coupling_from_theta,
    drive_from_theta,
)

# the bundled TBB is too old for numba; skip it rather than warn on every launch
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


class IntegrationMethod(Enum):
    FIXED_RK4 = "rk4"


class StepSizeError(RuntimeError):
    """Step count below the resolution rule while running in strict mode."""


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    steps_per_tq: int = 20000
    samples: int = 1001
    method: IntegrationMethod = IntegrationMethod.FIXED_RK4
    strict: bool = False

    def __post_init__(self):
        if self.steps_per_tq <= 0 or self.samples < 2:
            raise ValueError("steps_per_tq must be positive and samples >= 2")
        if self.steps_per_tq % (self.samples - 1):
            raise ValueError(
                f"steps_per_tq={self.steps_per_tq} must be a multiple of samples-1={self.samples - 1}"
            )

    @property
    def sample_every(self) -> int:
        return self.steps_per_tq // (self.samples - 1)


@dataclass(frozen=True)
class QubitAmplitudes:
    ce: complex
    cg: complex

    @classmethod
    def excited(cls) -> "QubitAmplitudes":
        return cls(1.0 + 0j, 0j)

    def as_array(self) -> np.ndarray:
        return np.array([self.ce, self.cg], dtype=complex)


@dataclass(frozen=True)
class Schedule:
    """Drive values at the start, midpoint and end of every RK4 step."""

    dt: float
    delta: np.ndarray  # (steps, 3)
    omega: np.ndarray
    g: np.ndarray
    sample_times: np.ndarray
    sample_theta: np.ndarray  # local quench angle at each sample (segment end at boundaries)
    sample_segment: np.ndarray
    segment_sample_bounds: tuple  # (first, last) sample index of each segment
    sample_every: int


def build_schedule(p: Protocol, cfg: IntegratorConfig) -> Schedule:
    tq = p.params.tq
    dt = tq / cfg.steps_per_tq
    thetas, seg_ids, bounds = [], [], []
    first = 0
    for k, mult in enumerate(p.multiplicities):
        n = mult * cfg.steps_per_tq
        if abs(n - round(n)) > 1e-9 or round(n) % cfg.sample_every:
            raise ValueError(f"segment {k} does not contain a whole number of sample intervals")
        n = int(round(n))
        j = np.arange(n)
        local = np.stack([j, j + 0.5, j + 1.0], axis=1) / n
        thetas.append(math.pi * local)
        seg_ids.append(np.full(n, k))
        bounds.append((first, first + n // cfg.sample_every))
        first += n // cfg.sample_every
    theta = np.concatenate(thetas)
    delta, omega = drive_from_theta(theta, p.params)
    g = coupling_from_theta(theta, p.params, p.coupling)
    if p.coupling is CouplingLaw.OFF:
        g = np.zeros_like(theta)
    nsamp = first + 1
    sample_times = np.arange(nsamp) * dt * cfg.sample_every
    # theta seen by each sample: end-of-step value of the step that produced it
    step_seg = np.concatenate(seg_ids)
    sample_theta = np.empty(nsamp)
    sample_segment = np.empty(nsamp, dtype=np.int64)
    sample_theta[0] = theta[0, 0]
    sample_segment[0] = 0
    ends = np.arange(1, nsamp) * cfg.sample_every - 1
    sample_theta[1:] = theta[ends, 2]
    sample_segment[1:] = step_seg[ends]
    return Schedule(
        dt=dt,
        delta=np.ascontiguousarray(delta),
        omega=np.ascontiguousarray(omega),
        g=np.ascontiguousarray(g),
        sample_times=sample_times,
        sample_theta=sample_theta,
        sample_segment=sample_segment,
        segment_sample_bounds=tuple(bounds),
        sample_every=cfg.sample_every,
    )


def max_frequency(p: Protocol, xmax: float) -> float:
    theta = np.linspace(0.0, math.pi, 2001)
    delta, omega = drive_from_theta(theta, p.params)
    return float(np.max(np.sqrt(delta**2 + omega**2 * (1.0 + xmax**2))))


def check_step_size(p: Protocol, cfg: IntegratorConfig, xmax: float):
    """Warn (or raise in strict mode) when steps_per_tq < 100 * w_max tq / 2pi."""
    need = 100.0 * max_frequency(p, xmax) * p.params.tq / (2.0 * math.pi)
    if cfg.steps_per_tq >= need:
        return
    msg = (f"steps_per_tq={cfg.steps_per_tq} below resolution rule ({need:.0f}) "
           f"for |x| <= {xmax:g}")
    if cfg.strict:
        raise StepSizeError(msg)
    warnings.warn(msg, StepSizeWarning, stacklevel=3)


@numba.njit(cache=True, inline="always")
def _rhs(ce, cg, d, o, gx, cphi, sphi):
    a = 0.5 * o * cphi
    b = 0.5 * o * sphi + gx
    hd = 0.5 * d
    off_up = complex(a, -b)
    off_dn = complex(a, b)
    return (-1j * (hd * ce + off_up * cg), -1j * (off_dn * ce - hd * cg))


@numba.njit(cache=True, parallel=True)
def _rk4_kernel(xs, delta, omega, g, cphi, sphi, dt, sample_every, c0e, c0g,
                snap_idx, sy_out, snap_out, drift_out):
    nx = xs.shape[0]
    nsteps = delta.shape[0]
    nsnap = snap_idx.shape[0]
    for i in numba.prange(nx):
        x = xs[i]
        ce = c0e
        cg = c0g
        drift = abs(ce.real**2 + ce.imag**2 + cg.real**2 + cg.imag**2 - 1.0)
        sy_out[i, 0] = 2.0 * (ce.real * cg.imag - ce.imag * cg.real)
        ptr = 0
        if nsnap > 0 and snap_idx[0] == 0:
            snap_out[i, 0, 0] = ce
            snap_out[i, 0, 1] = cg
            ptr = 1
        sample = 0
        for s in range(nsteps):
            d0 = delta[s, 0]
            d1 = delta[s, 1]
            d2 = delta[s, 2]
            o0 = omega[s, 0]
            o1 = omega[s, 1]
            o2 = omega[s, 2]
            gx0 = g[s, 0] * x
            gx1 = g[s, 1] * x
            gx2 = g[s, 2] * x
            k1e, k1g = _rhs(ce, cg, d0, o0, gx0, cphi, sphi)
            k2e, k2g = _rhs(ce + 0.5 * dt * k1e, cg + 0.5 * dt * k1g, d1, o1, gx1, cphi, sphi)
            k3e, k3g = _rhs(ce + 0.5 * dt * k2e, cg + 0.5 * dt * k2g, d1, o1, gx1, cphi, sphi)
            k4e, k4g = _rhs(ce + dt * k3e, cg + dt * k3g, d2, o2, gx2, cphi, sphi)
            ce = ce + (dt / 6.0) * (k1e + 2.0 * k2e + 2.0 * k3e + k4e)
            cg = cg + (dt / 6.0) * (k1g + 2.0 * k2g + 2.0 * k3g + k4g)
            if (s + 1) % sample_every == 0:
                sample += 1
                sy_out[i, sample] = 2.0 * (ce.real * cg.imag - ce.imag * cg.real)
                dn = abs(ce.real**2 + ce.imag**2 + cg.real**2 + cg.imag**2 - 1.0)
                if dn > drift:
                    drift = dn
                if ptr < nsnap and snap_idx[ptr] == sample:
                    snap_out[i, ptr, 0] = ce
                    snap_out[i, ptr, 1] = cg
                    ptr += 1
        drift_out[i] = drift


@dataclass
class BatchResult:
    xs: np.ndarray
    schedule: Schedule
    sigma_y: np.ndarray  # (nx, nsamples)
    snapshot_index: np.ndarray  # sample indices of stored states
    states: np.ndarray  # (nx, nsnap, 2)
    norm_drift: np.ndarray  # (nx,)


def propagate_batch(xs, p: Protocol, cfg: IntegratorConfig = IntegratorConfig(),
                    initial: QubitAmplitudes = QubitAmplitudes.excited(),
                    snapshot_index=None, schedule: Schedule | None = None) -> BatchResult:
    """
    Integrate the qubit for every meter position in ``xs``.

    sigma_y is recorded at every sample; full amplitudes only at the sample
    indices in ``snapshot_index`` (all samples when None).
    """
    xs = np.ascontiguousarray(np.atleast_1d(np.asarray(xs, dtype=float)))
    c0 = initial.as_array()
    n0 = float(np.vdot(c0, c0).real)
    if abs(n0 - 1.0) > 1e-12:
        raise ValueError(f"initial state not normalized (norm^2 = {n0!r})")
    if cfg.method is not IntegrationMethod.FIXED_RK4:
        raise NotImplementedError(cfg.method)
    sched = schedule if schedule is not None else build_schedule(p, cfg)
    nsamp = sched.sample_times.size
    if snapshot_index is None:
        snap = np.arange(nsamp, dtype=np.int64)
    else:
        snap = np.unique(np.asarray(snapshot_index, dtype=np.int64))
        if snap.size and (snap[0] < 0 or snap[-1] >= nsamp):
            raise ValueError("snapshot index out of range")
    if xs.size:
        check_step_size(p, cfg, float(np.max(np.abs(xs))))
    sy = np.empty((xs.size, nsamp))
    states = np.empty((xs.size, snap.size, 2), dtype=complex)
    drift = np.empty(xs.size)
    phi = p.params.phi
    _rk4_kernel(xs, sched.delta, sched.omega, sched.g, math.cos(phi), math.sin(phi),
                sched.dt, sched.sample_every, complex(c0[0]), complex(c0[1]),
                snap, sy, states, drift)
    return BatchResult(xs, sched, sy, snap, states, drift)


@dataclass
class Trajectory:
    """
    Qubit trajectory for one meter position.

    ``branch`` holds +1 / -1 for the adiabatic state (chi_+ / chi_-) with the
    larger overlap at each sample; ``overlap`` is that overlap probability.
    """

    x: float
    protocol: Protocol
    times: np.ndarray
    theta: np.ndarray
    segment: np.ndarray
    segment_bounds: tuple
    states: np.ndarray  # (nsamples, 2)
    sigma_y: np.ndarray
    bloch: np.ndarray  # (nsamples, 3)
    branch: np.ndarray
    overlap: np.ndarray
    norm_drift: float
    degenerate: bool

    @property
    def ce(self):
        return self.states[:, 0]

    @property
    def cg(self):
        return self.states[:, 1]


def bloch_vector(states: np.ndarray) -> np.ndarray:
    ce, cg = states[..., 0], states[..., 1]
    z = np.conj(ce) * cg
    return np.stack([2.0 * z.real, 2.0 * z.imag, np.abs(ce) ** 2 - np.abs(cg) ** 2], axis=-1)


def segment_eigenstates(p: Protocol, theta, x):
    """chi_+/chi_- along samples, evaluated at each sample's local quench angle."""
    delta, omega = drive_from_theta(theta, p.params)
    return adiabatic_states(delta, omega, x)


def label_branches(states, chi_plus, chi_minus):
    """Argmax-overlap branch labels; exact ties keep the previous label."""
    op = np.abs(np.einsum("ki,ki->k", np.conj(chi_plus), states)) ** 2
    om = np.abs(np.einsum("ki,ki->k", np.conj(chi_minus), states)) ** 2
    lab = np.where(op > om, 1, np.where(om > op, -1, 0))
    prev = 1
    for k in range(lab.size):
        if lab[k] == 0:
            lab[k] = prev
        prev = lab[k]
    return lab, np.where(lab > 0, op, om)


def _degenerate_samples(p: Protocol, theta, eps) -> bool:
    delta, omega = drive_from_theta(theta, p.params)
    return bool(np.any(np.hypot(delta, omega) <= eps))


def evolve(x: float, p: Protocol, cfg: IntegratorConfig = IntegratorConfig(),
           initial: QubitAmplitudes = QubitAmplitudes.excited(),
           degeneracy_eps: float = 1e-6) -> Trajectory:
    res = propagate_batch([x], p, cfg, initial)
    return trajectory_from_states(x, p, res.schedule, res.states[0], res.norm_drift[0],
                                  degeneracy_eps)


def trajectory_from_states(x, p: Protocol, sched: Schedule, states, norm_drift,
                           degeneracy_eps: float = 1e-6) -> Trajectory:
    chi_p, chi_m = segment_eigenstates(p, sched.sample_theta, x)
    branch, overlap = label_branches(states, chi_p, chi_m)
    bloch = bloch_vector(states)
    return Trajectory(
        x=float(x),
        protocol=p,
        times=sched.sample_times,
        theta=sched.sample_theta,
        segment=sched.sample_segment,
        segment_bounds=sched.segment_sample_bounds,
        states=states,
        sigma_y=bloch[:, 1].copy(),
        bloch=bloch,
        branch=branch,
        overlap=overlap,
        norm_drift=float(norm_drift),
        degenerate=_degenerate_samples(p, sched.sample_theta, degeneracy_eps),
    )


def sigma_y_series(traj: Trajectory) -> np.ndarray:
    return traj.sigma_y


def branch_energy(traj: Trajectory) -> np.ndarray:
    delta, omega = drive_from_theta(traj.theta, traj.protocol.params)
    return traj.branch * adiabatic_energy(delta, omega, traj.x)
