"""
Berry curvature, Chern estimators, the finite-width correction beta, the
Heisenberg-picture momentum, and the geometric/dynamic phase split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.integrate import cumulative_simpson, simpson

from .meter import GridRun, gaussian_profile
from .model import adiabatic_energy, adiabatic_states, coupling_from_theta, drive_from_theta
from .propagator import Trajectory


class SamplingError(ValueError):
    pass


@dataclass
class CurvatureSeries:
    x: float
    times: np.ndarray
    theta: np.ndarray  # local quench angle
    b_x: np.ndarray
    segment_bounds: tuple  # inclusive (first, last) sample per segment
    durations: tuple

    def segment_theta(self, k: int) -> np.ndarray:
        first, last = self.segment_bounds[k]
        t0 = self.times[first]
        return math.pi * (self.times[first:last + 1] - t0) / self.durations[k]


def berry_curvature(traj: Trajectory) -> CurvatureSeries:
    """B_x = (omega1 / 2 nu_k) <sy> sin(theta), with nu_k the rate of segment k."""
    p = traj.protocol
    rates = np.array([p.sweep_rate(k) for k in range(p.n_segments)])
    nu = rates[traj.segment]
    b = p.params.omega1 / (2.0 * nu) * traj.sigma_y * np.sin(traj.theta)
    return CurvatureSeries(traj.x, traj.times, traj.theta, b, traj.segment_bounds,
                           p.durations)


def _check_uniform(theta: np.ndarray):
    d = np.diff(theta)
    if d.size == 0 or np.any(d <= 0) or np.ptp(d) > 1e-9 * abs(d.mean()):
        raise SamplingError("curvature samples are not uniform in theta")


def segment_chern(cs: CurvatureSeries) -> np.ndarray:
    """-int B dtheta over each quench segment (composite Simpson)."""
    out = []
    for k, (first, last) in enumerate(cs.segment_bounds):
        theta = cs.segment_theta(k)
        _check_uniform(theta)
        out.append(-simpson(cs.b_x[first:last + 1], x=theta))
    return np.array(out)


def chern_integral(cs: CurvatureSeries) -> float:
    return float(segment_chern(cs).sum())


def partial_chern(cs: CurvatureSeries) -> np.ndarray:
    """Running Chern sum after each segment, e.g. (1, 0, 1) for the triple quench."""
    return np.cumsum(segment_chern(cs))


def running_chern(cs: CurvatureSeries) -> np.ndarray:
    """-int_0^t B dtheta at every sample."""
    out = np.zeros(cs.b_x.size)
    offset = 0.0
    for k, (first, last) in enumerate(cs.segment_bounds):
        theta = cs.segment_theta(k)
        run = -cumulative_simpson(cs.b_x[first:last + 1], x=theta, initial=0.0)
        out[first:last + 1] = offset + run
        offset += run[-1]
    return out


def beta_closed_form(dx_param: float) -> float:
    """
    Fraction of the Chern number recorded by a meter of width dx_param.

    sqrt(pi/2)/dx * exp(z^2) erfc(z) with z = 1/(sqrt(2) dx); erfcx keeps the
    product finite for narrow meters.
    """
    if not dx_param > 0:
        raise ValueError(f"dx_param must be positive, got {dx_param!r}")
    z = 1.0 / (math.sqrt(2.0) * dx_param)
    return float(math.sqrt(math.pi / 2.0) / dx_param * special.erfcx(z))


def _adaptive_simpson(f, a, b, tol, depth=60):
    def simp(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simp(fa, flm, fm, a, m)
        right = simp(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simp(fa, fm, fb, a, b), tol, depth)


def beta_quadrature(dx_param: float, tol: float = 1e-10) -> float:
    """int |phi(x)|^2 / (1 + x^2) dx by adaptive Simpson (reference route for beta)."""
    # u = x / dx; the Gaussian weight is below 1e-300 beyond |u| = 40
    def f(u):
        return math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi) / (1.0 + (dx_param * u) ** 2)

    return sum(_adaptive_simpson(f, a, a + 10.0, tol / 8) for a in range(-40, 40, 10))


def corrected_chern(mean_p: float, dx_param: float) -> float:
    return mean_p / beta_closed_form(dx_param)


def heisenberg_mean_p(run: GridRun) -> np.ndarray:
    """<p>(t) = -int_0^t g(t') <sy>_joint(t') dt' (Simpson over the sample grid)."""
    p = run.protocol
    sched = run.schedule
    g = coupling_from_theta(sched.sample_theta, p.params, p.coupling)
    integrand = g * run.joint_sigma_y()
    dt = sched.sample_times[1] - sched.sample_times[0]
    return -cumulative_simpson(integrand, dx=dt, initial=0.0)


@dataclass
class PhaseDecomposition:
    x: float
    times: np.ndarray
    gamma_total: np.ndarray
    gamma_d: np.ndarray
    gamma_g: np.ndarray
    branch: np.ndarray
    min_overlap: float
    valid: bool

    @property
    def final(self) -> tuple[float, float, float]:
        return float(self.gamma_total[-1]), float(self.gamma_d[-1]), float(self.gamma_g[-1])


def phase_decompose(traj: Trajectory, min_overlap: float = 0.9) -> PhaseDecomposition:
    """
    Split the phase of the followed adiabatic state into dynamic and geometric parts.

    gamma_d = -int E_branch dt; gamma_total = arg <chi_branch | chi>, taken in the
    gauge of ``adiabatic_states``; gamma_g = gamma_total - gamma_d. Within a
    segment gamma_g is unwrapped sample to sample. At a restart between
    segments the eigenbasis changes abruptly and the phase jump is taken in
    (-pi, pi].
    """
    p = traj.protocol
    n = traj.times.size
    gd = np.zeros(n)
    gg = np.zeros(n)
    branch = np.zeros(n, dtype=int)
    worst = 1.0
    gd_off = gg_off = 0.0
    for k, (first, last) in enumerate(traj.segment_bounds):
        sl = slice(first, last + 1)
        t = traj.times[sl]
        theta = math.pi * (t - t[0]) / p.durations[k]
        delta, omega = drive_from_theta(theta, p.params)
        chi_p, chi_m = adiabatic_states(delta, omega, traj.x)
        states = traj.states[sl]
        ov_p = np.einsum("ki,ki->k", np.conj(chi_p), states)
        ov_m = np.einsum("ki,ki->k", np.conj(chi_m), states)
        lab = np.where(np.abs(ov_m) > np.abs(ov_p), -1, 1)
        ov = np.where(lab > 0, ov_p, ov_m)
        worst = min(worst, float(np.min(np.abs(ov) ** 2)))
        energy = lab * adiabatic_energy(delta, omega, traj.x)
        seg_gd = gd_off - cumulative_simpson(energy, x=t, initial=0.0)
        raw = np.angle(ov * np.exp(-1j * seg_gd))
        if k == 0:
            start = raw[0]
        else:
            start = gg_off + math.remainder(raw[0] - gg_off, 2.0 * math.pi)
        seg_gg = start + np.unwrap(raw - raw[0])
        gd[sl], gg[sl], branch[sl] = seg_gd, seg_gg, lab
        gd_off, gg_off = seg_gd[-1], seg_gg[-1]
    return PhaseDecomposition(traj.x, traj.times, gg + gd, gd, gg, branch, worst,
                              worst >= min_overlap)


def phase_gradient_momentum(xs, phase, dx_param: float) -> float:
    """int |phi(x)|^2 d(phase)/dx dx on a uniform x grid."""
    xs = np.asarray(xs, dtype=float)
    grad = np.gradient(np.asarray(phase, dtype=float), xs, edge_order=2)
    return float(simpson(gaussian_profile(xs, dx_param) ** 2 * grad, x=xs))


def dp_prediction(dx_param: float, f: float, tq_eff: float, enhancement: float = 1.0) -> float:
    """Momentum spread of a Gaussian meter chirped by the dynamic phase -enh f x^2 tq."""
    a = enhancement * f * tq_eff
    return math.sqrt(1.0 + 16.0 * a * a * dx_param**4) / (2.0 * dx_param)
