"""
Drive schedule, qubit-meter Hamiltonian and adiabatic eigensystem.

Everything here is closed form. Frequencies are angular (rad/us), times in us.
The basis is ordered (|e>, |g>) with |e> the +1 eigenstate of sigma_z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import integrate

TWO_PI = 2.0 * math.pi

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


class DegeneracyError(ValueError):
    """Raised where the two adiabatic levels touch (Delta = Omega = 0)."""


class CouplingLaw(Enum):
    OFF = "off"
    BERRY_WEIGHTED = "berry"


@dataclass(frozen=True)
class DriveParams:
    """
    Quench parameters.

    Attributes
    ----------
    delta1, delta2, omega1 : float
        Detuning amplitude, detuning offset and Rabi amplitude in rad/us.
    phi : float
        Drive phase (radians). Curvature analysis assumes ``phi == 0``.
    tq : float
        Duration of one elementary quench in us.
    """

    delta1: float
    delta2: float
    omega1: float
    phi: float = 0.0
    tq: float = 1.0

    def __post_init__(self):
        if not self.tq > 0:
            raise ValueError(f"tq must be positive, got {self.tq!r}")
        if self.omega1 < 0:
            raise ValueError(f"omega1 must be non-negative, got {self.omega1!r}")

    @property
    def nu(self) -> float:
        return math.pi / self.tq

    @classmethod
    def from_mhz(cls, delta1, delta2, omega1, phi=0.0, tq=1.0) -> "DriveParams":
        """Build from ordinary frequencies in MHz (converted by 2*pi)."""
        return cls(TWO_PI * delta1, TWO_PI * delta2, TWO_PI * omega1, phi, tq)

    def with_delta2(self, delta2: float) -> "DriveParams":
        return DriveParams(self.delta1, delta2, self.omega1, self.phi, self.tq)


def fig1_params(delta2_mhz: float = 0.3, tq: float = 1.0) -> DriveParams:
    """Base parameters used throughout the figures (Delta1 = 3 Omega1 = 2pi x 30 MHz)."""
    return DriveParams.from_mhz(30.0, delta2_mhz, 10.0, tq=tq)


@dataclass(frozen=True)
class Protocol:
    """
    A sequence of quenches applied without reinitializing the qubit.

    Each segment sweeps the local quench angle theta from 0 to pi over its
    own duration ``multiplicity * tq``, so segment ``k`` runs at the rate
    ``pi / duration_k``. Segments are restarted at theta = 0; the time axis
    is continuous.
    """

    params: DriveParams
    multiplicities: tuple = (1.0,)
    coupling: CouplingLaw = CouplingLaw.BERRY_WEIGHTED
    durations: tuple = field(init=False, repr=False)
    boundaries: tuple = field(init=False, repr=False)

    def __post_init__(self):
        mult = tuple(float(m) for m in self.multiplicities)
        if not mult or any(m <= 0 for m in mult):
            raise ValueError("segment multiplicities must be positive and non-empty")
        object.__setattr__(self, "multiplicities", mult)
        durations = tuple(m * self.params.tq for m in mult)
        object.__setattr__(self, "durations", durations)
        object.__setattr__(self, "boundaries", tuple(np.cumsum((0.0,) + durations).tolist()))

    @classmethod
    def single(cls, params: DriveParams, coupling=CouplingLaw.BERRY_WEIGHTED) -> "Protocol":
        return cls(params, (1.0,), coupling)

    @classmethod
    def triple(cls, params: DriveParams, coupling=CouplingLaw.BERRY_WEIGHTED) -> "Protocol":
        return cls(params, (1.0, 2.0, 1.0), coupling)

    @property
    def total_duration(self) -> float:
        return self.boundaries[-1]

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    def sweep_rate(self, segment: int) -> float:
        return math.pi / self.durations[segment]

    def locate(self, t: float) -> tuple[int, float]:
        """Return (segment index, local time). A boundary time belongs to the segment it ends."""
        total = self.total_duration
        tol = 1e-12 * total
        if t < -tol or t > total + tol:
            raise ValueError(f"t = {t!r} outside protocol timeline [0, {total!r}]")
        t = min(max(t, 0.0), total)
        for k in range(self.n_segments):
            if t <= self.boundaries[k + 1] or k == self.n_segments - 1:
                return k, t - self.boundaries[k]
        raise AssertionError("unreachable")

    def theta_at(self, t: float) -> float:
        k, tloc = self.locate(t)
        return math.pi * tloc / self.durations[k]

    def accumulated_theta(self, t: float) -> float:
        """Total sweep angle k*pi + theta; equals pi, 2pi, 3pi at the triple-quench boundaries."""
        k, tloc = self.locate(t)
        return math.pi * (k + tloc / self.durations[k])


def drive_from_theta(theta, params: DriveParams):
    """Detuning and Rabi frequency at quench angle ``theta`` (array friendly)."""
    delta = params.delta1 * np.cos(theta) + params.delta2
    omega = params.omega1 * np.sin(theta)
    return delta, omega


def coupling_from_theta(theta, params: DriveParams, law: CouplingLaw = CouplingLaw.BERRY_WEIGHTED):
    if law is CouplingLaw.OFF:
        return np.zeros_like(np.asarray(theta, dtype=float)) if np.ndim(theta) else 0.0
    return 0.5 * params.omega1 * np.sin(theta)


def drive_at(t: float, p: Protocol) -> tuple[float, float, float]:
    """(delta, omega, theta) at time ``t``; ``theta`` is the local quench angle."""
    theta = p.theta_at(t)
    delta, omega = drive_from_theta(theta, p.params)
    return float(delta), float(omega), theta


def coupling_at(t: float, p: Protocol) -> float:
    theta = p.theta_at(t)
    return float(coupling_from_theta(theta, p.params, p.coupling))


def hamiltonian_matrix(delta, omega, phi, g, x) -> np.ndarray:
    """
    H = 1/2 [delta sz + omega cos(phi) sx + omega sin(phi) sy] + g x sy.

    The meter coupling enters with a plus sign so that the meter momentum obeys
    dp/dt = -g sy and the coupled eigenvectors have Bloch vector
    (omega, omega x, delta) / norm when ``g = omega / 2``.
    """
    a = 0.5 * omega * math.cos(phi)
    b = 0.5 * omega * math.sin(phi) + g * x
    return np.array(
        [[0.5 * delta, a - 1j * b], [a + 1j * b, -0.5 * delta]], dtype=complex
    )


@dataclass(frozen=True)
class AdiabaticFrame:
    e_plus: float
    e_minus: float
    r_plus: np.ndarray
    r_minus: np.ndarray
    xi: float
    omega_tilde: float


def adiabatic_eigensystem(delta: float, omega: float, x: float) -> AdiabaticFrame:
    """Eigenvalues and Bloch vectors of the coupled Hamiltonian for g = omega / 2."""
    vec = np.array([omega, omega * x, delta], dtype=float)
    norm = math.sqrt(omega * omega * (1.0 + x * x) + delta * delta)
    if norm == 0.0:
        raise DegeneracyError(f"degenerate spectrum at delta={delta!r}, omega={omega!r}")
    r_plus = vec / norm
    return AdiabaticFrame(
        e_plus=0.5 * norm,
        e_minus=-0.5 * norm,
        r_plus=r_plus,
        r_minus=-r_plus,
        xi=math.atan(x),
        omega_tilde=math.sqrt(1.0 + x * x) * omega,
    )


def adiabatic_energy(delta, omega, x):
    """E_+ = 1/2 sqrt(omega^2 (1 + x^2) + delta^2), vectorized."""
    return 0.5 * np.sqrt(omega * omega * (1.0 + x * x) + delta * delta)


def adiabatic_states(delta, omega, x):
    """
    Instantaneous eigenvectors chi_+ and chi_- in a fixed smooth gauge.

    The |e> component of each vector is real and non-negative. Where it
    vanishes (at a pole with omega = 0) the vector takes the limit reached
    from omega > 0, so each quench segment (omega = omega1 sin(theta) >= 0)
    is covered by a single continuous gauge.

    Returns
    -------
    chi_plus, chi_minus : ndarray, shape (..., 2)
    """
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    x = np.asarray(x, dtype=float)
    r = np.abs(omega) * np.sqrt(1.0 + x * x)
    polar = np.arctan2(r, delta)
    azimuth = np.arctan(x) + np.where(omega < 0, math.pi, 0.0)
    phase = np.exp(1j * azimuth)
    c, s = np.cos(0.5 * polar), np.sin(0.5 * polar)
    chi_plus = np.stack(np.broadcast_arrays(c + 0j, phase * s), axis=-1)
    chi_minus = np.stack(np.broadcast_arrays(s + 0j, -phase * c), axis=-1)
    return chi_plus, chi_minus


def _check_single_quench_gap(params: DriveParams, eps: float = 0.0):
    if params.omega1 == 0.0:
        return
    for end in (params.delta2 + params.delta1, params.delta2 - params.delta1):
        if abs(end) <= eps:
            raise DegeneracyError(
                "delta and omega vanish together at a quench endpoint "
                f"(delta1={params.delta1!r}, delta2={params.delta2!r})"
            )


def _f_integrand(theta, params: DriveParams):
    delta, omega = drive_from_theta(theta, params)
    return omega * omega / (4.0 * np.sqrt(delta * delta + omega * omega))


def dynamic_phase_coefficient(p: Protocol | DriveParams) -> float:
    """
    Time-averaged x^2 coefficient of E_+ over one quench, in rad/us.

    ``f = (1/tq) int_0^tq omega^2 / (4 sqrt(delta^2 + omega^2)) dt``; the
    dynamic phase of a single quench is approximately ``-f x^2 tq``.
    """
    if isinstance(p, Protocol):
        if p.n_segments != 1:
            raise ValueError("dynamic_phase_coefficient expects a single-quench protocol")
        params = p.params
    else:
        params = p
    if params.omega1 == 0.0:
        return 0.0
    _check_single_quench_gap(params)
    # theta = nu t maps the time average onto an average over [0, pi]
    val, _ = integrate.quad(_f_integrand, 0.0, math.pi, args=(params,),
                            epsabs=1e-13, epsrel=1e-13, limit=200)
    return val / math.pi
