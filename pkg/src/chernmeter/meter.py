"""
Meter position grid, joint qubit-meter state and momentum statistics.

Conventions: hbar = 1, Phi(p) = (2 pi)^-1/2 int psi(x) exp(-i p x) dx.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Protocol
from .propagator import (
    IntegratorConfig,
    QubitAmplitudes,
    Schedule,
    build_schedule,
    propagate_batch,
)


class GridTooNarrowError(ValueError):
    pass


class IncompleteDataError(ValueError):
    pass


class AliasingError(RuntimeError):
    pass


DEFAULT_N = 1024
MAX_N = 1 << 16
# positions where |phi| is below this fraction of its peak carry no resolvable weight
ACTIVE_TOL = 1e-15


def default_half_width(dx_param: float) -> float:
    return max(8.0 * dx_param, 6.0)


def gaussian_profile(x, dx_param):
    """Continuum meter wave function, real and centred at zero."""
    return (2.0 * math.pi * dx_param**2) ** -0.25 * np.exp(-x * x / (4.0 * dx_param**2))


@dataclass(frozen=True)
class MeterGrid:
    dx_param: float
    n: int
    half_width: float

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def points(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.h

    @property
    def profile(self) -> np.ndarray:
        """Sampled Gaussian rescaled so that h * sum |phi|^2 = 1."""
        phi = gaussian_profile(self.points, self.dx_param)
        return phi / math.sqrt(self.h * np.sum(phi * phi))

    @property
    def dp(self) -> float:
        return 2.0 * math.pi / (self.n * self.h)

    @property
    def p_grid(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dp


def make_grid(dx_param: float, n: int = DEFAULT_N, half_width_policy="default") -> MeterGrid:
    """
    Uniform grid on [-L, L) with n points (power of two, n >= 256).

    ``half_width_policy`` is "default" (L = max(8 dx, 6)) or an explicit L.
    """
    if not dx_param > 0:
        raise ValueError(f"dx_param must be positive, got {dx_param!r}")
    if n < 256 or n & (n - 1):
        raise ValueError(f"grid size must be a power of two >= 256, got {n!r}")
    if half_width_policy == "default":
        L = default_half_width(dx_param)
    else:
        L = float(half_width_policy)
        if not L > 0:
            raise ValueError(f"half width must be positive, got {L!r}")
    edge = gaussian_profile(L, dx_param) ** 2 * 2.0 * L
    if edge > 1e-12:
        raise GridTooNarrowError(
            f"Gaussian of width {dx_param:g} truncated at L={L:g} (edge weight {edge:.2e})")
    return MeterGrid(float(dx_param), int(n), L)


@dataclass
class JointState:
    grid: MeterGrid
    amp_e: np.ndarray
    amp_g: np.ndarray
    time: float = 0.0

    @property
    def position_density(self) -> np.ndarray:
        return np.abs(self.amp_e) ** 2 + np.abs(self.amp_g) ** 2

    def norm(self) -> float:
        return float(self.grid.h * np.sum(self.position_density))


def assemble(grid: MeterGrid, ce, cg, time: float = 0.0) -> JointState:
    """
    Weight x-conditioned amplitudes by the meter profile.

    ``ce``/``cg`` are arrays over the grid points, or a mapping from grid index
    to ``QubitAmplitudes``.
    """
    if isinstance(ce, dict):
        amps = ce
        missing = [j for j in range(grid.n) if j not in amps]
        if missing:
            raise IncompleteDataError(f"{len(missing)} grid points without a trajectory "
                                      f"(first: index {missing[0]})")
        ce = np.array([amps[j].ce for j in range(grid.n)], dtype=complex)
        cg = np.array([amps[j].cg for j in range(grid.n)], dtype=complex)
    ce = np.asarray(ce, dtype=complex)
    cg = np.asarray(cg, dtype=complex)
    if ce.shape != (grid.n,) or cg.shape != (grid.n,):
        raise IncompleteDataError(f"expected {grid.n} amplitudes, got {ce.shape} and {cg.shape}")
    if not (np.all(np.isfinite(ce)) and np.all(np.isfinite(cg))):
        raise IncompleteDataError("non-finite amplitudes (missing trajectories?)")
    phi = grid.profile
    return JointState(grid, phi * ce, phi * cg, time)


@dataclass
class MomentumDistribution:
    p_grid: np.ndarray
    phi_e: np.ndarray
    phi_g: np.ndarray
    dp: float
    mean_p: float
    std_p: float

    @property
    def density_e(self) -> np.ndarray:
        return np.abs(self.phi_e) ** 2

    @property
    def density_g(self) -> np.ndarray:
        return np.abs(self.phi_g) ** 2

    @property
    def density(self) -> np.ndarray:
        return self.density_e + self.density_g


def _to_momentum(grid: MeterGrid, psi: np.ndarray) -> np.ndarray:
    # x_j = -L + j h and p_k = k' dp with k' = -N/2..N/2-1
    p = grid.p_grid
    spec = np.fft.fftshift(np.fft.fft(psi))
    return grid.h / math.sqrt(2.0 * math.pi) * np.exp(1j * p * grid.half_width) * spec


def momentum_transform(js: JointState, edge_cells: int = 2, alias_tol: float = 1e-8
                       ) -> MomentumDistribution:
    grid = js.grid
    phi_e = _to_momentum(grid, js.amp_e)
    phi_g = _to_momentum(grid, js.amp_g)
    dens = np.abs(phi_e) ** 2 + np.abs(phi_g) ** 2
    edge = grid.dp * (dens[:edge_cells].sum() + dens[-edge_cells:].sum())
    if edge > alias_tol:
        raise AliasingError(f"momentum mass {edge:.2e} within {edge_cells} cells of the "
                            f"grid edge |p| = {math.pi / grid.h:.3g}")
    p = grid.p_grid
    w = grid.dp * dens
    total = w.sum()
    mean = float(np.dot(w, p) / total)
    var = float(np.dot(w, (p - mean) ** 2) / total)
    return MomentumDistribution(p, phi_e, phi_g, grid.dp, mean, math.sqrt(var))


def _d4(psi: np.ndarray, h: float) -> np.ndarray:
    pad = np.concatenate([np.zeros(2, complex), psi, np.zeros(2, complex)])
    return (pad[:-4] - 8.0 * pad[1:-3] + 8.0 * pad[3:-1] - pad[4:]) / (12.0 * h)


def mean_p_derivative(js: JointState) -> float:
    """<p> = sum_a Im h sum_j psi_a^* D psi_a with a 4th-order central difference D."""
    h = js.grid.h
    total = 0.0
    for psi in (js.amp_e, js.amp_g):
        total += float(np.imag(h * np.vdot(psi, _d4(psi, h))))
    return total


# -- grid propagation ---------------------------------------------------------

def required_grid_size(dx_param: float, p: Protocol, half_width: float,
                       n_min: int = DEFAULT_N) -> int:
    """
    Smallest power of two whose momentum window covers the expected spread.

    The phase gradient picked up from the coupling is bounded by
    int |omega|/2 dt = omega1 T / pi over the whole protocol.
    """
    p_kick = p.params.omega1 * p.total_duration / math.pi
    p_need = 8.0 / (2.0 * dx_param) + p_kick + 4.0
    n = n_min
    while n < MAX_N and math.pi / (2.0 * half_width / n) < p_need:
        n *= 2
    return n


@dataclass
class GridRun:
    """x-resolved propagation of the joint state on a meter grid."""

    grid: MeterGrid
    protocol: Protocol
    schedule: Schedule
    snapshot_index: np.ndarray
    ce: np.ndarray  # (nsnap, n)
    cg: np.ndarray
    active: np.ndarray  # bool mask of positions that were integrated
    sigma_y: np.ndarray  # (n_active, nsamples)
    norm_drift: np.ndarray  # (n_active,)

    @property
    def sample_times(self) -> np.ndarray:
        return self.schedule.sample_times

    @property
    def snapshot_times(self) -> np.ndarray:
        return self.schedule.sample_times[self.snapshot_index]

    def joint_state(self, k: int = -1) -> JointState:
        return assemble(self.grid, self.ce[k], self.cg[k], float(self.snapshot_times[k]))

    def joint_sigma_y(self) -> np.ndarray:
        """h * sum_j |phi_j|^2 <sy>(x_j, t), summed in grid order."""
        w = self.grid.h * self.grid.profile[self.active] ** 2
        return w @ self.sigma_y

    @property
    def max_norm_drift(self) -> float:
        return float(self.norm_drift.max()) if self.norm_drift.size else 0.0


def default_snapshots(sched: Schedule, per_segment: int = 9) -> np.ndarray:
    """Segment boundaries plus ``per_segment`` evenly spaced interior samples."""
    idx = [0]
    for first, last in sched.segment_sample_bounds:
        inner = np.linspace(first, last, per_segment + 2)[1:-1]
        idx.extend(int(round(v)) for v in inner)
        idx.append(last)
    return np.unique(idx)


def propagate_grid(grid: MeterGrid, p: Protocol, cfg: IntegratorConfig = IntegratorConfig(),
                   initial: QubitAmplitudes = QubitAmplitudes.excited(),
                   snapshot_index=None, per_segment: int = 9,
                   active_tol: float = ACTIVE_TOL) -> GridRun:
    """
    Integrate every grid position carrying resolvable weight.

    Positions with |phi(x)| < active_tol * max|phi| keep the initial qubit
    state; their weight is below double precision in every moment.
    """
    sched = build_schedule(p, cfg)
    if snapshot_index is None:
        snapshot_index = default_snapshots(sched, per_segment)
    phi = grid.profile
    active = np.abs(phi) >= active_tol * np.abs(phi).max()
    res = propagate_batch(grid.points[active], p, cfg, initial, snapshot_index, sched)
    nsnap = res.snapshot_index.size
    ce = np.full((nsnap, grid.n), initial.ce, dtype=complex)
    cg = np.full((nsnap, grid.n), initial.cg, dtype=complex)
    ce[:, active] = res.states[:, :, 0].T
    cg[:, active] = res.states[:, :, 1].T
    return GridRun(grid, p, sched, res.snapshot_index, ce, cg, active, res.sigma_y,
                   res.norm_drift)
