import math
import warnings

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chernmeter.model import CouplingLaw, DriveParams, Protocol, fig1_params, hamiltonian_matrix
from chernmeter.propagator import (
    IntegratorConfig,
    QubitAmplitudes,
    StepSizeError,
    StepSizeWarning,
    build_schedule,
    evolve,
    propagate_batch,
)


def reference_states(x, p, times):
    """Independent adaptive integration of i dc/dt = H c."""

    def rhs(t, y):
        k, tloc = p.locate(t)
        theta = math.pi * tloc / p.durations[k]
        delta = p.params.delta1 * math.cos(theta) + p.params.delta2
        omega = p.params.omega1 * math.sin(theta)
        g = 0.0 if p.coupling is CouplingLaw.OFF else 0.5 * omega
        c = y[:2] + 1j * y[2:]
        dc = -1j * hamiltonian_matrix(delta, omega, p.params.phi, g, x) @ c
        return np.concatenate([dc.real, dc.imag])

    out = {}
    y0 = np.array([1.0, 0.0, 0.0, 0.0])
    t0 = 0.0
    # integrate segment by segment so the solver never straddles a restart
    for k in range(p.n_segments):
        t1 = p.boundaries[k + 1]
        ts = sorted({t for t in times if t0 <= t <= t1} | {t1})
        sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", rtol=1e-11, atol=1e-12, t_eval=ts)
        for j, t in enumerate(sol.t):
            out.setdefault(t, sol.y[:2, j] + 1j * sol.y[2:, j])
        y0, t0 = sol.y[:, -1], t1
    return np.array([out[t] for t in times])


@pytest.mark.parametrize("x", [0.0, 0.35, -0.5])
def test_single_quench_matches_adaptive_reference(x):
    p = Protocol.single(fig1_params())
    traj = evolve(x, p)
    idx = np.arange(0, traj.times.size, 100)
    ref = reference_states(x, p, traj.times[idx])
    assert np.max(np.abs(traj.states[idx] - ref)) < 1e-7


def test_triple_quench_matches_adaptive_reference():
    p = Protocol.triple(fig1_params())
    traj = evolve(0.35, p)
    times = [traj.times[b[1]] for b in traj.segment_bounds]
    ref = reference_states(0.35, p, times)
    got = traj.states[[b[1] for b in traj.segment_bounds]]
    assert np.max(np.abs(got - ref)) < 1e-7


def test_pure_detuning_gives_analytic_phase():
    p = Protocol.single(DriveParams(40.0, 7.0, 0.0, tq=1.0))
    traj = evolve(0.0, p)
    t = traj.times
    phase = -0.5 * (p.params.delta1 / math.pi * np.sin(math.pi * t) + p.params.delta2 * t)
    assert np.max(np.abs(traj.ce - np.exp(1j * phase))) < 1e-10
    assert np.max(np.abs(traj.cg)) == 0.0


def test_norm_is_conserved():
    p = Protocol.triple(fig1_params())
    res = propagate_batch(np.linspace(-6, 6, 13), p)
    assert res.norm_drift.max() < 1e-8
    n = np.abs(res.states) ** 2
    assert np.max(np.abs(n.sum(axis=-1) - 1)) < 1e-8


def test_doubling_steps_changes_little():
    p = Protocol.single(fig1_params())
    xs = [0.0, 0.35, 3.0]
    a = propagate_batch(xs, p, IntegratorConfig(20000)).states[:, -1]
    b = propagate_batch(xs, p, IntegratorConfig(40000)).states[:, -1]
    assert np.max(np.abs(a - b)) < 1e-8


def test_batches_are_bitwise_reproducible():
    p = Protocol.single(fig1_params())
    xs = np.linspace(-2, 2, 9)
    a = propagate_batch(xs, p)
    b = propagate_batch(xs, p)
    c = propagate_batch(xs[3:4], p)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.states[3], c.states[0])


def test_diabatic_sigma_y_sign_at_mid_quench():
    # C = -int B dtheta = +1 with B proportional to <sy> sin(theta) needs <sy> < 0
    traj = evolve(0.0, Protocol.single(fig1_params()))
    k = int(np.argmin(np.abs(traj.times - 0.5)))
    assert -0.2 < traj.sigma_y[k] < -0.1


def test_coupled_hamiltonian_mirror_relation():
    # H(-x) is the complex conjugate of H(x) for phi = 0
    for x in (0.1, 0.35, 2.0):
        h = hamiltonian_matrix(3.0, 2.0, 0.0, 1.0, x)
        assert np.array_equal(hamiltonian_matrix(3.0, 2.0, 0.0, 1.0, -x), h.conj())


def test_triple_quench_branches_follow_plus_minus_plus():
    traj = evolve(0.0, Protocol.triple(fig1_params(0.01 * 30.0)))
    for (first, last), want in zip(traj.segment_bounds, (1, -1, 1)):
        inner = traj.branch[first + 5:last - 5]
        assert np.all(inner == want)
    # north -> south -> north -> south
    ends = [0] + [b[1] for b in traj.segment_bounds]
    assert np.sign(traj.bloch[ends, 2]).tolist() == [1, -1, 1, -1]


def test_schedule_layout():
    p = Protocol.triple(fig1_params())
    cfg = IntegratorConfig(2000, 101)
    s = build_schedule(p, cfg)
    assert s.delta.shape == (8000, 3)
    assert s.sample_times.size == 401
    assert s.segment_sample_bounds == ((0, 100), (100, 300), (300, 400))
    assert s.sample_theta[100] == pytest.approx(math.pi)
    assert s.sample_segment[100] == 0 and s.sample_segment[101] == 1
    assert s.sample_times[-1] == pytest.approx(4.0)


@pytest.mark.parametrize("steps,samples", [(1000, 7), (0, 2), (100, 1)])
def test_invalid_integrator_config(steps, samples):
    with pytest.raises(ValueError):
        IntegratorConfig(steps, samples)


def test_coarse_steps_warn_or_raise():
    p = Protocol.single(fig1_params())
    with pytest.warns(StepSizeWarning):
        propagate_batch([0.0], p, IntegratorConfig(1000, 101))
    with pytest.raises(StepSizeError):
        propagate_batch([0.0], p, IntegratorConfig(1000, 101, strict=True))
    with warnings.catch_warnings():
        warnings.simplefilter("error", StepSizeWarning)
        propagate_batch([0.0], p)


def test_unnormalized_initial_state_rejected():
    with pytest.raises(ValueError, match="normalized"):
        propagate_batch([0.0], Protocol.single(fig1_params()), initial=QubitAmplitudes(1.0, 1.0))


def test_snapshot_index_out_of_range():
    with pytest.raises(ValueError, match="snapshot"):
        propagate_batch([0.0], Protocol.single(fig1_params()), snapshot_index=[5000])


def test_degeneracy_flagged_at_level_touching():
    p = Protocol.single(fig1_params(30.0), CouplingLaw.OFF)
    assert evolve(0.0, p, IntegratorConfig(2000, 101)).degenerate
    assert not evolve(0.0, Protocol.single(fig1_params()), IntegratorConfig(20000, 101)).degenerate
