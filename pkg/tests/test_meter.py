import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chernmeter.meter import (
    AliasingError,
    GridTooNarrowError,
    IncompleteDataError,
    JointState,
    assemble,
    default_snapshots,
    make_grid,
    mean_p_derivative,
    momentum_transform,
    propagate_grid,
    required_grid_size,
)
from chernmeter.model import CouplingLaw, Protocol, fig1_params
from chernmeter.propagator import IntegratorConfig, QubitAmplitudes, build_schedule


def chirped(grid, k=0.0, a=0.0, mix=0.0):
    """Meter profile with phase k x + a x^2, split between |e> and |g>."""
    phi = grid.profile * np.exp(1j * (k * grid.points + a * grid.points**2))
    return JointState(grid, math.cos(mix) * phi, 1j * math.sin(mix) * phi)


@pytest.mark.parametrize("dx", [0.05, 0.3, 1.0, 3.0])
def test_grid_profile_is_normalized_and_contained(dx):
    g = make_grid(dx)
    assert g.h * np.sum(g.profile**2) == pytest.approx(1.0, abs=1e-14)
    assert g.points[0] == -g.half_width and g.points[g.n // 2] == 0.0
    assert g.dp == pytest.approx(2 * math.pi / (2 * g.half_width))


@pytest.mark.parametrize("n", [100, 1000, 128])
def test_grid_size_must_be_power_of_two(n):
    with pytest.raises(ValueError, match="power of two"):
        make_grid(1.0, n)


def test_explicit_half_width_too_narrow():
    with pytest.raises(GridTooNarrowError):
        make_grid(1.0, 1024, 3.0)
    assert make_grid(1.0, 1024, 9.0).half_width == 9.0


def test_nonpositive_width_rejected():
    with pytest.raises(ValueError):
        make_grid(0.0)


@settings(max_examples=40, deadline=None)
@given(dx=st.floats(0.2, 3.0), k=st.floats(-5.0, 5.0), a=st.floats(-0.3, 0.3),
       mix=st.floats(0.0, math.pi))
def test_chirped_gaussian_moments(dx, k, a, mix):
    # phase k x + a x^2 on a Gaussian: <p> = k, var = 1/(4 dx^2) + 4 a^2 dx^2
    grid = make_grid(dx, 4096)
    md = momentum_transform(chirped(grid, k, a, mix))
    assert md.mean_p == pytest.approx(k, abs=1e-9)
    assert md.std_p == pytest.approx(math.sqrt(0.25 / dx**2 + 4 * a * a * dx * dx), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(dx=st.floats(0.2, 3.0), k=st.floats(-5.0, 5.0), a=st.floats(-0.3, 0.3))
def test_parseval_and_derivative_route(dx, k, a):
    grid = make_grid(dx, 4096)
    js = chirped(grid, k, a, 0.4)
    md = momentum_transform(js)
    assert md.dp * md.density.sum() == pytest.approx(js.norm(), abs=1e-12)
    assert mean_p_derivative(js) == pytest.approx(md.mean_p, abs=1e-6)


def test_momentum_distribution_of_plain_gaussian():
    grid = make_grid(0.5, 1024)
    md = momentum_transform(chirped(grid))
    expected = np.exp(-2 * 0.25 * md.p_grid**2) * math.sqrt(2 * 0.25 / math.pi)
    assert np.max(np.abs(md.density - expected)) < 1e-12
    assert np.max(md.density_g) == 0.0


def test_aliasing_detected():
    grid = make_grid(1.0, 256)
    with pytest.raises(AliasingError):
        momentum_transform(chirped(grid, k=49.5))


def test_assemble_from_arrays_and_mapping():
    grid = make_grid(1.0, 256)
    ce = np.ones(256, complex)
    cg = np.zeros(256, complex)
    js = assemble(grid, ce, cg)
    assert js.norm() == pytest.approx(1.0)
    amps = {j: QubitAmplitudes(1.0 + 0j, 0j) for j in range(256)}
    assert np.array_equal(assemble(grid, amps, None).amp_e, js.amp_e)


def test_assemble_reports_missing_positions():
    grid = make_grid(1.0, 256)
    amps = {j: QubitAmplitudes.excited() for j in range(255)}
    with pytest.raises(IncompleteDataError, match="255"):
        assemble(grid, amps, None)
    ce = np.ones(256, complex)
    ce[7] = np.nan
    with pytest.raises(IncompleteDataError):
        assemble(grid, ce, np.zeros(256, complex))
    with pytest.raises(IncompleteDataError):
        assemble(grid, np.ones(10, complex), np.zeros(10, complex))


def test_required_grid_size_grows_for_narrow_meters():
    p = Protocol.single(fig1_params())
    assert required_grid_size(1.0, p, 8.0) == 1024
    n = required_grid_size(0.01, p, 6.0)
    assert n > 1024 and math.pi / (12.0 / n) >= 400.0


def test_default_snapshots_cover_boundaries():
    s = build_schedule(Protocol.triple(fig1_params()), IntegratorConfig(2000, 101))
    idx = default_snapshots(s, 9)
    for first, last in s.segment_sample_bounds:
        assert first in idx and last in idx
    assert idx.size == 1 + 3 * 10


def test_uncoupled_meter_is_untouched():
    p = Protocol.single(fig1_params(), CouplingLaw.OFF)
    run = propagate_grid(make_grid(1.0, 256), p, IntegratorConfig(20000, 101))
    md = momentum_transform(run.joint_state())
    assert abs(md.mean_p) < 1e-12
    assert md.std_p == pytest.approx(0.5, rel=1e-12)


def test_inactive_positions_keep_initial_state():
    grid = make_grid(0.1, 1024, 6.0)
    run = propagate_grid(grid, Protocol.single(fig1_params()), IntegratorConfig(20000, 101))
    assert not run.active.all()
    assert np.all(run.ce[-1, ~run.active] == 1.0)
    assert run.sigma_y.shape[0] == run.active.sum()
