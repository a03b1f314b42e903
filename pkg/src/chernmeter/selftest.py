"""Fast invariant checks run by ``chernmeter selftest``."""

from __future__ import annotations

import numpy as np

from . import analysis
from .meter import make_grid, mean_p_derivative, momentum_transform, propagate_grid
from .model import (
    CouplingLaw,
    DriveParams,
    Protocol,
    adiabatic_energy,
    fig1_params,
    hamiltonian_matrix,
)
from .propagator import IntegratorConfig, evolve


def _hamiltonian():
    worst = 0.0
    for delta, omega, x in [(1.3, 0.7, 0.4), (-2.0, 5.0, -1.5), (0.0, 1.0, 3.0)]:
        h = hamiltonian_matrix(delta, omega, 0.0, 0.5 * omega, x)
        ev = np.linalg.eigvalsh(h)
        worst = max(worst, np.max(np.abs(h - h.conj().T)),
                    abs(ev[1] - adiabatic_energy(delta, omega, x)))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def _beta():
    worst = max(abs(analysis.beta_closed_form(d) - analysis.beta_quadrature(d))
                for d in (0.01, 0.1, 0.5, 1.0, 3.0))
    return worst < 1e-8, f"closed form vs quadrature {worst:.1e}"


def _bare_chern():
    b = fig1_params()
    c_top = analysis.chern_integral(analysis.berry_curvature(
        evolve(0.0, Protocol.single(b, CouplingLaw.OFF))))
    c_triv = analysis.chern_integral(analysis.berry_curvature(
        evolve(0.0, Protocol.single(b.with_delta2(2 * b.delta1), CouplingLaw.OFF))))
    ok = abs(c_top - 1) < 0.02 and abs(c_triv) < 0.02
    return ok, f"C = {c_top:.5f} (topological), {c_triv:.2e} (trivial)"


def _joint_state():
    p = Protocol.single(DriveParams.from_mhz(30.0, -10.0, 10.0))
    grid = make_grid(0.5, 4096)
    run = propagate_grid(grid, p, IntegratorConfig())
    js0, js = run.joint_state(0), run.joint_state(-1)
    md = momentum_transform(js)
    dens = np.max(np.abs(js.position_density - js0.position_density))
    parseval = abs(md.dp * md.density.sum() - js.norm())
    deriv = abs(mean_p_derivative(js) - md.mean_p)
    heis = abs(analysis.heisenberg_mean_p(run)[-1] - md.mean_p)
    ok = dens < 1e-9 and parseval < 1e-10 and deriv < 1e-6 and heis < 1e-4
    return ok, (f"density {dens:.1e}, Parseval {parseval:.1e}, derivative {deriv:.1e}, "
                f"Heisenberg {heis:.1e}")


def _beta_law():
    p = Protocol.single(DriveParams.from_mhz(30.0, -10.0, 10.0))
    md = momentum_transform(propagate_grid(make_grid(1.0), p).joint_state(-1))
    rel = abs(md.mean_p / analysis.beta_closed_form(1.0) - 1)
    return rel < 0.03, f"<p>/beta - 1 = {rel:.1e} at dx = 1"


CHECKS = [
    ("hamiltonian hermitian with gap 2E+", _hamiltonian),
    ("beta closed form", _beta),
    ("bare Chern plateaus", _bare_chern),
    ("joint-state identities", _joint_state),
    ("beta law", _beta_law),
]


def run_selftest() -> int:
    failed = 0
    for name, check in CHECKS:
        try:
            ok, info = check()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, info = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {info}")
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed")
    return 1 if failed else 0
