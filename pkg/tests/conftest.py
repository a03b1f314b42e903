import warnings

import pytest

from chernmeter.propagator import StepSizeWarning

# criterion id -> list of (clause, passed, detail)
ACCEPTANCE = {}


def record(criterion: int, clause: str, passed: bool, detail: str):
    ACCEPTANCE.setdefault(criterion, []).append((clause, bool(passed), detail))


@pytest.fixture(autouse=True)
def _quiet_step_warnings():
    # wide meters push |x| beyond the step-size rule of thumb; accuracy is
    # checked directly where it matters
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        clauses = ACCEPTANCE[crit]
        ok = all(c[1] for c in clauses)
        detail = "; ".join(f"[{'ok' if p else 'FAIL'}] {name}: {d}" for name, p, d in clauses)
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {detail}")
