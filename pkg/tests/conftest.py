import time

import numpy as np
import pytest

from devsplit.svm import build_svm_problem, load_liver_disorders, reference_solution, run_algorithm

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
TIMINGS: dict[str, float] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def svm():
    return build_svm_problem(load_liver_disorders())


@pytest.fixture(scope="session")
def svm_reference(svm):
    t0 = time.perf_counter()
    ref = reference_solution(svm, tol=1e-13)
    TIMINGS["reference"] = time.perf_counter() - t0
    return ref


@pytest.fixture(scope="session")
def svm_runs(svm, svm_reference):
    """CP and inertial runs at lambda = 1 against the shared reference, with wall-clock times."""
    out = {}
    for alg in ("cp", "alg4"):
        t0 = time.perf_counter()
        tr = run_algorithm(svm, alg, svm_reference, lam=1.0, zeta_seed=0)
        out[alg] = (tr, time.perf_counter() - t0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
