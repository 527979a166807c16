import numpy as np
import pytest

from pnpri.rimodel import KernelSpec, UVCoverage, build_operator, operator_norm

# Acceptance outcomes, filled by the report hook and printed at the end.
_ACCEPTANCE = {}


def grid_coverage(n):
    """Every DFT frequency of an ``n x n`` image, on grid."""
    k = 2 * np.pi * (np.arange(n) - n // 2) / n
    uu, vv = np.meshgrid(k, k)
    return UVCoverage(uu.ravel(), vv.ravel())


def unitary_operator(n):
    op = build_operator(grid_coverage(n), (n, n), 1.0, KernelSpec("nearest", 1))
    operator_norm(op)
    return op


def random_coverage(m, seed, limit=np.pi):
    rng = np.random.default_rng(seed)
    return UVCoverage(rng.uniform(-limit, limit, m), rng.uniform(-limit, limit, m))


def dense_nudft(uv, dims, grid_shape):
    """Explicit ``sum_n x_n exp(-i (u c + v r))`` matrix, same normalisation as the operator.

    Pixel coordinates are centred: ``c = col - width // 2``, ``r = row - height // 2``.
    """
    width, height = dims
    ky, kx = grid_shape
    r, c = np.meshgrid(np.arange(height) - height // 2, np.arange(width) - width // 2, indexing="ij")
    phase = np.outer(uv.u, c.ravel()) + np.outer(uv.v, r.ravel())
    return uv.weights[:, None] * np.exp(-1j * phase) / np.sqrt(kx * ky)


def real_normal_matrix(a):
    """Dense ``Re(A^H A)``, the normal operator on real images."""
    return (a.conj().T @ a).real


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for name, value in report.user_properties:
        if name == "criterion":
            _ACCEPTANCE[value] = (report.outcome, dict(report.user_properties).get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split(":")[0])):
        outcome, measured = _ACCEPTANCE[key]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  #{key}  {measured}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
