import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DEFAULT_MNIST = Path("/root/data/mnist")


def mnist_dir():
    env = os.environ.get("MIRU_DATA")
    for candidate in (env, DEFAULT_MNIST):
        if candidate and (Path(candidate) / "t10k-labels-idx1-ubyte").exists():
            return Path(candidate)
        if candidate and (Path(candidate) / "t10k-labels-idx1-ubyte.gz").exists():
            return Path(candidate)
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not available (set MIRU_DATA)")
    return path


@pytest.fixture(scope="session")
def mnist(mnist_path):
    from miru.data import load_mnist
    return load_mnist(mnist_path)


# -- acceptance reporting --------------------------------------------------

ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    """Log one checked quantity of an acceptance criterion."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
    print(f"[{criterion}] {'ok  ' if passed else 'MISS'} {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE, key=lambda c: (int(c.split()[0]), c)):
        checks = ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        tr.write_line(f"{verdict} criterion {criterion}")
        for ok, detail in checks:
            tr.write_line(f"      {'ok  ' if ok else 'MISS'} {detail}")
