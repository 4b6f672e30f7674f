import pytest

from oscar.simdata.dataset import SimConfig, simulate_dataset

# one sphere subject, one 16x16 noise-free frame: the patch is the whole frame
TOY = SimConfig(train=1, val=0, test=0, sweeps=1, frames_per_sweep=1, samples=16, scanlines=16, grid=16,
                family="sphere", speckle=0.0)

# four tiny subjects with every split represented
MINI = SimConfig(train=2, val=1, test=1, sweeps=2, frames_per_sweep=2, samples=16, scanlines=16, grid=16,
                 family="vertebra", speckle=0.05)


@pytest.fixture(scope="session")
def toy_ds():
    return simulate_dataset(TOY)


@pytest.fixture(scope="session")
def mini_ds():
    return simulate_dataset(MINI)


# acceptance lines are echoed in the terminal summary so they survive output capture
_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def report():
    def emit(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        assert ok, line
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
