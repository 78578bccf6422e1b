import pytest
import torch

from promptstyle.diffusion import ToyDenoiser, build_noise_schedule, freeze

ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, ok: bool, detail: str = ""):
    ACCEPTANCE_LINES.append(f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def micro_model():
    """Float64 denoiser with 310 parameters for finite-difference checks."""
    torch.manual_seed(0)
    m = ToyDenoiser(in_channels=3, widths=(1, 1, 1), conditioning_dim=4, time_dim=4).double()
    return freeze(m)


@pytest.fixture
def micro_sched():
    return build_noise_schedule(8, 0.05, 0.4)


@pytest.fixture(scope="session")
def toy():
    from toysystem import build

    return build()
