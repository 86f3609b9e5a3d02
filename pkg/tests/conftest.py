import numpy as np
import pytest
import torch

from postdenoise.config import CriticConfig, GeneratorConfig


def central_diff(f, t: torch.Tensor, step: float, index=None) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``t`` (modified in place)."""
    flat = t.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = torch.zeros(len(idx), dtype=torch.float64)
    for j, i in enumerate(idx):
        orig = flat[i].item()
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        out[j] = (up - down) / (2 * step)
    return out


def max_rel_err(analytic, numeric, scale_floor=1e-4) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, scale_floor * max_j |a_j|).

    The floor keeps round-off on near-zero entries from dominating.
    """
    a = torch.as_tensor(analytic).double().flatten()
    n = torch.as_tensor(numeric).double().flatten()
    floor = max(scale_floor * a.abs().max().item(), 1e-300)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
    return (a - n).abs().div(denom).max().item()


def fd_rel_err(loss, param, analytic, steps=(1e-5, 1e-6)) -> float:
    """Best :func:`max_rel_err` over several central-difference steps.

    Losses with a gradient penalty jump where a LeakyReLU pre-activation
    crosses zero, so one step can straddle a jump; a wrong gradient fails at
    every step.
    """
    return min(max_rel_err(analytic, central_diff(loss, param, h)) for h in steps)


@pytest.fixture
def tiny_gen_config():
    return GeneratorConfig(image_size=8, channels=1, widths=(4, 4))


@pytest.fixture
def tiny_critic_config():
    return CriticConfig(image_size=8, channels=1, widths=(4, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report: tests call ``record``; the lines are repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
