import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture
def t2_schedule():
    from shortdf.schedule import NoiseSchedule

    return NoiseSchedule(T=2, beta_start=0.1, beta_end=0.2)


@pytest.fixture
def quarter_schedule():
    """One step with alpha_bar_1 = 0.25."""
    from shortdf.schedule import NoiseSchedule

    return NoiseSchedule(T=1, beta_start=0.75, beta_end=0.75)


def linear_model(x, t):
    return 0.1 * x


class ToyLinear(torch.nn.Module):
    """eps = W x + b + c * (t / 100) + d * sin(t): 10 parameters for 2D data."""

    def __init__(self, seed=0, dtype=torch.float64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.W = torch.nn.Parameter(0.3 * torch.randn(2, 2, generator=g, dtype=dtype))
        self.b = torch.nn.Parameter(0.3 * torch.randn(2, generator=g, dtype=dtype))
        self.c = torch.nn.Parameter(0.3 * torch.randn(2, generator=g, dtype=dtype))
        self.d = torch.nn.Parameter(0.3 * torch.randn(2, generator=g, dtype=dtype))

    def forward(self, x, t):
        t = float(t)
        return x @ self.W.T + self.b + self.c * (t / 100.0) + self.d * torch.sin(torch.tensor(t, dtype=x.dtype))


class TwoParam(torch.nn.Module):
    """eps = a * x + b on 1D data."""

    def __init__(self, a=0.5, b=-0.2):
        super().__init__()
        self.a = torch.nn.Parameter(torch.tensor([a], dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor([b], dtype=torch.float64))

    def forward(self, x, t):
        return self.a * x + self.b


def finite_difference_check(model, loss_fn, h=1e-5):
    """Worst relative gap between autograd and central differences over all parameters."""
    import itertools

    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            grad = p.grad.clone()
            for idx in itertools.product(*(range(n) for n in p.shape)):
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_fn().item()
                p[idx] = orig - h
                down = loss_fn().item()
                p[idx] = orig
                fd = (up - down) / (2 * h)
                an = grad[idx].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


# ------------------------------------------------------------------ acceptance report

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """``criterion(key, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def record(key, ok, detail=""):
        _CRITERIA[key] = (bool(ok), detail)
        assert ok, f"criterion {key} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
