import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = []


def central_diff_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(x))
            flat[i] = orig - eps
            lo = float(f(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_grad(f, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_error(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def record_criterion(number, name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    from nervseg.data import synth_generate

    root = tmp_path_factory.mktemp("synth64")
    synth_generate(root, 12, 64, seed=3)
    return root
