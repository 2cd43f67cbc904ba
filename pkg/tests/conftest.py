import numpy as np
import pytest
import torch

from patchforge.archspec import ArchSpec, LayerSpec
from patchforge.dataio import SyntheticSpec, generate_synthetic_corpus


def fd_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f())
        flat[i] = old - eps
        lo = float(f())
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def tiny_arch(channels=(2, 3), input_channels=2) -> ArchSpec:
    layers = (
        LayerSpec("c1", "conv", 3, 1, 1, channels[0]),
        LayerSpec("c2", "conv", 3, 2, 1, channels[1]),
        LayerSpec("p3", "pool", 2, 2, 0),
    )
    return ArchSpec(layers, (0, 1, 2, 3, 3), input_channels, "tiny")


@pytest.fixture
def tiny_corpus(tmp_path):
    spec = SyntheticSpec(num_images=8, image_size=64, num_classes=3, texture_seed=3, val_fraction=0.25)
    paths = generate_synthetic_corpus(spec, tmp_path / "corpus")
    return spec, paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (number, title, passed, detail) here
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
