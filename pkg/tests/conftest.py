import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def patchify_oracle(img: np.ndarray, P: int) -> np.ndarray:
    """Loop-based reference: patches row-major, pixels row-major inside a patch, channel fastest."""
    B, H, W, C = img.shape
    g = H // P
    out = np.zeros((B, g * g, P * P * C), dtype=img.dtype)
    for b in range(B):
        for gi in range(g):
            for gj in range(g):
                vals = []
                for r in range(P):
                    for c in range(P):
                        for ch in range(C):
                            vals.append(img[b, gi * P + r, gj * P + c, ch])
                out[b, gi * g + gj] = vals
    return out


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.VERDICTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
