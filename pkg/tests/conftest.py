import numpy as np
import pytest
import torch

from invmark.tensor_core import ModelConfig

# 32x32 cover, 4x4 watermark: 16 tokens on both branches
SMALL = dict(
    image_size=32, patch_cover=8, wm_size=4, patch_wm=1, attn_dim=16, heads=2, tf_blocks=1,
    wm_embed_dim=4, extractor_in_channels=8, extractor_expand=(4, 6, 8), extractor_fc=8,
    extractor_reduce=(6, 4, 1), conv_baseline_filters=(6, 6),
)

# 16x16 cover for finite differences, which cost two forwards per parameter
TINY = dict(
    image_size=16, patch_cover=4, wm_size=4, patch_wm=1, attn_dim=8, heads=2, tf_blocks=1,
    wm_embed_dim=4, extractor_in_channels=4, extractor_expand=(3, 4, 5), extractor_fc=6,
    extractor_reduce=(4, 3, 1), conv_baseline_filters=(3, 3),
)


@pytest.fixture
def small_cfg():
    return ModelConfig(**SMALL)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_images(n, size, seed=0, channels=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, size, size, channels), generator=g)


def rand_bits(n, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand((n, size, size), generator=g) < 0.5).to(torch.uint8)


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    line = f"ACCEPTANCE #{number} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
