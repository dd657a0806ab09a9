import numpy as np
import pytest
import torch

from singleframe.config import ModelConfig
from singleframe.data import corpus_vocabulary
from singleframe.model import VideoTextModel
from singleframe.tokenizer import WordTokenizer


@pytest.fixture(scope="session")
def tok():
    return WordTokenizer(corpus_vocabulary())


@pytest.fixture(scope="session")
def cfg(tok):
    return ModelConfig(vocab_size=tok.vocab_size)


@pytest.fixture
def model(cfg):
    return VideoTextModel(cfg, seed=0).eval()


@pytest.fixture
def tiny_double():
    """D=8 float64 model with perturbed weights, for exact-ish comparisons."""
    cfg = ModelConfig(vocab_size=12, image_size=8, patch_size=4, hidden_dim=8, proj_dim=4, heads=2,
                      vision_layers=1, text_layers=1, multimodal_layers=1, temporal_layers=1, mlp_ratio=2,
                      max_text_len=6, t_train_temporal=3)
    m = VideoTextModel(cfg, seed=1).double()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name != "log_tau":
                p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return m.eval()


@pytest.fixture
def frames():
    g = torch.Generator().manual_seed(0)
    return torch.rand(3, 32, 32, 3, generator=g)


def random_frames(n, size=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, size, size, 3, generator=g, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
