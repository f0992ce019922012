import pytest
import torch

from markovcot import nn, tasks
from markovcot.mlm import MLMHandle

torch.set_num_threads(1)


def tiny_config(**kw) -> nn.ModelConfig:
    base = dict(vocab_size=tasks.VOCAB_SIZE, context_len=96, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                init_seed=0, dtype="float64")
    base.update(kw)
    return nn.ModelConfig(**base)


def jittered(cfg: nn.ModelConfig, scale: float = 0.3, seed: int = 1) -> nn.ModelParams:
    """Random init plus noise so the model is far from uniform."""
    p = nn.init_params(cfg)
    g = torch.Generator().manual_seed(seed)
    for name in p.names():
        t = p.tensors[name]
        p.tensors[name] = t + scale * torch.randn(t.shape, generator=g, dtype=t.dtype)
    return p


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def params(cfg):
    return jittered(cfg)


@pytest.fixture
def handle(cfg):
    """Arithmetic-style handle with a short CoT cap; actor differs from the baseline."""
    base = jittered(cfg, seed=2)
    h = MLMHandle.from_params(base, cot_cap=6, cot_init=tasks.tokenize("cot:"), stop_token=tasks.tokenize("\n")[0],
                              answer_cue=tasks.tokenize("\nanswer: "))
    h.actor = jittered(cfg, seed=3)
    return h


# one line per acceptance criterion, echoed again after the test session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
