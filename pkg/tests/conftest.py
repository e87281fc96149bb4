import numpy as np
import pytest

from wavedenoise.model import ModelConfig, build_model, edge_margins, forward, receptive_field, target_offset

ACCEPTANCE_LINES: list[str] = []

# the small configuration used throughout: 1 stack [1, 2, 4], 8 channels, finals [16, 8]
TOY = ModelConfig(stacks=1, dilations_per_stack=(1, 2, 4), residual_channels=8, skip_channels=8,
                  final_channels=(16, 8), target_field=8)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def toy_model():
    return build_model(TOY, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sliding_oracle(model, x, condition=0):
    """One forward per output sample on its own window (target field of 1)."""
    cfg = model.config
    rf = receptive_field(cfg)
    left, right = edge_margins(cfg)
    ctx = target_offset(cfg)
    padded = np.concatenate([np.zeros(ctx + left), x, np.zeros(rf - 1 - ctx + right)])
    span = rf + left + right
    windows = np.lib.stride_tricks.sliding_window_view(padded, span)
    out = np.empty(len(x))
    for start in range(0, len(x), 2000):
        chunk = windows[start:start + 2000]
        y = forward(model, chunk[:, None, :], [condition] * len(chunk)).data[:, 0]
        assert y.shape[1] == 1 + left + right
        out[start:start + len(chunk)] = y[:, left]
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
