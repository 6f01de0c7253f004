import numpy as np
import pytest

from linchain.adapters import AdapterConfig, init_adapter

ACCEPTANCE_LINES = []


def random_adapter(rng, method="linchain", d_in=None, d_out=None, chain_dims=None, scaling=1.0, low=-1.0, high=1.0):
    """Adapter whose w0 and trainable matrices are all uniform on [low, high]."""
    d_in = d_in or int(rng.integers(2, 17))
    d_out = d_out or int(rng.integers(2, 17))
    if chain_dims is None:
        r = int(rng.integers(1, min(d_in, d_out) + 1))
        chain_dims = {"lora": [r], "moslora": [r, r], "linchain": [r, r, r]}[method]
    cfg = AdapterConfig(method, d_in, d_out, tuple(chain_dims), scaling=scaling)
    ad = init_adapter(cfg, rng.uniform(low, high, (d_in, d_out)))
    return ad.with_params({k: rng.uniform(low, high, p.shape) for k, p in ad.params().items()})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def accept_report():
    def report(number, passed, detail):
        ACCEPTANCE_LINES.append(f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {detail}")
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
