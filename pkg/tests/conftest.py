import numpy as np
import pytest

from dicache.numerics import SplitMix64
from dicache.sampler import SamplerConfig
from dicache.toydit import ModelConfig, init_weights

SMALL = ModelConfig(num_blocks=4, d_model=16, n_heads=2, n_tokens=16, weight_seed=3)


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(SMALL)


@pytest.fixture(scope="session")
def default_weights():
    return init_weights(ModelConfig())


def condition(d, seed=11):
    return SplitMix64(seed).gaussian_array(d).astype(np.float32)


def sampler_for(cfg: ModelConfig, num_steps=10, noise_seed=0) -> SamplerConfig:
    return SamplerConfig(num_steps=num_steps, noise_seed=noise_seed,
                         n_tokens=cfg.n_tokens, d_model=cfg.d_model)


ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call" and report.passed:
        return
    name = report.nodeid.split("::")[-1].split("[")[0]
    if name.startswith("test_ac"):
        ok = ACCEPTANCE_RESULTS.get(name, True) and report.passed
        ACCEPTANCE_RESULTS[name] = ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda n: int(n.split("_")[1][2:])):
        status = "PASS" if ACCEPTANCE_RESULTS[name] else "FAIL"
        terminalreporter.write_line(f"[{status}] AC{name.split('_')[1][2:]}: {name[8:].split('_', 1)[1]}")
