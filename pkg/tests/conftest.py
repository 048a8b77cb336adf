import numpy as np
import pytest

from promptforge.config import ModelConfig, TrainConfig, load_config
from promptforge.data import generate_task
from promptforge.engine import Model, train

# d=8 model from the gradient check; too narrow to learn but fast to differentiate
TOY = ModelConfig(d=8, d_v=8, d_l=8, L=2, heads=2, K=4, a=2, b=2, J=2, N=2, M_a=4,
                   M_b=5, vocab=64, patch_dim=4, tau=0.07)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        hi = f()
        x[idx] = old - h
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * h)
    return g


@pytest.fixture(scope="session")
def toy_cfg() -> ModelConfig:
    return TOY


@pytest.fixture(scope="session")
def toy_task():
    return generate_task(0, 4, 0.5, 2, 0.1, TOY, test_shots=2)


@pytest.fixture(scope="session")
def reference_config() -> tuple[ModelConfig, TrainConfig]:
    return load_config("reference.cfg")


@pytest.fixture(scope="session")
def reference_task(reference_config):
    cfg, tcfg = reference_config
    return generate_task(cfg.seed, cfg.K, tcfg.base_fraction, tcfg.shots, tcfg.noise, cfg,
                         tcfg.test_shots)


@pytest.fixture(scope="session")
def reference_run(reference_config, reference_task):
    """(initial model, trained model, history) on the reference task."""
    cfg, tcfg = reference_config
    initial = Model.build(cfg)
    trained, history = train(reference_task, cfg, tcfg)
    return initial, trained, history


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict} criterion {number:2d}: {detail}")
