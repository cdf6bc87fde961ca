"""Shared training-run cache and the acceptance summary printer."""

import time
from functools import lru_cache

import numpy as np
import pytest

from lfpo.config import TrainConfig
from lfpo.diffusion import DecodeConfig
from lfpo.envs import evaluate_prompts
from lfpo.trainer import eval_prompt_set, init_state, train

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}

# 312 iterations of 8 prompts x 8 completions = 19,968 rollout trajectories
BUDGET_TRAJECTORIES = 20_000
SMOKE_ITERATIONS = 500


def copy_config(seed: int, **overrides) -> TrainConfig:
    """The Copy task at its defaults: V_data=16, Lp=Lc=6, d=32."""
    return TrainConfig().replace(trainer__seed=seed, **overrides)


@lru_cache(maxsize=None)
def training_run(seed: int, mode: str = "all", iterations: int = SMOKE_ITERATIONS):
    config = copy_config(seed, lfpo__mode=mode, trainer__total_iterations=iterations)
    start = time.perf_counter()
    result = train(config)
    return result.metrics, time.perf_counter() - start


@lru_cache(maxsize=None)
def initial_eval(seed: int):
    """Greedy (exact reward, mean decode steps) of the untrained model on the held-out set."""
    config = copy_config(seed)
    greedy = DecodeConfig(config.decode.confidence_threshold, 0.0, config.decode.max_unmask)
    return evaluate_prompts(config.task, init_state(config).theta, config.model_config, greedy,
                            eval_prompt_set(config), return_steps=True)


def eval_rows(rows, max_trajectories=None):
    return [r for r in rows if r.eval_exact_reward is not None
            and (max_trajectories is None or r.trajectories <= max_trajectories)]


@pytest.fixture(scope="session")
def runs():
    return training_run


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
