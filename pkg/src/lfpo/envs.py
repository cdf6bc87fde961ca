"""Synthetic tasks with programmatically verifiable rewards."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .denoiser import DenoiserConfig
from .diffusion import DecodeConfig, decode_batch
from .errors import InvalidInputError

OPEN, CLOSE = 0, 1


class TaskKind(str, Enum):
    COPY = "copy"
    REVERSE = "reverse"
    MOD_SUM = "mod_sum"
    MAJORITY = "majority"
    PAREN_BALANCE = "paren_balance"


class RewardMode(str, Enum):
    EXACT = "exact"
    DENSE = "dense"


@dataclass(frozen=True)
class TaskSpec:
    """A task over data tokens ``[0, data_vocab)``; the model vocabulary adds at least MASK.

    ``vocab_size`` defaults to ``data_vocab + 1`` so the last id is MASK.
    """

    kind: TaskKind = TaskKind.COPY
    data_vocab: int = 16
    prompt_len: int = 6
    completion_len: int = 6
    reward_mode: RewardMode = RewardMode.DENSE
    vocab_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        if self.vocab_size is None:
            object.__setattr__(self, "vocab_size", self.data_vocab + 1)
        if self.prompt_len < 1:
            raise InvalidInputError("prompt_len must be >= 1")
        if self.completion_len < 1:
            raise InvalidInputError("completion_len must be >= 1")
        if not 2 <= self.data_vocab < self.vocab_size:
            raise InvalidInputError("need 2 <= data_vocab < vocab_size (MASK is vocab_size - 1)")
        if self.kind in (TaskKind.COPY, TaskKind.REVERSE) and self.prompt_len != self.completion_len:
            raise InvalidInputError(f"{self.kind.value} requires prompt_len == completion_len")
        if self.kind is TaskKind.PAREN_BALANCE and self.completion_len % 2:
            raise InvalidInputError("paren_balance requires an even completion_len")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.completion_len

    def with_mode(self, mode: RewardMode) -> "TaskSpec":
        return TaskSpec(self.kind, self.data_vocab, self.prompt_len, self.completion_len,
                        mode, self.vocab_size)


@dataclass
class RewardOutcome:
    reward: float
    correct: np.ndarray
    malformed: bool = False


def sample_prompt(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, spec.data_vocab, size=spec.prompt_len)


def sample_prompts(spec: TaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, spec.data_vocab, size=(n, spec.prompt_len))


def target_completion(spec: TaskSpec, prompt) -> np.ndarray | None:
    """The unique correct completion, or ``None`` for tasks with many answers."""
    prompt = np.asarray(prompt)
    Lc = spec.completion_len
    if spec.kind is TaskKind.COPY:
        return prompt.copy()
    if spec.kind is TaskKind.REVERSE:
        return prompt[::-1].copy()
    if spec.kind is TaskKind.MAJORITY:
        counts = Counter(prompt.tolist())
        best = max(counts.values())
        return np.full(Lc, min(tok for tok, c in counts.items() if c == best))
    if spec.kind is TaskKind.MOD_SUM:
        out = np.zeros(Lc, dtype=np.int64)
        out[0] = int(prompt.sum()) % spec.data_vocab
        return out
    return None


def balanced_prefix_len(completion) -> int:
    """Length of the longest prefix that can still be completed to a balanced string of the same length."""
    n = len(completion)
    depth = 0
    for i, tok in enumerate(completion):
        if tok == OPEN:
            depth += 1
        elif tok == CLOSE:
            depth -= 1
        else:
            return i
        if depth < 0 or depth > n - (i + 1):
            return i
    return n


def is_balanced(completion) -> bool:
    depth = 0
    for tok in completion:
        if tok == OPEN:
            depth += 1
        elif tok == CLOSE:
            depth -= 1
            if depth < 0:
                return False
        else:
            return False
    return depth == 0


def reward(spec: TaskSpec, prompt, completion) -> RewardOutcome:
    completion = np.asarray(completion)
    Lc = spec.completion_len
    if completion.shape != (Lc,) or np.any(completion == spec.mask_id) \
            or np.any(completion < 0) or np.any(completion >= spec.vocab_size):
        return RewardOutcome(0.0, np.zeros(Lc, dtype=bool), malformed=True)

    if spec.kind is TaskKind.PAREN_BALANCE:
        prefix = balanced_prefix_len(completion)
        correct = np.arange(Lc) < prefix
        if spec.reward_mode is RewardMode.EXACT:
            return RewardOutcome(1.0 if is_balanced(completion) else 0.0, correct)
        return RewardOutcome(prefix / Lc, correct)

    correct = completion == target_completion(spec, prompt)
    if spec.reward_mode is RewardMode.EXACT:
        return RewardOutcome(float(correct.all()), correct)
    return RewardOutcome(float(correct.mean()), correct)


def batch_rewards(spec: TaskSpec, prompts, completions) -> np.ndarray:
    return np.array([reward(spec, p, c).reward for p, c in zip(prompts, completions)])


def evaluate(spec: TaskSpec, params, model_cfg: DenoiserConfig, dconf: DecodeConfig,
             n_prompts: int, rng: np.random.Generator, return_steps: bool = False):
    """Greedy-decode ``n_prompts`` fresh prompts and return the mean exact reward."""
    if n_prompts < 1:
        raise InvalidInputError("n_prompts must be >= 1")
    prompts = sample_prompts(spec, n_prompts, rng)
    return evaluate_prompts(spec, params, model_cfg, dconf, prompts, return_steps)


def evaluate_prompts(spec: TaskSpec, params, model_cfg: DenoiserConfig, dconf: DecodeConfig,
                     prompts, return_steps: bool = False):
    greedy = DecodeConfig(dconf.confidence_threshold, 0.0, dconf.max_unmask, dconf.seed)
    rngs = [np.random.default_rng(0) for _ in range(len(prompts))]
    completions, steps = decode_batch(params, prompts, model_cfg, greedy, rngs)
    exact = spec.with_mode(RewardMode.EXACT)
    score = float(batch_rewards(exact, prompts, completions).mean())
    return (score, float(steps.mean())) if return_steps else score
