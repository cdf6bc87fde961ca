"""Discrete masked diffusion: re-noising completions and iterative unmasking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserConfig, forward
from .errors import InvalidInputError


@dataclass
class Trajectory:
    prompt: np.ndarray
    completion: np.ndarray
    reward: float | None = None
    decode_steps: int = 0


@dataclass(frozen=True)
class DecodeConfig:
    """Reverse-process settings.

    ``max_unmask`` caps how many positions may be finalized in one step;
    ``None`` means no cap (the completion length).  ``temperature == 0``
    decodes greedily.
    """

    confidence_threshold: float = 0.9
    temperature: float = 1.0
    max_unmask: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.01:
            raise InvalidInputError("confidence_threshold must lie in [0, 1.01]")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if self.max_unmask is not None and self.max_unmask < 1:
            raise InvalidInputError("max_unmask must be >= 1")


def mask_count(t: int, completion_len: int) -> int:
    """Linear schedule: timestep ``t`` masks exactly ``t`` completion positions."""
    if not 1 <= t <= completion_len:
        raise InvalidInputError(f"timestep {t} outside [1, {completion_len}]")
    return t


def forward_mask(prompt, completion, t: int, rng: np.random.Generator, mask_id: int):
    """Mask exactly ``t`` completion positions chosen uniformly without replacement.

    Returns the full noised sequence (prompt followed by completion) and the
    boolean mask pattern over completion positions.
    """
    prompt = np.asarray(prompt)
    completion = np.asarray(completion)
    Lc = completion.shape[0]
    n_mask = mask_count(t, Lc)
    pattern = np.zeros(Lc, dtype=bool)
    pattern[rng.choice(Lc, size=n_mask, replace=False)] = True
    noised = np.where(pattern, mask_id, completion)
    return np.concatenate([prompt, noised]), pattern


def _completion_probs(logits, mask_id, temperature):
    """Softmax rows with the MASK token removed, plus the tempered sampling rows."""
    z = logits.copy()
    z[..., mask_id] = -np.inf
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    if temperature == 0 or temperature == 1:
        return p, p
    zt = z / temperature
    zt -= zt.max(axis=-1, keepdims=True)
    pt = np.exp(zt)
    pt /= pt.sum(axis=-1, keepdims=True)
    return p, pt


def decode_batch(params, prompts, cfg: DenoiserConfig, dconf: DecodeConfig, rngs):
    """Run the reverse process for a batch of prompts at once.

    Every sequence consumes only its own generator from ``rngs``, so results
    do not depend on how prompts are batched together.  Returns the
    completions ``(n, Lc)`` and the per-sequence step counts.
    """
    prompts = np.atleast_2d(np.asarray(prompts))
    n, Lp = prompts.shape
    Lc = cfg.seq_len - Lp
    if Lc < 1:
        raise InvalidInputError("prompt leaves no room for a completion")
    if len(rngs) != n:
        raise InvalidInputError("need one generator per prompt")
    cap = Lc if dconf.max_unmask is None else dconf.max_unmask
    mask_id = cfg.mask_id

    x = np.empty((n, cfg.seq_len), dtype=np.int64)
    x[:, :Lp] = prompts
    x[:, Lp:] = mask_id
    steps = np.zeros(n, dtype=np.int64)
    live = np.arange(n)
    while live.size:
        logits = forward(params, x[live], cfg)[:, Lp:, :]
        probs, sample_probs = _completion_probs(logits, mask_id, dconf.temperature)
        conf = probs.max(axis=-1)
        still_live = []
        for row, i in enumerate(live):
            masked = np.flatnonzero(x[i, Lp:] == mask_id)
            rank = np.argsort(-conf[row, masked], kind="stable")
            ordered = masked[rank]
            chosen = ordered[conf[row, ordered] >= dconf.confidence_threshold][:cap]
            if chosen.size == 0:
                chosen = ordered[:1]
            chosen = np.sort(chosen)
            if dconf.temperature == 0:
                toks = probs[row, chosen].argmax(axis=-1)
            else:
                # inverse-CDF draw; the MASK column is last with zero mass, so it is never hit
                cdf = np.cumsum(sample_probs[row, chosen], axis=-1)
                u = rngs[i].random(chosen.size)[:, None] * cdf[:, -1:]
                toks = (cdf <= u).sum(axis=-1)
            x[i, Lp + chosen] = toks
            steps[i] += 1
            if np.any(x[i, Lp:] == mask_id):
                still_live.append(i)
        live = np.asarray(still_live, dtype=np.int64)
    return x[:, Lp:].copy(), steps


def decode(params, prompt, cfg: DenoiserConfig, dconf: DecodeConfig,
           rng: np.random.Generator | None = None) -> Trajectory:
    prompt = np.asarray(prompt)
    if rng is None:
        rng = np.random.default_rng(dconf.seed)
    completion, steps = decode_batch(params, prompt[None], cfg, dconf, [rng])
    return Trajectory(prompt=prompt.copy(), completion=completion[0], decode_steps=int(steps[0]))


def mean_decode_steps(params, prompts, cfg: DenoiserConfig, dconf: DecodeConfig) -> float:
    """Average number of greedy reverse steps over a prompt set."""
    prompts = np.asarray(prompts)
    if prompts.ndim != 2 or prompts.shape[0] == 0:
        raise InvalidInputError("need a non-empty (n, Lp) prompt array")
    greedy = DecodeConfig(dconf.confidence_threshold, 0.0, dconf.max_unmask, dconf.seed)
    rngs = [np.random.default_rng(0) for _ in range(prompts.shape[0])]
    _, steps = decode_batch(params, prompts, cfg, greedy, rngs)
    return float(steps.mean())
