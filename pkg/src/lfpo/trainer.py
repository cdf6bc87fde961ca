"""The LFPO training loop, AdamW, the EMA reference and a likelihood-based PG baseline.

One outer iteration:

1. roll out ``group_size`` trajectories for each of ``batch_prompts`` prompts
   from the reference parameters and score them;
2. draw ``strata`` stratified timesteps per trajectory, re-noise, and minimize
   the reward-weighted contrastive loss block by block;
3. move the reference parameters toward the policy by EMA.

Every random draw comes from a generator keyed on ``(seed, stream, iteration, ...)``
so a run is reproducible bit for bit and independent of block layout.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import denoiser
from .config import TrainConfig
from .diffusion import DecodeConfig, Trajectory, decode_batch, forward_mask
from .envs import batch_rewards, evaluate_prompts, sample_prompts
from .errors import InvalidInputError, TrainingDivergedError
from .objective import batch_sequence_loss
from .scheduler import AccumMode, Block, accumulate_gradients, build_blocks

log = logging.getLogger(__name__)

# generator stream ids
_PROMPTS, _DECODE, _BLOCKS, _MASKS, _EVAL, _BASELINE_T = range(1, 7)


def _rng(seed, *key):
    return np.random.default_rng([seed, *key])


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(theta, grad, state: OptimizerState, lr: float, b1: float = 0.9, b2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam step with decoupled weight decay; returns new ``(theta, state)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise InvalidInputError("parameter, gradient and optimizer state shapes differ")
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = theta - lr * weight_decay * theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, OptimizerState(m, v, step)


def ema_update(theta_old, theta, alpha: float) -> np.ndarray:
    theta_old = np.asarray(theta_old, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta_old.shape != theta.shape:
        raise InvalidInputError("EMA shapes differ")
    if not 0.0 <= alpha < 1.0:
        raise InvalidInputError("alpha must lie in [0, 1)")
    return theta + alpha * (theta_old - theta)


@dataclass
class Batch:
    """Rolled-out trajectories for one iteration, grouped by prompt."""

    prompts: np.ndarray          # (B*N, Lp), each prompt repeated N times
    completions: np.ndarray      # (B*N, Lc)
    rewards: np.ndarray          # (B*N,)
    decode_steps: np.ndarray     # (B*N,)
    group_size: int

    def __len__(self):
        return len(self.rewards)

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(p, c, float(r), int(s)) for p, c, r, s in
                zip(self.prompts, self.completions, self.rewards, self.decode_steps)]


def rollout_phase(params, config: TrainConfig, iteration: int) -> Batch:
    """Sample ``group_size`` trajectories per prompt from ``params`` and attach training rewards."""
    tc = config.trainer
    task = config.task
    seed = tc.seed
    prompts = sample_prompts(task, tc.batch_prompts, _rng(seed, _PROMPTS, iteration))
    prompts = np.repeat(prompts, tc.group_size, axis=0)
    rngs = [_rng(seed, _DECODE, iteration, j) for j in range(len(prompts))]
    completions, steps = decode_batch(params, prompts, config.model_config, config.decode, rngs)
    rewards = batch_rewards(task, prompts, completions)
    if tc.rescale_rewards:
        rewards = _group_minmax(rewards, tc.group_size)
    return Batch(prompts, completions, rewards, steps, tc.group_size)


def _group_minmax(rewards, group_size):
    g = rewards.reshape(-1, group_size)
    lo = g.min(axis=1, keepdims=True)
    span = g.max(axis=1, keepdims=True) - lo
    out = np.where(span > 0, (g - lo) / np.where(span > 0, span, 1.0), g)
    return out.ravel()


def _noised_block(batch: Batch, block: Block, config: TrainConfig, iteration: int):
    mask_id = config.task.mask_id
    seqs, patterns = [], []
    for item in block.items:
        rng = _rng(config.trainer.seed, _MASKS, iteration, item.substream)
        x, pat = forward_mask(batch.prompts[item.traj], batch.completions[item.traj], item.t, rng, mask_id)
        seqs.append(x)
        patterns.append(pat)
    idx = np.array([item.traj for item in block.items])
    return np.array(seqs), np.array(patterns), idx


def block_gradient(theta, theta_old, batch: Batch, block: Block, config: TrainConfig,
                   iteration: int, weight: float):
    """Summed, ``weight``-scaled loss and gradient over one block of work items."""
    cfg = config.model_config
    Lp = config.task.prompt_len
    seqs, patterns, idx = _noised_block(batch, block, config, iteration)
    logits, cache = denoiser.forward(theta, seqs, cfg, return_cache=True)
    ref_logits = denoiser.forward(theta_old, seqs, cfg)
    losses, upstream = batch_sequence_loss(
        batch.completions[idx], patterns, logits, ref_logits, batch.rewards[idx], config.lfpo, Lp)
    active = np.zeros(seqs.shape, dtype=bool)
    active[:, Lp:] = patterns
    grad = denoiser.backward(theta, seqs, upstream * weight, cfg, active, cache=cache)
    return float(losses.sum() * weight), grad


def lfpo_update_phase(theta, theta_old, batch: Batch, config: TrainConfig,
                      opt_state: OptimizerState, iteration: int, block_size: int | None = None):
    """Block-wise rectified optimization over the ``len(batch) * strata`` work items.

    Returns ``(theta, opt_state, stats)``.  The per-item weight is
    ``1 / (len(batch) * strata)`` so the loss is a mean over trajectories and timesteps.
    """
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    tc = config.trainer
    bs = tc.block_size if block_size is None else block_size
    blocks = build_blocks(len(batch), tc.strata, bs, _rng(tc.seed, _BLOCKS, iteration),
                          config.task.completion_len)
    weight = 1.0 / (len(batch) * tc.strata)
    loss_total = 0.0

    if tc.accum_mode is AccumMode.ACCUMULATE:
        def grad_fn(block):
            nonlocal loss_total
            loss, g = block_gradient(theta, theta_old, batch, block, config, iteration, weight)
            loss_total += loss
            return g

        grad = accumulate_gradients(blocks, grad_fn)
        theta, opt_state = _optimizer_step(theta, grad, opt_state, config)
        return theta, opt_state, {"loss": loss_total, "grad_norm": float(np.linalg.norm(grad))}

    grad_sum = np.zeros_like(theta)
    for block in blocks:
        loss, grad = block_gradient(theta, theta_old, batch, block, config, iteration, weight)
        loss_total += loss
        grad_sum += grad
        theta, opt_state = _optimizer_step(theta, grad, opt_state, config)
    return theta, opt_state, {"loss": loss_total, "grad_norm": float(np.linalg.norm(grad_sum))}


def accumulated_gradient(theta, theta_old, batch: Batch, config: TrainConfig, iteration: int,
                         block_size: int) -> np.ndarray:
    """Total Accumulate-mode gradient for one iteration, without taking a step."""
    tc = config.trainer
    blocks = build_blocks(len(batch), tc.strata, block_size, _rng(tc.seed, _BLOCKS, iteration),
                          config.task.completion_len)
    weight = 1.0 / (len(batch) * tc.strata)
    return accumulate_gradients(
        blocks, lambda b: block_gradient(theta, theta_old, batch, b, config, iteration, weight)[1])


def _optimizer_step(theta, grad, opt_state, config):
    tc = config.trainer
    return adamw_step(theta, grad, opt_state, tc.learning_rate, tc.beta1, tc.beta2, tc.eps,
                      tc.weight_decay)


def group_advantages(rewards, group_size: int) -> np.ndarray:
    """``(r - group mean) / (group std + 1e-6)``; zero for degenerate groups."""
    g = np.asarray(rewards, dtype=np.float64).reshape(-1, group_size)
    centred = g - g.mean(axis=1, keepdims=True)
    std = g.std(axis=1, keepdims=True)
    spread = g.max(axis=1, keepdims=True) > g.min(axis=1, keepdims=True)
    adv = np.where(spread, centred / (std + 1e-6), 0.0)
    return adv.ravel()


def baseline_gradient(theta, batch: Batch, config: TrainConfig, iteration: int):
    """Group-normalized likelihood policy gradient at one uniform timestep per trajectory."""
    cfg = config.model_config
    task = config.task
    Lp, Lc = task.prompt_len, task.completion_len
    if batch.group_size < 2:
        raise InvalidInputError("the PG baseline needs group_size >= 2")
    adv = group_advantages(batch.rewards, batch.group_size)
    seqs, patterns = [], []
    for j in range(len(batch)):
        rng = _rng(config.trainer.seed, _BASELINE_T, iteration, j)
        t = int(rng.integers(1, Lc + 1))
        x, pat = forward_mask(batch.prompts[j], batch.completions[j], t, rng, task.mask_id)
        seqs.append(x)
        patterns.append(pat)
    seqs, patterns = np.array(seqs), np.array(patterns)
    logits, cache = denoiser.forward(theta, seqs, cfg, return_cache=True)
    z = logits[:, Lp:, :]
    logp = z - z.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, batch.completions[..., None], axis=-1)[..., 0]
    weight = patterns / patterns.sum(axis=1, keepdims=True) / len(batch)
    loss = float(-np.sum(adv[:, None] * picked * weight))

    residual = np.exp(logp)
    np.put_along_axis(residual, batch.completions[..., None],
                      np.take_along_axis(residual, batch.completions[..., None], axis=-1) - 1.0,
                      axis=-1)
    upstream = np.zeros_like(logits)
    upstream[:, Lp:, :] = adv[:, None, None] * residual * weight[..., None]
    active = np.zeros(seqs.shape, dtype=bool)
    active[:, Lp:] = patterns
    grad = denoiser.backward(theta, seqs, upstream, cfg, active, cache=cache)
    return loss, grad


def baseline_pg_update(theta, batch: Batch, config: TrainConfig, opt_state: OptimizerState,
                       iteration: int):
    loss, grad = baseline_gradient(theta, batch, config, iteration)
    theta, opt_state = _optimizer_step(theta, grad, opt_state, config)
    return theta, opt_state, {"loss": loss, "grad_norm": float(np.linalg.norm(grad))}


@dataclass
class MetricsRow:
    iteration: int
    trajectories: int
    wall_seconds: float | None
    mean_reward: float
    loss: float
    grad_norm: float
    eval_exact_reward: float | None
    mean_decode_steps: float | None
    algorithm: str
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainState:
    theta: np.ndarray
    theta_old: np.ndarray
    opt_state: OptimizerState
    iteration: int = 0


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[MetricsRow] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return self.state.theta


def eval_prompt_set(config: TrainConfig) -> np.ndarray:
    """The fixed held-out prompts used for every evaluation in a run."""
    return sample_prompts(config.task, config.trainer.eval_prompts,
                          _rng(config.trainer.seed, _EVAL))


def init_state(config: TrainConfig) -> TrainState:
    theta = denoiser.init_params(config.model_config, config.trainer.seed)
    return TrainState(theta, theta.copy(), OptimizerState.zeros(theta.size))


def train_iteration(state: TrainState, config: TrainConfig):
    """Advance ``state`` by one outer iteration in place; returns ``(batch, stats)``."""
    tc = config.trainer
    it = state.iteration + 1
    if tc.algorithm == "lfpo":
        batch = rollout_phase(state.theta_old, config, it)
        theta, opt, stats = lfpo_update_phase(state.theta, state.theta_old, batch, config,
                                              state.opt_state, it)
        state.theta_old = ema_update(state.theta_old, theta, tc.ema_decay)
    else:
        batch = rollout_phase(state.theta, config, it)
        theta, opt, stats = baseline_pg_update(state.theta, batch, config, state.opt_state, it)
        state.theta_old = theta.copy()
    state.theta, state.opt_state, state.iteration = theta, opt, it
    return batch, stats


def train(config: TrainConfig, on_row=None, on_checkpoint=None, state: TrainState | None = None) -> TrainResult:
    """Run ``config.trainer.total_iterations`` outer iterations.

    ``on_row(row)`` receives each :class:`MetricsRow` as it is produced;
    ``on_checkpoint(state)`` is called every ``checkpoint_every`` iterations and
    at the end.  Raises :class:`TrainingDivergedError` (carrying the last
    finite state as ``exc.state``) if a loss or gradient norm is non-finite.
    """
    tc = config.trainer
    state = init_state(config) if state is None else state
    result = TrainResult(state)
    eval_prompts = eval_prompt_set(config) if tc.eval_every else None
    greedy = DecodeConfig(config.decode.confidence_threshold, 0.0, config.decode.max_unmask)
    start = time.perf_counter()
    traj_count = state.iteration * tc.batch_prompts * tc.group_size

    for _ in range(tc.total_iterations):
        previous = TrainState(state.theta.copy(), state.theta_old.copy(), state.opt_state,
                              state.iteration)
        batch, stats = train_iteration(state, config)
        if not (np.isfinite(stats["loss"]) and np.isfinite(stats["grad_norm"])):
            exc = TrainingDivergedError(f"non-finite loss or gradient at iteration {state.iteration}",
                                        iteration=state.iteration)
            exc.state = previous
            raise exc
        traj_count += len(batch)

        eval_reward = steps = None
        if tc.eval_every and state.iteration % tc.eval_every == 0:
            eval_reward, steps = evaluate_prompts(config.task, state.theta, config.model_config,
                                                  greedy, eval_prompts, return_steps=True)
        row = MetricsRow(
            iteration=state.iteration,
            trajectories=traj_count,
            wall_seconds=round(time.perf_counter() - start, 6) if tc.log_wall_time else None,
            mean_reward=float(batch.rewards.mean()),
            loss=stats["loss"],
            grad_norm=stats["grad_norm"],
            eval_exact_reward=eval_reward,
            mean_decode_steps=steps,
            algorithm=tc.algorithm,
            seed=tc.seed,
        )
        result.metrics.append(row)
        if on_row is not None:
            on_row(row)
        if eval_reward is not None:
            log.info("iter %d  reward %.3f  eval %.3f  steps %.2f", row.iteration,
                     row.mean_reward, eval_reward, steps)
        if on_checkpoint is not None and tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
            on_checkpoint(state)

    if on_checkpoint is not None:
        on_checkpoint(state)
    return result

