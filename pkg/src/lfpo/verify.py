"""Numerical property checks for the gradient identities and training machinery.

Each check returns a :class:`CheckResult` with the observed error next to its
tolerance.  :func:`run_all` drives the whole suite; ``fault="ce_sign"``
deliberately flips the sign of the cross-entropy gradient so that the
failure path can be exercised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import denoiser
from .config import TrainConfig
from .diffusion import forward_mask
from .objective import (Mode, implicit_scores, implicit_targets, lfpo_logit_gradient,
                        lfpo_position_loss)
from .scheduler import build_blocks, segment_bounds, stratified_timesteps, uniform_timesteps
from .simplex import ce_gradient, model_velocity, softmax, target_velocity
from .trainer import (Batch, accumulated_gradient, block_gradient, ema_update, init_state,
                      rollout_phase)


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    tolerance: float
    detail: str = ""


def _ce_grad_fn(fault):
    if fault == "ce_sign":
        return lambda p, y: -ce_gradient(p, y)
    return ce_gradient


def chain_rule_ce_gradient(z, y):
    """Cross-entropy gradient assembled from the explicit softmax Jacobian ``p_j (delta_ij - p_i)``."""
    p = softmax(z)
    jac = np.diag(p) - np.outer(p, p)      # jac[j, i] = dp_j / dz_i
    dl_dp = -y / p
    return jac.T @ dl_dp


def check_residual_identity(seed=0, n=1000, soft=False, fault=None) -> CheckResult:
    """Residual form of the CE gradient against ``softmax(z) - y``, the Jacobian route and the velocity difference."""
    rng = np.random.default_rng(seed)
    grad_fn = _ce_grad_fn(fault)
    worst = 0.0
    for _ in range(n):
        V = int(rng.integers(2, 65))
        z = rng.normal(scale=3.0, size=V)
        if soft:
            y = rng.dirichlet(np.ones(V))
        else:
            y = np.zeros(V)
            y[rng.integers(V)] = 1.0
        p = softmax(z)
        g = grad_fn(p, y)
        base = rng.dirichlet(np.ones(V))
        residual = model_velocity(p, base) - target_velocity(y, base)
        worst = max(worst,
                    np.abs(g - (p - y)).max(),
                    np.abs(g - residual).max(),
                    np.abs(g - chain_rule_ce_gradient(z, y)).max())
    name = "soft-target residual" if soft else "Theorem 1 identity"
    return CheckResult(name, worst <= 1e-12, worst, 1e-12)


def _ld_log_softmax(z):
    z = z - z.max()
    return z - np.log(np.sum(np.exp(z)))


def check_ce_fd(seed=0, n=1000, h=1e-6, fault=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    grad_fn = _ce_grad_fn(fault)
    worst = 0.0
    for _ in range(n):
        V = int(rng.integers(2, 65))
        z = rng.normal(size=V)
        y = np.zeros(V)
        y[rng.integers(V)] = 1.0
        zl, yl = z.astype(np.longdouble), y.astype(np.longdouble)
        f = lambda zz: -np.sum(yl * _ld_log_softmax(zz))
        eye = np.eye(V, dtype=np.longdouble) * np.longdouble(h)
        fd = np.array([(f(zl + e) - f(zl - e)) / (2 * np.longdouble(h)) for e in eye], dtype=np.float64)
        g = grad_fn(softmax(z), y)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return CheckResult("CE gradient vs finite differences", worst <= 1e-8, worst, 1e-8)


def check_denoiser_fd(seed=0, trials=50) -> CheckResult:
    cfg = denoiser.DenoiserConfig(vocab_size=16, seq_len=12, embed_dim=8, hidden_dim=16)
    report = denoiser.fd_check(cfg, seed=seed, trials=trials)
    ok = report["max_rel_error"] <= 1e-4 and report["max_abs_error_small"] <= 1e-8
    return CheckResult("denoiser backward vs finite differences", ok, report["max_rel_error"], 1e-4,
                       f"{report['checked']} coordinates")


def _ld_position_loss(z_theta, z_ref, beta, r, mode, frozen_theta=None):
    """Extended-precision position loss written directly from its definition.

    With ``frozen_theta`` the implicit targets are built from those logits and
    held fixed while ``z_theta`` varies.
    """
    w_pos = r if mode in (Mode.ALL, Mode.POS_ONLY) else 0.0
    w_neg = 1 - r if mode in (Mode.ALL, Mode.NEG_ONLY) else 0.0
    l_ref = _ld_log_softmax(z_ref)
    l_theta = _ld_log_softmax(z_theta)
    src = l_theta if frozen_theta is None else _ld_log_softmax(frozen_theta)
    delta = src - l_ref
    pi_plus = np.exp(_ld_log_softmax(l_ref + beta * delta))
    pi_minus = np.exp(_ld_log_softmax(l_ref - beta * delta))
    return -(w_pos * np.sum(pi_plus * l_theta) + w_neg * np.sum(pi_minus * l_theta))


def lfpo_fd_error(z_theta, z_ref, beta, r, mode, detach, h=1e-6) -> float:
    """Norm-relative error of the analytic LFPO logit gradient against central differences.

    The differences are taken on an independent long-double evaluation of the
    loss, so the oracle's own rounding stays far below the tolerance even when
    the gradient is tiny compared with the loss.
    """
    zt = np.asarray(z_theta, dtype=np.longdouble)
    zr = np.asarray(z_ref, dtype=np.longdouble)
    beta_ld, r_ld = np.longdouble(beta), np.longdouble(r)
    frozen = zt.copy() if detach else None
    hh = np.longdouble(h)
    fd = np.empty(zt.size, dtype=np.longdouble)
    for i in range(zt.size):
        e = np.zeros_like(zt)
        e[i] = hh
        fd[i] = (_ld_position_loss(zt + e, zr, beta_ld, r_ld, mode, frozen)
                 - _ld_position_loss(zt - e, zr, beta_ld, r_ld, mode, frozen)) / (2 * hh)
    fd = fd.astype(np.float64)
    g = lfpo_logit_gradient(z_theta, z_ref, beta, r, mode, detach)
    return float(np.linalg.norm(g - fd) / np.linalg.norm(fd))


def check_lfpo_fd(seed=0, n=200) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for mode in Mode:
        for detach in (False, True):
            for _ in range(n):
                V = int(rng.integers(2, 33))
                z_theta = rng.normal(size=V)
                z_ref = rng.normal(size=V)
                beta = float(rng.uniform(0.5, 3.0))
                r = float(rng.uniform(0.05, 0.95))
                worst = max(worst, lfpo_fd_error(z_theta, z_ref, beta, r, mode, detach))
                count += 1
    return CheckResult("LFPO logit gradient vs finite differences", worst <= 1e-6, worst, 1e-6,
                       f"{count} instances")


def check_implicit_targets(seed=0, n=1000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    beta1 = geo = zero = 0.0
    for _ in range(n):
        V = int(rng.integers(2, 65))
        z_theta = rng.normal(scale=3.0, size=V)
        z_ref = rng.normal(scale=3.0, size=V)
        beta = float(rng.uniform(0.1, 5.0))
        pi_plus, _ = implicit_targets(z_theta, z_ref, 1.0)
        beta1 = max(beta1, np.abs(pi_plus - softmax(z_theta)).max())
        s_plus, s_minus = implicit_scores(z_theta, z_ref, beta)
        geo = max(geo, np.abs(softmax((s_plus + s_minus) / 2) - softmax(z_ref)).max())
        for mode in Mode:
            g = lfpo_logit_gradient(z_ref, z_ref, beta, float(rng.random()), mode, True)
            zero = max(zero, np.abs(g).max())
    return [
        CheckResult("beta=1 positive target equals policy", beta1 <= 1e-12, beta1, 1e-12),
        CheckResult("geometric-mean identity", geo <= 1e-12, geo, 1e-12),
        CheckResult("zero deviation gives zero detached gradient", zero == 0.0, zero, 0.0),
    ]


def small_config(seed=0, **overrides) -> TrainConfig:
    cfg = TrainConfig().replace(model__embed_dim=16, model__hidden_dim=32, trainer__seed=seed,
                                trainer__batch_prompts=4, trainer__group_size=4)
    return cfg.replace(**overrides) if overrides else cfg


def perturbed_state(config: TrainConfig, scale=0.05):
    """Init state with the policy nudged away from the reference so every LFPO term is active."""
    state = init_state(config)
    rng = np.random.default_rng([config.trainer.seed, 99])
    state.theta = state.theta + rng.normal(scale=scale, size=state.theta.size)
    return state


def check_block_equivalence(seed=0) -> CheckResult:
    config = small_config(seed)
    state = perturbed_state(config)
    batch = rollout_phase(state.theta_old, config, 1)
    total = len(batch) * config.trainer.strata
    grads = [accumulated_gradient(state.theta, state.theta_old, batch, config, 1, bs)
             for bs in (1, 4, total)]
    worst = max(np.linalg.norm(g - grads[-1]) / np.linalg.norm(grads[-1]) for g in grads[:-1])
    return CheckResult("block-size invariance of accumulated gradient", worst <= 1e-9, worst, 1e-9)


def check_stratified(seed=0, draws=10_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    L, K = 16, 4
    bounds = segment_bounds(L, K)
    samples = np.array([stratified_timesteps(L, K, rng) - 1 for _ in range(draws)])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    in_segment = bool(np.all((samples >= lo) & (samples <= hi)))
    tiles = sorted(v for b in bounds for v in range(b[0], b[1] + 1)) == list(range(L))
    p_min = 1.0
    for k, (a, b) in enumerate(bounds):
        counts = np.bincount(samples[:, k] - a, minlength=b - a + 1)
        p_min = min(p_min, stats.chisquare(counts).pvalue)
    return [
        CheckResult("one stratified draw per segment", in_segment and tiles, float(not in_segment), 0.0),
        CheckResult("per-segment uniformity (min chi-square p)", p_min > 1e-3, p_min, 1e-3),
    ]


def gradient_samples(config: TrainConfig, state, batch: Batch, sampler, reps: int, seed: int):
    """Repeated K-timestep LFPO gradient estimates on a fixed batch and model state."""
    from .scheduler import Block, WorkItem
    K = config.trainer.strata
    Lc = config.task.completion_len
    rng = np.random.default_rng(seed)
    out = []
    for rep in range(reps):
        items = []
        for j in range(len(batch)):
            for k, t in enumerate(sampler(Lc, K, rng)):
                items.append(WorkItem(j, int(t), rep * 10_000 + j * K + k))
        block = Block(0, tuple(items))
        _, g = block_gradient(state.theta, state.theta_old, batch, block, config, 10_000 + rep,
                              1.0 / len(items))
        out.append(g)
    return np.array(out)


def check_variance_reduction(seed=0, reps=200) -> CheckResult:
    """Stratified timesteps give a smaller gradient covariance trace than iid timesteps.

    The completion length is a multiple of the strata count so that every
    segment has equal width and both samplers estimate the same mean.  The
    policy sits well away from its reference so the gradient depends on the
    timestep; near the reference the mask-pattern noise swamps the effect.
    """
    config = small_config(seed, trainer__batch_prompts=1, trainer__group_size=2,
                          task__prompt_len=16, task__completion_len=16)
    state = perturbed_state(config, scale=0.3)
    batch = rollout_phase(state.theta_old, config, 1)
    g_strat = gradient_samples(config, state, batch, stratified_timesteps, reps, seed)
    g_unif = gradient_samples(config, state, batch, uniform_timesteps, reps, seed + 1)
    d_strat = np.sum((g_strat - g_strat.mean(0)) ** 2, axis=1)
    d_unif = np.sum((g_unif - g_unif.mean(0)) ** 2, axis=1)
    p = stats.ttest_ind(d_strat, d_unif, equal_var=False, alternative="less").pvalue
    ratio = d_strat.mean() / d_unif.mean()
    return CheckResult("stratified gradient variance below uniform (p)", p < 0.05, float(p), 0.05,
                       f"trace ratio {ratio:.3f}")


def check_ema(seed=0, n=1000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    between = True
    for _ in range(n):
        old = rng.normal(size=50)
        new = rng.normal(size=50)
        alpha = float(rng.random())
        out = ema_update(old, new, alpha)
        # error in units of the larger operand's spacing
        scale = np.maximum(np.abs(old), np.abs(new)) * np.finfo(float).eps
        worst = max(worst, (np.abs(out - (alpha * old + (1 - alpha) * new)) / scale).max())
        lo, hi = np.minimum(old, new), np.maximum(old, new)
        between &= bool(np.all((out >= lo) & (out <= hi)))
    return CheckResult("EMA update exactness and betweenness (ulps)", worst <= 4.0 and between,
                       float(worst), 4.0)


def check_forward_mask_coverage(seed=0, draws=10_000) -> CheckResult:
    from itertools import combinations
    rng = np.random.default_rng(seed)
    Lc, t = 4, 2
    patterns = {c: i for i, c in enumerate(combinations(range(Lc), t))}
    counts = np.zeros(len(patterns), dtype=int)
    for _ in range(draws):
        _, pat = forward_mask(np.zeros(2, dtype=int), np.zeros(Lc, dtype=int), t, rng, 9)
        counts[patterns[tuple(np.flatnonzero(pat))]] += 1
    p = stats.chisquare(counts).pvalue
    return CheckResult("forward-mask pattern uniformity (chi-square p)", p > 1e-3, float(p), 1e-3)


def run_all(seed=0, fault=None) -> list[CheckResult]:
    results = [
        check_residual_identity(seed, fault=fault),
        check_residual_identity(seed, soft=True, fault=fault),
        check_ce_fd(seed, fault=fault),
        check_denoiser_fd(seed),
        check_lfpo_fd(seed),
        *check_implicit_targets(seed),
        check_block_equivalence(seed),
        *check_stratified(seed),
        check_forward_mask_coverage(seed),
        check_variance_reduction(seed),
        check_ema(seed),
    ]
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{status}  {r.name:<{width}}  observed={r.observed:.3e}  tol={r.tolerance:.1e}{extra}")
    return "\n".join(lines)
