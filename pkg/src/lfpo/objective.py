"""Contrastive velocity rectification: implicit targets and the reward-weighted loss.

Given the current logits ``z_theta`` and reference logits ``z_ref`` at a masked
position, the deviation ``delta = log p_theta - log p_ref`` is pushed further
(positive target) or reversed (negative target)::

    s_plus  = log p_ref + beta * delta        pi_plus  = softmax(s_plus)
    s_minus = log p_ref - beta * delta        pi_minus = softmax(s_minus)

and the position loss is ``r * CE(pi_plus, p_theta) + (1 - r) * CE(pi_minus, p_theta)``.

All functions broadcast over leading axes, so a whole ``(n, L, V)`` grid can be
processed at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidInputError
from .simplex import log_softmax, softmax


class Mode(str, Enum):
    ALL = "all"
    POS_ONLY = "pos_only"
    NEG_ONLY = "neg_only"


@dataclass(frozen=True)
class LfpoConfig:
    beta: float = 2.0
    mode: Mode = Mode.ALL
    detach_targets: bool = False
    lambda_anchor: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInputError("beta must be > 0")
        if self.lambda_anchor < 0:
            raise InvalidInputError("lambda_anchor must be >= 0")
        object.__setattr__(self, "mode", Mode(self.mode))


def _mode_weights(r, mode: Mode):
    r = np.asarray(r, dtype=np.float64)
    if np.any((r < 0) | (r > 1)):
        raise InvalidInputError("reward must lie in [0, 1]")
    mode = Mode(mode)
    w_pos = r if mode in (Mode.ALL, Mode.POS_ONLY) else np.zeros_like(r)
    w_neg = 1.0 - r if mode in (Mode.ALL, Mode.NEG_ONLY) else np.zeros_like(r)
    return w_pos, w_neg


def deviation(z_theta, z_ref) -> np.ndarray:
    return log_softmax(z_theta) - log_softmax(z_ref)


def implicit_targets(z_theta, z_ref, beta: float):
    """Return ``(pi_plus, pi_minus)``; the log-scores are renormalized by softmax."""
    l_ref = log_softmax(z_ref)
    delta = log_softmax(z_theta) - l_ref
    return softmax(l_ref + beta * delta), softmax(l_ref - beta * delta)


def implicit_scores(z_theta, z_ref, beta: float):
    """Unnormalized log-scores ``(s_plus, s_minus)``."""
    l_ref = log_softmax(z_ref)
    delta = log_softmax(z_theta) - l_ref
    return l_ref + beta * delta, l_ref - beta * delta


def _cross_entropy_logp(target, log_pred):
    return -np.sum(target * log_pred, axis=-1)


def lfpo_position_loss(z_theta, z_ref, beta: float, r, mode: Mode = Mode.ALL):
    """Reward-weighted contrastive cross-entropy at one (or a stack of) masked positions."""
    w_pos, w_neg = _mode_weights(r, mode)
    l_theta = log_softmax(z_theta)
    pi_plus, pi_minus = implicit_targets(z_theta, z_ref, beta)
    loss = w_pos * _cross_entropy_logp(pi_plus, l_theta) + w_neg * _cross_entropy_logp(pi_minus, l_theta)
    return float(loss) if np.ndim(loss) == 0 else loss


def _term_gradient(p, l_theta, target, sign_beta):
    # d/dz of CE(softmax(l_ref + sign_beta * delta), p) with the target differentiated through
    centred = l_theta - np.sum(target * l_theta, axis=-1, keepdims=True)
    return (p - target) - sign_beta * target * centred


def lfpo_logit_gradient(z_theta, z_ref, beta: float, r, mode: Mode = Mode.ALL,
                        detach_targets: bool = False) -> np.ndarray:
    """Gradient of :func:`lfpo_position_loss` with respect to ``z_theta``.

    With ``detach_targets`` the implicit targets are treated as constants and
    the result is the soft-target residual ``r (p - pi_plus) + (1 - r) (p - pi_minus)``.
    Otherwise the dependence of both targets on ``z_theta`` is included.
    """
    w_pos, w_neg = _mode_weights(r, mode)
    w_pos = np.asarray(w_pos)[..., None]
    w_neg = np.asarray(w_neg)[..., None]
    l_theta = log_softmax(z_theta)
    # softmax(l_theta) rather than exp(l_theta): with delta == 0 this is bit-identical to both targets
    p = softmax(l_theta)
    pi_plus, pi_minus = implicit_targets(z_theta, z_ref, beta)
    if detach_targets:
        return w_pos * (p - pi_plus) + w_neg * (p - pi_minus)
    return (w_pos * _term_gradient(p, l_theta, pi_plus, beta)
            + w_neg * _term_gradient(p, l_theta, pi_minus, -beta))


def cold_start_gradient(z_ref, beta: float, r) -> np.ndarray:
    """Closed-form non-detached gradient in ``Mode.ALL`` when ``z_theta == z_ref``."""
    l = log_softmax(z_ref)
    p = np.exp(l)
    r = np.asarray(r, dtype=np.float64)[..., None]
    return (1.0 - 2.0 * r) * beta * p * (l - np.sum(p * l, axis=-1, keepdims=True))


def anchor_loss(z_theta, final_token, r):
    """``r * CE(onehot(final_token), p_theta)``: reward-weighted supervision on the trajectory's token."""
    r = np.asarray(r, dtype=np.float64)
    if np.any((r < 0) | (r > 1)):
        raise InvalidInputError("reward must lie in [0, 1]")
    l_theta = log_softmax(z_theta)
    picked = np.take_along_axis(l_theta, np.asarray(final_token)[..., None], axis=-1)[..., 0]
    loss = -r * picked
    return float(loss) if np.ndim(loss) == 0 else loss


def anchor_gradient(z_theta, final_token, r) -> np.ndarray:
    p = softmax(z_theta)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.asarray(final_token)[..., None], 1.0, axis=-1)
    return np.asarray(r, dtype=np.float64)[..., None] * (p - onehot)


def sequence_loss(completion, pattern, theta_logits, ref_logits, r, config: LfpoConfig,
                  prompt_len: int):
    """Mean position loss over the masked completion positions of one noised sequence.

    ``theta_logits`` and ``ref_logits`` are full ``(L, V)`` grids; ``pattern``
    marks the masked completion positions.  Returns the loss and the
    ``(L, V)`` upstream gradient with respect to ``theta_logits`` (zero at
    every unmasked position, already divided by the number of masked positions).
    """
    pattern = np.asarray(pattern, dtype=bool)
    n_masked = int(pattern.sum())
    if n_masked == 0:
        raise InvalidInputError("sequence has no masked positions")
    loss, upstream = batch_sequence_loss(
        np.asarray(completion)[None], pattern[None], np.asarray(theta_logits)[None],
        np.asarray(ref_logits)[None], np.asarray([r], dtype=np.float64), config, prompt_len)
    return float(loss[0]), upstream[0]


def batch_sequence_loss(completions, patterns, theta_logits, ref_logits, rewards,
                        config: LfpoConfig, prompt_len: int):
    """Vectorized :func:`sequence_loss` over a batch of ``n`` noised sequences."""
    patterns = np.asarray(patterns, dtype=bool)
    counts = patterns.sum(axis=1)
    if np.any(counts == 0):
        raise InvalidInputError("sequence has no masked positions")
    n, Lc = patterns.shape
    zt = theta_logits[:, prompt_len:, :]
    zr = ref_logits[:, prompt_len:, :]
    r = np.broadcast_to(np.asarray(rewards, dtype=np.float64)[:, None], (n, Lc))

    pos_loss = lfpo_position_loss(zt, zr, config.beta, r, config.mode)
    pos_grad = lfpo_logit_gradient(zt, zr, config.beta, r, config.mode, config.detach_targets)
    if config.lambda_anchor > 0:
        pos_loss = pos_loss + config.lambda_anchor * anchor_loss(zt, completions, r)
        pos_grad = pos_grad + config.lambda_anchor * anchor_gradient(zt, completions, r)

    weight = patterns / counts[:, None]
    loss = np.sum(pos_loss * weight, axis=1)
    upstream = np.zeros_like(theta_logits)
    upstream[:, prompt_len:, :] = pos_grad * weight[..., None]
    return loss, upstream
