"""A one-layer attention denoiser with hand-written reverse-mode gradients.

Parameters live in a single flat float64 vector.  The layout is fixed and is
part of the checkpoint format::

    E     (V, d)      token embeddings
    P     (L, d)      positional embeddings
    Wq    (d, d)
    Wk    (d, d)
    Wv    (d, d)
    W1    (d_ff, d)
    W2    (d, d_ff)
    Wout  (V, d)

Token id ``V - 1`` is the MASK token.  ``forward`` and ``backward`` accept a
single sequence of shape ``(L,)`` or a batch ``(n, L)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

PARAM_ORDER = ("E", "P", "Wq", "Wk", "Wv", "W1", "W2", "Wout")


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    seq_len: int
    embed_dim: int = 32
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise InvalidInputError("vocab_size must be >= 4")
        if self.seq_len < 2:
            raise InvalidInputError("seq_len must be >= 2")
        if self.embed_dim < 2:
            raise InvalidInputError("embed_dim must be >= 2")
        if self.hidden_dim < self.embed_dim:
            raise InvalidInputError("hidden_dim must be >= embed_dim")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    def shapes(self) -> dict[str, tuple[int, int]]:
        V, L, d, f = self.vocab_size, self.seq_len, self.embed_dim, self.hidden_dim
        return {
            "E": (V, d),
            "P": (L, d),
            "Wq": (d, d),
            "Wk": (d, d),
            "Wv": (d, d),
            "W1": (f, d),
            "W2": (d, f),
            "Wout": (V, d),
        }

    @property
    def num_params(self) -> int:
        return sum(r * c for r, c in self.shapes().values())


def unpack(params: np.ndarray, cfg: DenoiserConfig) -> dict[str, np.ndarray]:
    """Named matrix views into the flat parameter vector (no copies)."""
    params = np.asarray(params)
    if params.shape != (cfg.num_params,):
        raise InvalidInputError(
            f"parameter vector has shape {params.shape}, expected ({cfg.num_params},)"
        )
    out = {}
    offset = 0
    for name in PARAM_ORDER:
        r, c = cfg.shapes()[name]
        out[name] = params[offset:offset + r * c].reshape(r, c)
        offset += r * c
    return out


def init_params(cfg: DenoiserConfig, seed: int | None = None) -> np.ndarray:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) draw of every parameter."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    s = 1.0 / np.sqrt(cfg.embed_dim)
    return rng.uniform(-s, s, size=cfg.num_params)


def _check_tokens(tokens, cfg: DenoiserConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-1:] != (cfg.seq_len,) or tokens.ndim not in (1, 2):
        raise InvalidInputError(
            f"tokens must have shape (L,) or (n, L) with L={cfg.seq_len}, got {tokens.shape}"
        )
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InvalidInputError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InvalidInputError(f"token id outside [0, {cfg.vocab_size})")
    return tokens


def _forward(w, tokens, d):
    h0 = w["E"][tokens] + w["P"]
    q = h0 @ w["Wq"].T
    k = h0 @ w["Wk"].T
    v = h0 @ w["Wv"].T
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    s = s - s.max(axis=-1, keepdims=True)
    A = np.exp(s)
    A /= A.sum(axis=-1, keepdims=True)
    h1 = h0 + A @ v
    a = h1 @ w["W1"].T
    u = np.maximum(a, 0.0)
    h2 = h1 + u @ w["W2"].T
    logits = h2 @ w["Wout"].T
    cache = dict(h0=h0, q=q, k=k, v=v, A=A, h1=h1, a=a, u=u, h2=h2)
    return logits, cache


def forward(params, tokens, cfg: DenoiserConfig, return_cache: bool = False):
    """Per-position logits, shape ``tokens.shape + (V,)``."""
    tokens = _check_tokens(tokens, cfg)
    w = unpack(params, cfg)
    batched = tokens.ndim == 2
    logits, cache = _forward(w, tokens if batched else tokens[None], cfg.embed_dim)
    if not batched:
        logits = logits[0]
    return (logits, cache) if return_cache else logits


def backward(params, tokens, upstream, cfg: DenoiserConfig, active_positions=None, cache=None):
    """Gradient of ``sum_i upstream_i . logits_i`` over active positions w.r.t. the flat params.

    ``active_positions`` is a boolean array shaped like ``tokens``; rows of
    ``upstream`` outside it are ignored.  Pass the ``cache`` returned by
    ``forward(..., return_cache=True)`` to skip recomputing activations.
    """
    tokens = _check_tokens(tokens, cfg)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tokens.shape + (cfg.vocab_size,):
        raise InvalidInputError(
            f"upstream shape {upstream.shape} does not match {tokens.shape + (cfg.vocab_size,)}"
        )
    if tokens.ndim == 1:
        tokens = tokens[None]
        upstream = upstream[None]
        if active_positions is not None:
            active_positions = np.asarray(active_positions)[None]
    if active_positions is not None:
        upstream = upstream * np.asarray(active_positions, dtype=bool)[..., None]

    w = unpack(params, cfg)
    if cache is None:
        _, cache = _forward(w, tokens, cfg.embed_dim)
    h0, q, k, v, A = cache["h0"], cache["q"], cache["k"], cache["v"], cache["A"]
    h1, a, u, h2 = cache["h1"], cache["a"], cache["u"], cache["h2"]
    scale = 1.0 / np.sqrt(cfg.embed_dim)

    grad = np.zeros(cfg.num_params)
    g = unpack(grad, cfg)

    g["Wout"][...] = np.einsum("nlv,nld->vd", upstream, h2)
    dh2 = upstream @ w["Wout"]
    g["W2"][...] = np.einsum("nld,nlf->df", dh2, u)
    da = (dh2 @ w["W2"]) * (a > 0)
    g["W1"][...] = np.einsum("nlf,nld->fd", da, h1)
    dh1 = dh2 + da @ w["W1"]

    # attention block: h1 = h0 + A @ v
    dA = dh1 @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(A, -1, -2) @ dh1
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
    dq = dS @ k * scale
    dk = np.swapaxes(dS, -1, -2) @ q * scale
    g["Wq"][...] = np.einsum("nld,nle->de", dq, h0)
    g["Wk"][...] = np.einsum("nld,nle->de", dk, h0)
    g["Wv"][...] = np.einsum("nld,nle->de", dv, h0)
    dh0 = dh1 + dq @ w["Wq"] + dk @ w["Wk"] + dv @ w["Wv"]

    g["P"][...] = dh0.sum(axis=0)
    np.add.at(g["E"], tokens.ravel(), dh0.reshape(-1, cfg.embed_dim))
    return grad


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n))


def fd_check(cfg: DenoiserConfig, seed: int = 0, trials: int = 50, coords: int = 20,
             h: float = 1e-5) -> dict:
    """Compare ``backward`` with central finite differences on random instances.

    Each trial draws fresh parameters, tokens, an active position set and an
    upstream gradient, then checks ``coords`` random parameter coordinates.
    Coordinates whose perturbation would cross a relu kink are redrawn.
    Returns the worst relative error (over coordinates with
    ``|analytic| >= 1e-12``) and the worst absolute error elsewhere.
    """
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    max_abs_small = 0.0
    checked = 0
    for _ in range(trials):
        params = rng.uniform(-1.0, 1.0, size=cfg.num_params) / np.sqrt(cfg.embed_dim)
        tokens = rng.integers(0, cfg.vocab_size, size=cfg.seq_len)
        active = rng.random(cfg.seq_len) < 0.5
        active[rng.integers(cfg.seq_len)] = True
        upstream = rng.normal(size=(cfg.seq_len, cfg.vocab_size)) * active[:, None]
        analytic = backward(params, tokens, upstream, cfg, active)
        _, base_cache = forward(params, tokens, cfg, return_cache=True)
        base_signs = base_cache["a"] > 0

        done = 0
        attempts = 0
        while done < coords and attempts < 50 * coords:
            attempts += 1
            j = int(rng.integers(cfg.num_params))
            plus = params.copy()
            plus[j] += h
            minus = params.copy()
            minus[j] -= h
            lp, cp = forward(plus, tokens, cfg, return_cache=True)
            lm, cm = forward(minus, tokens, cfg, return_cache=True)
            if np.any((cp["a"] > 0) != base_signs) or np.any((cm["a"] > 0) != base_signs):
                continue
            if np.min(np.abs(cp["a"])) < 1e-7 or np.min(np.abs(cm["a"])) < 1e-7:
                continue
            numeric = (np.sum(upstream * lp) - np.sum(upstream * lm)) / (2 * h)
            if abs(analytic[j]) < 1e-12:
                max_abs_small = max(max_abs_small, abs(numeric - analytic[j]))
            else:
                max_rel = max(max_rel, _rel_err(analytic[j], numeric))
            done += 1
            checked += 1
    return {"max_rel_error": max_rel, "max_abs_error_small": max_abs_small, "checked": checked}
