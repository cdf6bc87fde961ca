"""Stratified timestep sampling and block partitioning of the training work set."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidInputError


class AccumMode(str, Enum):
    ACCUMULATE = "accumulate"
    STEP_PER_BLOCK = "step_per_block"


@dataclass(frozen=True)
class WorkItem:
    traj: int
    t: int
    substream: int


@dataclass(frozen=True)
class Block:
    index: int
    items: tuple[WorkItem, ...]

    def __len__(self):
        return len(self.items)


def segment_bounds(L_range: int, K: int) -> list[tuple[int, int]]:
    """Inclusive ``[floor(kL/K), floor((k+1)L/K) - 1]`` segments tiling ``{0..L-1}``."""
    if not 1 <= K <= L_range:
        raise InvalidInputError(f"need 1 <= K <= L_range, got K={K}, L_range={L_range}")
    return [((k * L_range) // K, ((k + 1) * L_range) // K - 1) for k in range(K)]


def stratified_timesteps(L_range: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per segment, shifted into the timestep domain ``{1..L_range}``."""
    bounds = segment_bounds(L_range, K)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return rng.integers(lo, hi + 1) + 1


def uniform_timesteps(L_range: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K independent uniform timesteps; the unstratified comparison point."""
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    return rng.integers(0, L_range, size=K) + 1


def build_blocks(num_traj: int, K: int, block_size: int, rng: np.random.Generator,
                 L_range: int) -> list[Block]:
    """Draw K stratified timesteps per trajectory, shuffle the items and chunk them.

    Timesteps are drawn before the shuffle, and the shuffle does not depend on
    ``block_size``, so the same generator state yields the same ordered item
    list for every block size.
    """
    if block_size < 1:
        raise InvalidInputError("block_size must be >= 1")
    items = []
    for j in range(num_traj):
        for k, t in enumerate(stratified_timesteps(L_range, K, rng)):
            items.append(WorkItem(traj=j, t=int(t), substream=j * K + k))
    order = rng.permutation(len(items))
    items = [items[i] for i in order]
    return [Block(index=b, items=tuple(items[s:s + block_size]))
            for b, s in enumerate(range(0, len(items), block_size))]


def accumulate_gradients(blocks, grad_fn):
    """Ordered sum of ``grad_fn(block)`` over blocks in ascending index."""
    total = None
    for block in sorted(blocks, key=lambda b: b.index):
        g = grad_fn(block)
        total = g.copy() if total is None else total + g
    return total
