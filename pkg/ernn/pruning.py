"""Gradual magnitude-based block pruning.

Pruned weights keep their values in `PruningState.retained`; they only read as
zero through `apply_mask`. Each mask update re-ranks every block by the L1 norm
of its retained values, so a pruned block comes back as soon as it outgrows an
active one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blocksparse import DEFAULT_BLOCK, BlockSparseMatrix, from_dense
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

BlockShape = tuple[int, int]


@dataclass(frozen=True)
class PruningSchedule:
    initial_sparsity: float = 0.0
    final_sparsity: float = 0.5
    start_step: int = 0
    end_step: int = 100_000
    mask_update_interval: int = 1000
    exponent: int = 3

    def __post_init__(self) -> None:
        errors = []
        if not 0.0 <= self.initial_sparsity < 1.0:
            errors.append(f"initial_sparsity must be in [0, 1), got {self.initial_sparsity}")
        if not 0.0 <= self.final_sparsity <= 1.0:
            errors.append(f"final_sparsity must be in [0, 1], got {self.final_sparsity}")
        if self.final_sparsity < self.initial_sparsity:
            errors.append("final_sparsity must be >= initial_sparsity")
        if self.start_step < 0:
            errors.append(f"start_step must be >= 0, got {self.start_step}")
        if self.end_step <= self.start_step:
            errors.append("end_step must be greater than start_step")
        if self.mask_update_interval < 1:
            errors.append("mask_update_interval must be a positive number of steps")
        if self.exponent < 1:
            errors.append("exponent must be a positive integer")
        if errors:
            raise ValidationError("invalid pruning schedule", errors)


def sparsity_at_step(sched: PruningSchedule, t: int) -> float:
    """s(t) = s_f + (s_i - s_f) * (1 - (t - t0) / (t_end - t0))^exponent, clamped outside [t0, t_end]."""
    if t < sched.start_step:
        return sched.initial_sparsity
    if t > sched.end_step:
        return sched.final_sparsity
    progress = (t - sched.start_step) / (sched.end_step - sched.start_step)
    s = sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * (
        1.0 - progress
    ) ** sched.exponent
    return min(max(s, sched.initial_sparsity), sched.final_sparsity)


def _block_grid(shape: tuple[int, ...], block_shape: BlockShape) -> tuple[int, int]:
    rows, cols = shape
    br, bc = block_shape
    if rows % br or cols % bc:
        raise ShapeError(f"{rows}x{cols} is not divisible by block {br}x{bc}")
    return rows // br, cols // bc


def block_l1_norms(w: np.ndarray, block_shape: BlockShape) -> np.ndarray:
    nbr, nbc = _block_grid(w.shape, block_shape)
    br, bc = block_shape
    return np.abs(w).reshape(nbr, br, nbc, bc).sum(axis=(1, 3))


def pruned_block_count(sparsity: float, n_blocks: int) -> int:
    """Round-half-up conversion of a sparsity target to a number of pruned blocks."""
    return min(n_blocks, math.floor(sparsity * n_blocks + 0.5))


def compute_block_mask(
    retained: np.ndarray, sparsity: float, block_shape: BlockShape = DEFAULT_BLOCK
) -> np.ndarray:
    """True marks an active block; the lowest-L1 blocks are masked, earlier index first on ties."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValidationError(f"sparsity must be in [0, 1], got {sparsity}")
    norms = block_l1_norms(np.asarray(retained), block_shape)
    flat = norms.ravel()
    order = np.lexsort((np.arange(flat.size), flat))
    mask = np.ones(flat.size, dtype=bool)
    mask[order[: pruned_block_count(sparsity, flat.size)]] = False
    return mask.reshape(norms.shape)


def mask_sparsity(mask: np.ndarray) -> float:
    return 1.0 - float(np.count_nonzero(mask)) / mask.size


def expand_mask(mask: np.ndarray, block_shape: BlockShape) -> np.ndarray:
    br, bc = block_shape
    return np.repeat(np.repeat(mask, br, axis=0), bc, axis=1)


def _check_mask(shape: tuple[int, ...], mask: np.ndarray, block_shape: BlockShape) -> None:
    if _block_grid(shape, block_shape) != mask.shape:
        raise ShapeError(
            f"mask {mask.shape} does not match the {block_shape[0]}x{block_shape[1]} "
            f"block grid of a {shape[0]}x{shape[1]} matrix"
        )


@dataclass(frozen=True, eq=False)
class PruningState:
    retained: np.ndarray
    mask: np.ndarray
    schedule: PruningSchedule
    block_shape: BlockShape = DEFAULT_BLOCK
    step: int = 0

    @classmethod
    def start(
        cls,
        weights: np.ndarray,
        schedule: PruningSchedule,
        block_shape: BlockShape = DEFAULT_BLOCK,
    ) -> PruningState:
        grid = _block_grid(weights.shape, block_shape)
        return cls(np.array(weights), np.ones(grid, dtype=bool), schedule, block_shape)

    @property
    def sparsity(self) -> float:
        return mask_sparsity(self.mask)


def apply_mask(state: PruningState) -> np.ndarray:
    """Effective weights: retained values on active blocks, exact zeros elsewhere."""
    _check_mask(state.retained.shape, state.mask, state.block_shape)
    keep = expand_mask(state.mask, state.block_shape)
    return np.where(keep, state.retained, np.zeros((), dtype=state.retained.dtype))


def mask_gradients(grad: np.ndarray, mask: np.ndarray, block_shape: BlockShape = DEFAULT_BLOCK) -> np.ndarray:
    _check_mask(grad.shape, mask, block_shape)
    return np.where(expand_mask(mask, block_shape), grad, np.zeros((), dtype=grad.dtype))


def maybe_update_mask(state: PruningState, t: int) -> PruningState:
    """Recompute the mask on interval steps, including after end_step (recovery at final sparsity)."""
    if t < state.step:
        raise ValidationError(f"step {t} is earlier than the state's step {state.step}")
    if t % state.schedule.mask_update_interval:
        return replace(state, step=t)
    target = sparsity_at_step(state.schedule, t)
    mask = compute_block_mask(state.retained, target, state.block_shape)
    logger.debug("step %d: mask update at sparsity %.4f", t, target)
    return replace(state, mask=mask, step=t)


def prune_matrix(
    w: np.ndarray, sparsity: float, block_shape: BlockShape = DEFAULT_BLOCK
) -> BlockSparseMatrix:
    """One-shot magnitude pruning straight to block-sparse storage."""
    w = np.asarray(w)
    mask = compute_block_mask(w, sparsity, block_shape)
    effective = np.where(expand_mask(mask, block_shape), w, np.zeros((), dtype=w.dtype))
    return from_dense(effective, *block_shape)


@dataclass(frozen=True)
class PruningGroup:
    """Matrices that share one schedule, e.g. every W/R matrix of the encoder."""

    name: str
    states: dict[str, PruningState] = field(default_factory=dict)

    def maybe_update(self, t: int) -> PruningGroup:
        return replace(self, states={k: maybe_update_mask(s, t) for k, s in self.states.items()})

    @property
    def sparsity(self) -> float:
        total = sum(s.mask.size for s in self.states.values())
        pruned = sum(s.mask.size - np.count_nonzero(s.mask) for s in self.states.values())
        return pruned / total if total else 0.0
