"""Attention-guided regional masking.

The pipeline runs on plain arrays and is gradient-detached: head-averaged
attention from the unmasked pass is rolled out across layers, column sums of
the rolled-out matrix give per-timestep importance, and the highest-scoring
timesteps seed contiguous masked regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import AttentionStack, SequenceBatch
from .errors import ConfigError, ContractError, DegenerateError

STRATEGIES = ("darem", "random", "none")


@dataclass(frozen=True)
class MaskConfig:
    phi: float = 0.2  # max fraction of valid steps masked
    zeta: float = 0.3  # fraction of the budget picked directly by importance
    gamma: float = 0.1  # region radius as a fraction of valid length
    strategy: str = "darem"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("phi", "zeta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"mask.{name} must lie in [0, 1], got {v}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"mask.strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class ImportanceScores:
    sigma: np.ndarray  # [B, N]
    valid: np.ndarray  # [B, N]


@dataclass
class RegionalMask:
    masked: np.ndarray  # [B, N] bool
    budget: np.ndarray  # [B]
    seeds: list[list[int]] = field(default_factory=list)

    @property
    def count(self) -> np.ndarray:
        return self.masked.sum(axis=1)


# float slack so that e.g. 0.29 * 100 floors to 29, not 28
_FLOOR_SLACK = 1e-9


def mask_budget(phi: float, n: int) -> int:
    return int(math.floor(phi * n + _FLOOR_SLACK))


def num_seeds(zeta: float, budget: int) -> int:
    return max(1, int(math.floor(zeta * budget + 0.5 + _FLOOR_SLACK)))


def region_radius(gamma: float, n: int) -> int:
    return int(math.floor(gamma * n + _FLOOR_SLACK))


def aggregate_attention_rollout(attn: AttentionStack | np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Roll attention out across layers, accounting for padded keys.

    ``R_0 = A_0 * M`` and ``R_i = (A_i * M / 2 + I / 2) @ R_{i-1}``; returns the
    last ``R`` with shape [B, N+1, N+1].  ``M`` zeroes padded key columns.
    """
    weights = attn.weights if isinstance(attn, AttentionStack) else np.asarray(attn)
    if weights.ndim != 4 or weights.shape[0] == 0:
        raise ContractError("rollout needs a non-empty [L, B, N+1, N+1] attention stack")
    B = weights.shape[1]
    tokens = np.concatenate([np.ones((B, 1), dtype=bool), np.asarray(valid, dtype=bool)], axis=1)
    if tokens.shape[1] != weights.shape[-1]:
        raise ContractError(f"valid mask {np.shape(valid)} does not match attention extent {weights.shape[-1]}")
    keep = tokens[:, None, :].astype(weights.dtype)
    eye = np.eye(weights.shape[-1], dtype=weights.dtype)
    rolled = weights[0] * keep
    for layer in weights[1:]:
        rolled = (0.5 * (layer * keep) + 0.5 * eye) @ rolled
    return rolled


def attention_scores(rolled: np.ndarray, valid: np.ndarray) -> ImportanceScores:
    """Normalized column sums of the timestep block (CLS row and column dropped)."""
    valid = np.asarray(valid, dtype=bool)
    block = rolled[:, 1:, 1:].astype(np.float64)
    pair = valid[:, :, None] & valid[:, None, :]
    received = np.where(pair, block, 0.0).sum(axis=1)
    total = received.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateError("rolled-out attention places no mass on valid timesteps")
    return ImportanceScores(received / total, valid)


def _rank_desc(scores: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores keeps the lower index first on ties
    return np.argsort(-scores, kind="stable")


def _darem_row(sigma: np.ndarray, n: int, cfg: MaskConfig) -> tuple[np.ndarray, int, list[int]]:
    row = np.zeros(sigma.shape[0], dtype=bool)
    budget = mask_budget(cfg.phi, n)
    if budget == 0:
        return row, 0, []
    seeds = [int(s) for s in _rank_desc(sigma[:n])[: num_seeds(cfg.zeta, budget)]]
    radius = region_radius(cfg.gamma, n)
    count = 0
    for s in seeds:
        for d in range(radius + 1):
            for j in ((s,) if d == 0 else (s - d, s + d)):
                if 0 <= j < n and not row[j]:
                    row[j] = True
                    count += 1
                    if count == budget:
                        return row, budget, seeds
    return row, budget, seeds


def build_regional_mask(scores: ImportanceScores, cfg: MaskConfig, rng_seed: int | None = None) -> RegionalMask:
    """Per-sample mask from importance scores under budget/seed/radius settings.

    ``darem``: budget ``floor(phi*n)``; the ``max(1, round(zeta*budget))``
    highest-scoring steps seed regions of radius ``floor(gamma*n)`` grown
    outward (nearer first, lower index first at equal distance) until the
    budget is spent.  ``random``: ``budget`` distinct valid steps drawn with
    ``rng_seed``.  ``none``: nothing is masked.
    """
    sigma = np.asarray(scores.sigma)
    valid = np.asarray(scores.valid, dtype=bool)
    B, N = sigma.shape
    lengths = valid.sum(axis=1)
    masked = np.zeros((B, N), dtype=bool)
    budgets = np.array([mask_budget(cfg.phi, int(n)) for n in lengths], dtype=np.int64)
    seeds: list[list[int]] = [[] for _ in range(B)]
    if cfg.strategy == "none":
        return RegionalMask(masked, np.zeros(B, dtype=np.int64), seeds)
    if cfg.strategy == "random":
        if rng_seed is None:
            raise ContractError("random masking needs an rng seed")
        rng = np.random.default_rng(rng_seed)
        for b in range(B):
            pick = rng.choice(int(lengths[b]), size=int(budgets[b]), replace=False)
            masked[b, pick] = True
        return RegionalMask(masked, budgets, seeds)
    for b in range(B):
        masked[b], budgets[b], seeds[b] = _darem_row(sigma[b], int(lengths[b]), cfg)
    return RegionalMask(masked, budgets, seeds)


def apply_mask(batch: SequenceBatch, mask: RegionalMask) -> SequenceBatch:
    """Zero the feature rows of masked steps; validity and labels are untouched."""
    if mask.masked.shape != batch.valid.shape:
        raise ContractError(f"mask shape {mask.masked.shape} does not match batch {batch.valid.shape}")
    if np.any(mask.masked & ~batch.valid):
        raise ContractError("mask covers padded timesteps")
    if not mask.masked.any():
        return replace(batch)
    values = np.where(mask.masked[:, :, None], 0.0, batch.values).astype(batch.values.dtype)
    return replace(batch, values=values)


def importance_from_attention(attn: AttentionStack, valid: np.ndarray) -> ImportanceScores:
    return attention_scores(aggregate_attention_rollout(attn, valid), valid)
