"""Baseline merge rules on dense task updates: Task Arithmetic, TIES, DARE-TIES."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from knots.checkpoint_io import TaskUpdate
from knots.errors import ConfigError, EmptyInput, InvalidProbability, ShapeError

METHODS = ("TA", "TIES", "DARE_TIES", "KNOTS_TA", "KNOTS_TIES", "KNOTS_DARE_TIES")
AXES = ("columns", "rows")


@dataclass(frozen=True)
class MergeConfig:
    method: str = "TA"
    alpha: float = 1.0
    topk_percent: float = 100.0
    dare_p: float = 0.0
    seeds: tuple[int, ...] = ()
    concat_axis: str = "columns"
    rank_tol: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be a finite nonnegative number, got {self.alpha}")
        if not 0 < self.topk_percent <= 100:
            raise ConfigError(f"topk_percent must lie in (0, 100], got {self.topk_percent}")
        if not 0 <= self.dare_p < 1:
            raise InvalidProbability(f"dare_p must lie in [0, 1), got {self.dare_p}")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be unsigned integers")
        if self.uses_dare and not self.seeds:
            raise ConfigError(f"{self.method} needs at least one seed")
        if self.concat_axis not in AXES:
            raise ConfigError(f"concat_axis must be one of {AXES}, got {self.concat_axis!r}")
        if not 0 <= self.rank_tol < 1:
            raise ConfigError(f"rank_tol must lie in [0, 1), got {self.rank_tol}")

    @property
    def uses_dare(self) -> bool:
        return self.method.endswith("DARE_TIES")

    @property
    def is_knots(self) -> bool:
        return self.method.startswith("KNOTS_")

    @property
    def inner(self) -> str:
        """The merge rule with any KNOTS_ prefix stripped."""
        return self.method.removeprefix("KNOTS_")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MergeConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown merge config fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "method" in kwargs:
            kwargs["method"] = str(kwargs["method"]).upper()
        for name in ("alpha", "topk_percent", "dare_p", "rank_tol"):
            if name in kwargs:
                kwargs[name] = float(kwargs[name])
        if "seeds" in kwargs:
            seeds = kwargs["seeds"]
            kwargs["seeds"] = tuple([seeds] if isinstance(seeds, int) else seeds)
        return cls(**kwargs)


@dataclass
class MergedUpdate:
    layers: dict[str, np.ndarray]
    config: MergeConfig
    source_ids: list[str] = field(default_factory=list)
    layer_ranks: dict[str, int] = field(default_factory=dict)  # KnOTS only: k per layer

    def as_task_update(self) -> TaskUpdate:
        return TaskUpdate(self.layers, "merged")


def check_updates(updates: Sequence[TaskUpdate]) -> list[str]:
    """Validate that updates share keys and shapes; return the sorted key list."""
    if not updates:
        raise EmptyInput("need at least one task update")
    keys = updates[0].keys()
    for u in updates[1:]:
        if u.keys() != keys:
            raise ShapeError(f"update {u.source_id!r} has layers {u.keys()}, expected {keys}")
        for k in keys:
            if u.layers[k].shape != updates[0].layers[k].shape:
                raise ShapeError(
                    f"{k}: shape {u.layers[k].shape} of {u.source_id!r} differs from {updates[0].layers[k].shape}"
                )
    return keys


def _stack(updates: Sequence[TaskUpdate], key: str) -> np.ndarray:
    return np.stack([np.asarray(u.layers[key], dtype=np.float64) for u in updates])


def _provenance(updates: Sequence[TaskUpdate], config: MergeConfig) -> tuple[MergeConfig, list[str]]:
    return config, [u.source_id for u in updates]


# --------------------------------------------------------------------------
# Task Arithmetic


def ta_layer(stack: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * stack.sum(axis=0)


def merge_ta(updates: Sequence[TaskUpdate], alpha: float) -> MergedUpdate:
    keys = check_updates(updates)
    layers = {k: ta_layer(_stack(updates, k), alpha) for k in keys}
    return MergedUpdate(layers, *_provenance(updates, MergeConfig("TA", alpha=alpha)))


# --------------------------------------------------------------------------
# TIES


def topk_count(size: int, topk_percent: float) -> int:
    """Number of entries kept: ceil(topk/100 * size), robust to float noise."""
    if not 0 < topk_percent <= 100:
        raise ConfigError(f"topk_percent must lie in (0, 100], got {topk_percent}")
    return min(size, math.ceil(round(topk_percent * size / 100.0, 9)))


def topk_mask(matrix: np.ndarray, topk_percent: float) -> np.ndarray:
    """Boolean mask of the largest-magnitude entries; boundary ties go to the lower flat index."""
    flat = np.abs(np.asarray(matrix)).ravel()
    keep = topk_count(flat.size, topk_percent)
    mask = np.zeros(flat.size, dtype=bool)
    if keep:
        order = np.argsort(-flat, kind="stable")
        mask[order[:keep]] = True
    return mask.reshape(np.shape(matrix))


def ties_trim(matrix: np.ndarray, topk_percent: float) -> np.ndarray:
    matrix = np.asarray(matrix)
    return np.where(topk_mask(matrix, topk_percent), matrix, 0.0).astype(matrix.dtype, copy=False)


def sign_elect(values: Sequence[float] | np.ndarray, axis: int | None = None) -> int | np.ndarray:
    """+1 when the positive entries carry at least as much magnitude as the negative ones, else -1.

    Each side is summed in sorted order, so the result does not depend on
    input order and an exact tie stays a tie under uniform scaling.
    With ``axis`` given, elects independently along that axis of an array.
    """
    values = np.asarray(values, dtype=np.float64)
    if axis is None:
        if values.size == 0:
            raise EmptyInput("sign_elect needs at least one value")
        values, axis = values.ravel(), 0
        scalar = True
    else:
        scalar = False
    ordered = np.sort(np.abs(values), axis=axis)
    signs = np.take_along_axis(np.sign(values), np.argsort(np.abs(values), axis=axis), axis=axis)
    pos = np.where(signs > 0, ordered, 0.0).sum(axis=axis)
    neg = np.where(signs < 0, ordered, 0.0).sum(axis=axis)
    elected = np.where(pos >= neg, 1.0, -1.0)
    return int(elected) if scalar else elected


def disjoint_mean(stack: np.ndarray) -> np.ndarray:
    """Elect a sign per coordinate over axis 0 and average the nonzero agreeing entries."""
    elected = sign_elect(stack, axis=0)
    agree = (stack != 0) & (np.sign(stack) == elected)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    count = agree.sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def ties_layer(stack: np.ndarray, alpha: float, topk_percent: float) -> np.ndarray:
    trimmed = np.stack([ties_trim(m, topk_percent) for m in stack])
    return alpha * disjoint_mean(trimmed)


def ties_merge(updates: Sequence[TaskUpdate], alpha: float, topk_percent: float) -> MergedUpdate:
    keys = check_updates(updates)
    layers = {k: ties_layer(_stack(updates, k), alpha, topk_percent) for k in keys}
    cfg = MergeConfig("TIES", alpha=alpha, topk_percent=topk_percent)
    return MergedUpdate(layers, *_provenance(updates, cfg))


# --------------------------------------------------------------------------
# DARE


def stable_hash(text: str) -> int:
    """64-bit hash that is stable across processes (unlike ``hash``)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def model_seed(seed: int, source_id: str) -> int:
    """Per-model DARE seed; independent of which other models are merged."""
    return (int(seed) ^ stable_hash(source_id)) & 0xFFFF_FFFF_FFFF_FFFF


def dare_drop(matrix: np.ndarray, p: float, seed: int, key: str) -> np.ndarray:
    if not 0 <= p < 1:
        raise InvalidProbability(f"drop probability must lie in [0, 1), got {p}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if p == 0:
        return matrix.copy()
    rng = np.random.default_rng([int(seed), stable_hash(key)])
    keep = rng.random(matrix.shape) >= p
    return np.where(keep, matrix / (1.0 - p), 0.0)


def dare_transform(update: TaskUpdate, p: float, seed: int) -> TaskUpdate:
    """Drop each coordinate with probability ``p`` and rescale survivors by 1/(1-p).

    The random stream is keyed by ``(seed, layer key)``, with coordinates drawn
    in row-major order, so a layer's mask does not depend on the other layers.
    """
    if not 0 <= p < 1:
        raise InvalidProbability(f"drop probability must lie in [0, 1), got {p}")
    return TaskUpdate({k: dare_drop(v, p, seed, k) for k, v in update.layers.items()}, update.source_id)


def dare_ties_merge(
    updates: Sequence[TaskUpdate], alpha: float, p: float, seed: int, topk_percent: float = 100.0
) -> MergedUpdate:
    """Random drop, then sign election and disjoint mean.

    Dropping replaces magnitude trimming; ``topk_percent < 100`` additionally
    trims the dropped updates, for experiments only.
    """
    keys = check_updates(updates)
    dropped = [dare_transform(u, p, model_seed(seed, u.source_id)) for u in updates]
    layers = {}
    for k in keys:
        stack = _stack(dropped, k)
        if topk_percent < 100:
            stack = np.stack([ties_trim(m, topk_percent) for m in stack])
        layers[k] = alpha * disjoint_mean(stack)
    cfg = MergeConfig("DARE_TIES", alpha=alpha, topk_percent=topk_percent, dare_p=p, seeds=(seed,))
    return MergedUpdate(layers, *_provenance(updates, cfg))
