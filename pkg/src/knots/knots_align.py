"""Joint-SVD alignment of task updates and merging in the aligned space.

For one layer, the n updates are concatenated side by side and decomposed,

    [dW_1, dW_2, ..., dW_n] = U diag(S) [V_1; V_2; ...; V_n]^T

so every update is ``U diag(S) V_i^T``: a shared basis ``U diag(S)`` and a
task-specific block ``V_i``. Merge rules act on the blocks and the merged
update is rebuilt as ``U diag(S) V_merged^T``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from knots.checkpoint_io import TaskUpdate
from knots.errors import ConfigError, EmptyInput, ShapeError
from knots.update_algebra import (
    MergeConfig,
    MergedUpdate,
    check_updates,
    dare_drop,
    dare_ties_merge,
    disjoint_mean,
    merge_ta,
    model_seed,
    ta_layer,
    ties_merge,
    topk_mask,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignedDecomposition:
    """Joint SVD of one layer's updates.

    ``shared`` is the factor common to all tasks and ``blocks`` the per-task
    pieces. For ``axis="columns"`` that is ``U`` (O x k) and the ``V_i``
    (I x k); for ``axis="rows"`` it is ``V`` (I x k) and the ``U_i`` (O x k).
    """

    shared: np.ndarray
    S: np.ndarray
    blocks: list[np.ndarray]
    axis: str = "columns"
    layer_key: str = ""

    @property
    def k(self) -> int:
        return int(self.S.size)

    @property
    def U(self) -> np.ndarray:
        if self.axis != "columns":
            raise AttributeError("row decompositions have per-task U blocks; use U_blocks")
        return self.shared

    @property
    def V_blocks(self) -> list[np.ndarray]:
        if self.axis != "columns":
            raise AttributeError("row decompositions share one V; use V")
        return self.blocks

    @property
    def V(self) -> np.ndarray:
        if self.axis != "rows":
            raise AttributeError("column decompositions have per-task V blocks; use V_blocks")
        return self.shared

    @property
    def U_blocks(self) -> list[np.ndarray]:
        if self.axis != "rows":
            raise AttributeError("column decompositions share one U; use U")
        return self.blocks

    def rebuild(self, block: np.ndarray) -> np.ndarray:
        """Map a (merged) task block back to weight space."""
        if self.axis == "columns":
            return (self.shared * self.S) @ block.T
        return (block * self.S) @ self.shared.T

    def reconstruct(self, i: int) -> np.ndarray:
        return self.rebuild(self.blocks[i])


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    """Flip singular pairs in place so each U column's largest-|.| entry is positive."""
    if u.size == 0:
        return
    pivot = np.argmax(np.abs(u), axis=0)  # first index on ties
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u *= signs
    vt *= signs[:, None]


def knots_decompose(
    updates: Sequence[np.ndarray],
    axis: str = "columns",
    rank_tol: float = 1e-8,
    layer_key: str = "",
) -> AlignedDecomposition:
    """Jointly decompose same-shape update matrices.

    Directions with ``s <= max(rank_tol, eps * max(shape)) * s_max`` are
    dropped; the floor is numpy's ``matrix_rank`` tolerance and keeps rounding
    noise out of the basis even at ``rank_tol=0``. At least one direction is
    always kept.
    """
    if len(updates) == 0:
        raise EmptyInput("need at least one update to decompose")
    mats = [np.asarray(m, dtype=np.float64) for m in updates]
    shape = mats[0].shape
    if len(shape) != 2:
        raise ShapeError(f"updates must be matrices, got shape {shape}")
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"update shapes differ: {m.shape} vs {shape}")
    if not 0 <= rank_tol < 1:
        raise ConfigError(f"rank_tol must lie in [0, 1), got {rank_tol}")
    if axis not in ("columns", "rows"):
        raise ConfigError(f"axis must be 'columns' or 'rows', got {axis!r}")

    n = len(mats)
    joint = np.hstack(mats) if axis == "columns" else np.vstack(mats)
    u, s, vt = np.linalg.svd(joint, full_matrices=False)
    floor = np.finfo(np.float64).eps * max(joint.shape)
    k = max(1, int(np.count_nonzero(s > max(rank_tol, floor) * s[0]))) if s.size else 0
    u, s, vt = u[:, :k].copy(), s[:k].copy(), vt[:k].copy()
    _fix_signs(u, vt)

    if axis == "columns":
        cols = shape[1]
        v = vt.T
        blocks = [v[i * cols : (i + 1) * cols].copy() for i in range(n)]
        return AlignedDecomposition(u, s, blocks, "columns", layer_key)
    rows = shape[0]
    blocks = [u[i * rows : (i + 1) * rows].copy() for i in range(n)]
    return AlignedDecomposition(vt.T.copy(), s, blocks, "rows", layer_key)


def sigma_scaled_blocks(dec: AlignedDecomposition) -> list[np.ndarray]:
    """Blocks with column j multiplied by S[j]; the view magnitude decisions are made on.

    For column decompositions ``(V_i * S)^T == U^T dW_i``.
    """
    return [b * dec.S for b in dec.blocks]


def roundoff_floor(dec: AlignedDecomposition) -> np.ndarray:
    """Per-column magnitude below which block entries are SVD rounding noise.

    Entries of singular vector j carry errors of order ``eps * s_max / s_j``.
    """
    dim = max(dec.shared.shape[0], sum(b.shape[0] for b in dec.blocks))
    s = np.where(dec.S > 0, dec.S, np.inf)
    return dim * np.finfo(np.float64).eps * dec.S[0] / s


def _merge_blocks(dec: AlignedDecomposition, inner: str, config: MergeConfig, source_ids: Sequence[str]) -> np.ndarray:
    blocks = np.stack(dec.blocks)
    if inner == "TA":
        return ta_layer(blocks, config.alpha)
    # sign election ignores zeros; rounding noise must not pass for a vote
    blocks = np.where(np.abs(blocks) <= roundoff_floor(dec), 0.0, blocks)
    if inner == "TIES":
        # mask from the magnitude-carrying view, applied to the unscaled blocks
        masks = np.stack([topk_mask(b, config.topk_percent) for b in sigma_scaled_blocks(dec)])
        return config.alpha * disjoint_mean(np.where(masks, blocks, 0.0))
    if inner == "DARE_TIES":
        seed = config.seeds[0]
        dropped = np.stack(
            [dare_drop(b, config.dare_p, model_seed(seed, sid), dec.layer_key) for b, sid in zip(blocks, source_ids)]
        )
        if config.topk_percent < 100:  # optional extra trim, off by default
            masks = np.stack([topk_mask(b * dec.S, config.topk_percent) for b in dropped])
            dropped = np.where(masks, dropped, 0.0)
        return config.alpha * disjoint_mean(dropped)
    raise ConfigError(f"unsupported inner merge rule {inner!r}")


def knots_merge_layer(
    mats: Sequence[np.ndarray],
    inner: str,
    config: MergeConfig,
    source_ids: Sequence[str],
    layer_key: str = "",
) -> tuple[np.ndarray, int]:
    """Merge one layer; returns the merged update and the joint rank k (0 for an all-zero layer)."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if all(not np.any(m) for m in mats):
        return np.zeros_like(mats[0]), 0
    dec = knots_decompose(mats, config.concat_axis, config.rank_tol, layer_key)
    merged_block = _merge_blocks(dec, inner, config, source_ids)
    return dec.rebuild(merged_block), dec.k


def _layer_map(fn, keys: list[str], threads: int) -> list:
    if threads <= 1 or len(keys) <= 1:
        return [fn(k) for k in keys]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, keys))


def knots_merge(
    updates: Sequence[TaskUpdate],
    inner: str,
    config: MergeConfig,
    threads: int = 1,
) -> MergedUpdate:
    """Align every layer's updates with a joint SVD, merge the aligned blocks with
    ``inner`` (``TA``, ``TIES`` or ``DARE_TIES``) and rebuild in weight space."""
    inner = inner.upper().removeprefix("KNOTS_")
    if inner not in ("TA", "TIES", "DARE_TIES"):
        raise ConfigError(f"unsupported inner merge rule {inner!r}")
    if inner == "DARE_TIES" and not config.seeds:
        raise ConfigError("DARE_TIES needs a seed")
    keys = check_updates(updates)
    source_ids = [u.source_id for u in updates]
    if inner == "DARE_TIES" and len(set(source_ids)) < len(source_ids):
        log.warning("duplicate source ids %s share DARE masks", source_ids)

    def one(key: str) -> tuple[np.ndarray, int]:
        return knots_merge_layer([u.layers[key] for u in updates], inner, config, source_ids, key)

    results = _layer_map(one, keys, threads)
    layers = {k: r[0] for k, r in zip(keys, results)}
    ranks = {k: r[1] for k, r in zip(keys, results)}
    return MergedUpdate(layers, config, source_ids, ranks)


def merge(updates: Sequence[TaskUpdate], config: MergeConfig, threads: int | None = None) -> MergedUpdate:
    """Dispatch on ``config.method``. DARE methods use ``config.seeds[0]``."""
    if threads is None:
        threads = int(os.environ.get("KNOTS_THREADS", "1") or 1)
    if config.is_knots:
        return knots_merge(updates, config.inner, config, threads=threads)
    if config.method == "TA":
        out = merge_ta(updates, config.alpha)
    elif config.method == "TIES":
        out = ties_merge(updates, config.alpha, config.topk_percent)
    else:
        out = dare_ties_merge(updates, config.alpha, config.dare_p, config.seeds[0], config.topk_percent)
    out.config = config
    return out


def row_vs_column_compare(updates: Sequence[TaskUpdate], config: MergeConfig) -> dict:
    """Run a KnOTS merge with column and with row concatenation; report per-layer Frobenius gaps."""
    inner = config.inner
    columns = knots_merge(updates, inner, _with_axis(config, "columns"))
    rows = knots_merge(updates, inner, _with_axis(config, "rows"))
    gap = {k: float(np.linalg.norm(columns.layers[k] - rows.layers[k])) for k in sorted(columns.layers)}
    return {"column_result": columns, "row_result": rows, "frobenius_gap": gap}


def _with_axis(config: MergeConfig, axis: str) -> MergeConfig:
    d = config.to_dict()
    d["concat_axis"] = axis
    if not config.is_knots:
        d["method"] = "KNOTS_" + config.method
    return MergeConfig.from_dict(d)
