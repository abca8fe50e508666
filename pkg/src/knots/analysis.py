"""Diagnostics: linear CKA between update activations, task-vector cosine, and the
two-weight ReLU counterexample showing that orthogonal task vectors can still
merge catastrophically."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from knots.checkpoint_io import LoraAdapter, TaskUpdate, TensorMap, materialize_update
from knots.errors import ConfigError, DegenerateBatch, DegenerateVector, MissingProbe, ShapeError
from knots.knots_align import knots_decompose
from knots.update_algebra import check_updates, merge_ta, stable_hash

CKA_MODES = ("raw_update", "knots_aligned", "fft_delta")


def _center(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"{name} must be an m x d matrix with m >= 2, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    scale = np.linalg.norm(x)
    if scale == 0 or np.linalg.norm(xc) <= 1e-12 * scale:
        raise DegenerateBatch(f"{name} is constant across rows; CKA is undefined")
    return xc


def cka_linear(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two activation batches over the same m inputs."""
    xc, yc = _center(x, "X"), _center(y, "Y")
    if xc.shape[0] != yc.shape[0]:
        raise ShapeError(f"batches have {xc.shape[0]} and {yc.shape[0]} rows")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


@dataclass
class CkaReport:
    mode: str
    layers: dict[str, np.ndarray]
    summary: np.ndarray
    source_ids: list[str] = field(default_factory=list)
    probe: dict = field(default_factory=dict)

    def mean_off_diagonal(self) -> float:
        n = self.summary.shape[0]
        if n < 2:
            return float("nan")
        return float(self.summary[~np.eye(n, dtype=bool)].mean())

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "sources": list(self.source_ids),
            "layers": {k: self.layers[k].tolist() for k in sorted(self.layers)},
            "summary": self.summary.tolist(),
            "mean_off_diagonal": self.mean_off_diagonal(),
            "probe": dict(self.probe),
        }

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source", *self.source_ids])
        for sid, row in zip(self.source_ids, self.summary):
            writer.writerow([sid, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def gaussian_probes(input_dims: Mapping[str, int], m: int, seed: int) -> dict[str, np.ndarray]:
    """Seeded standard-normal probe inputs, one m x I batch per layer."""
    out = {}
    for key in sorted(input_dims):
        rng = np.random.default_rng([int(seed), stable_hash(key)])
        out[key] = rng.standard_normal((m, input_dims[key]))
    return out


def _as_update(model) -> TaskUpdate:
    if isinstance(model, TaskUpdate):
        return model
    if isinstance(model, LoraAdapter):
        return materialize_update(model)
    raise TypeError(f"expected a TaskUpdate or LoraAdapter, got {type(model).__name__}")


def _cka_matrix(acts: Sequence[np.ndarray]) -> np.ndarray:
    n = len(acts)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cka_linear(acts[i], acts[j])
    return out


def pairwise_update_cka(
    models: Sequence,
    probes: Mapping[str, np.ndarray],
    mode: str = "raw_update",
    base: TensorMap | None = None,
    probe_info: dict | None = None,
    rank_tol: float = 1e-8,
) -> CkaReport:
    """Pairwise CKA of per-layer activations, averaged over layers.

    ``raw_update`` feeds probes through each ``dW_i``; ``knots_aligned``
    through each aligned block ``V_i^T`` of the joint decomposition;
    ``fft_delta`` takes full finetuned checkpoints (``TensorMap``) and
    subtracts the activations of ``base`` at every layer.
    """
    if mode not in CKA_MODES:
        raise ConfigError(f"unknown CKA mode {mode!r}; choose from {CKA_MODES}")
    if not models:
        raise ConfigError("need at least one model")

    if mode == "fft_delta":
        if base is None:
            raise ConfigError("fft_delta mode needs the pretrained base checkpoint")
        # layers that some finetuned model actually changed
        keys = [
            k
            for k in base.keys()
            if base[k].ndim == 2 and any(k in m and not np.array_equal(m[k], base[k]) for m in models)
        ]
        source_ids = [m.metadata.get("source_id", f"model{i}") for i, m in enumerate(models)]
    else:
        updates = [_as_update(m) for m in models]
        keys = check_updates(updates)
        source_ids = [u.source_id for u in updates]

    missing = [k for k in keys if k not in probes]
    if missing:
        raise MissingProbe(f"no probe inputs for layers {missing}")

    layers = {}
    for key in keys:
        x = np.asarray(probes[key], dtype=np.float64)
        if mode == "raw_update":
            acts = [x @ u.layers[key].T for u in updates]
        elif mode == "knots_aligned":
            dec = knots_decompose([u.layers[key] for u in updates], "columns", rank_tol, key)
            acts = [x @ v for v in dec.V_blocks]
        else:
            pre = x @ np.asarray(base[key], dtype=np.float64).T
            acts = [x @ np.asarray(m[key], dtype=np.float64).T - pre for m in models]
        layers[key] = _cka_matrix(acts)

    if not layers:
        raise MissingProbe("no layers to compare")
    summary = np.mean([layers[k] for k in sorted(layers)], axis=0)
    info = dict(probe_info or {})
    info.setdefault("m", int(next(iter(probes.values())).shape[0]) if probes else 0)
    return CkaReport(mode, layers, summary, source_ids, info)


def task_vector_cosine(u1: TaskUpdate, u2: TaskUpdate) -> float:
    """Cosine between two flattened task vectors (layers in key-sorted order)."""
    keys = check_updates([u1, u2])
    a = np.concatenate([np.ravel(u1.layers[k]) for k in keys]).astype(np.float64)
    b = np.concatenate([np.ravel(u2.layers[k]) for k in keys]).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVector("cosine similarity is undefined for a zero task vector")
    return float(np.dot(a, b) / (na * nb))


# --------------------------------------------------------------------------
# toy counterexample: f(x) = w2 * relu(w1 * x), pretrained weights all zero


def toy_task_updates() -> tuple[TaskUpdate, TaskUpdate]:
    """The two one-neuron models. Flattened as [w1, w2]: [1, 1] and [-1, 1]."""
    f1 = TaskUpdate({"layer1": np.array([[1.0]]), "layer2": np.array([[1.0]])}, "f1")
    f2 = TaskUpdate({"layer1": np.array([[-1.0]]), "layer2": np.array([[1.0]])}, "f2")
    return f1, f2


def toy_forward(weights: TaskUpdate, x: np.ndarray) -> np.ndarray:
    w1 = float(weights.layers["layer1"][0, 0])
    w2 = float(weights.layers["layer2"][0, 0])
    return w2 * np.maximum(w1 * np.asarray(x, dtype=np.float64), 0.0)


def toy_predict(weights: TaskUpdate, x: np.ndarray) -> np.ndarray:
    """Class 1 iff the output is strictly positive."""
    return toy_forward(weights, x) > 0


def toy_merge_flips(alpha: float, probes: np.ndarray) -> dict[str, np.ndarray]:
    """For each toy model, which probe predictions the TA merge flips."""
    f1, f2 = toy_task_updates()
    merged = merge_ta([f1, f2], alpha).as_task_update()
    pred = toy_predict(merged, probes)
    return {f.source_id: pred != toy_predict(f, probes) for f in (f1, f2)}
