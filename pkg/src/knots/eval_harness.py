"""Desk-scale evaluation: linear-head accuracy, normalized accuracy, Hits@k, the
joint (union) label space, and hyperparameter sweeps with linear search."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from knots.checkpoint_io import TaskUpdate, TensorMap, apply_update, load_tensor_map, save_tensor_map
from knots.errors import (
    ConfigError,
    DegenerateBaseline,
    InvalidGrid,
    InvalidK,
    LabelSpecError,
    MissingKey,
    ShapeError,
)
from knots.knots_align import merge
from knots.update_algebra import MergeConfig

log = logging.getLogger(__name__)

SPLITS = ("validation", "test")
ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda h: np.maximum(h, 0.0),
    "tanh": np.tanh,
}


@dataclass(frozen=True)
class EvalTask:
    name: str
    features: np.ndarray  # m x d
    labels: np.ndarray  # length m, ints in [0, c)
    label_names: list[str]
    head: np.ndarray  # c x d'
    split: str = "test"

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size < 1:
            raise LabelSpecError(f"{self.name}: labels must be a nonempty vector")
        if np.asarray(self.features).shape[0] != labels.size:
            raise ShapeError(f"{self.name}: {np.asarray(self.features).shape[0]} feature rows for {labels.size} labels")
        c = np.asarray(self.head).shape[0]
        if len(self.label_names) != c:
            raise LabelSpecError(f"{self.name}: head has {c} rows but {len(self.label_names)} label names")
        if labels.min() < 0 or labels.max() >= c:
            raise LabelSpecError(f"{self.name}: labels must lie in [0, {c})")
        if self.split not in SPLITS:
            raise LabelSpecError(f"{self.name}: split must be one of {SPLITS}, got {self.split!r}")

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def subset(self, idx: np.ndarray, split: str | None = None) -> "EvalTask":
        return EvalTask(self.name, self.features[idx], self.labels[idx], self.label_names, self.head, split or self.split)


def load_task(path) -> EvalTask:
    tm = load_tensor_map(path)
    meta = tm.metadata
    try:
        names = json.loads(meta["label_names"])
    except KeyError:
        raise LabelSpecError(f"{path}: metadata lacks label_names") from None
    except json.JSONDecodeError:
        raise LabelSpecError(f"{path}: label_names is not a JSON array") from None
    labels = np.asarray(tm["labels"])
    if not np.array_equal(labels, np.round(labels)):
        raise LabelSpecError(f"{path}: labels are not integral")
    features = tm["features"]
    if features.ndim == 1:
        features = features[:, None]
    return EvalTask(
        name=meta.get("name", str(path)),
        features=np.asarray(features, dtype=np.float64),
        labels=labels.astype(np.int64),
        label_names=[str(n) for n in names],
        head=np.asarray(tm["head"], dtype=np.float64),
        split=meta.get("split", "test"),
    )


def save_task(task: EvalTask, path) -> None:
    entries = {
        "features": np.asarray(task.features, dtype=np.float32),
        "labels": np.asarray(task.labels, dtype=np.float32),
        "head": np.asarray(task.head, dtype=np.float32),
    }
    meta = {"name": task.name, "label_names": json.dumps(task.label_names), "split": task.split}
    save_tensor_map(TensorMap(entries, meta), path)


def split_validation(task: EvalTask, seed: int, fraction: float = 0.2) -> tuple[EvalTask, EvalTask]:
    """(validation, evaluation) views. A test-split task gives a seeded ``fraction``
    sample as validation and the rest for evaluation; a validation task is used whole."""
    if task.split == "validation":
        return task, task
    m = task.labels.size
    n_val = max(1, int(round(fraction * m))) if m > 1 else 0
    perm = np.random.default_rng(seed).permutation(m)
    val_idx, rest_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if n_val == 0:
        return task.subset(np.arange(m), "validation"), task
    return task.subset(val_idx, "validation"), task.subset(rest_idx, "test")


# --------------------------------------------------------------------------
# forward pass and metrics


@dataclass(frozen=True)
class ForwardSpec:
    """Ordered weight keys applied to the features; the task head follows.

    ``logits = head @ W_L(... act(W_2 act(W_1 x)))``. The nonlinearity sits
    between layers only, never after the last one.
    """

    layers: tuple[str, ...]
    activation: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.activation is not None and self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ForwardSpec":
        return cls(tuple(data.get("layers", ())), data.get("activation"))

    def to_dict(self) -> dict:
        return {"layers": list(self.layers), "activation": self.activation}


def compute_logits(weights: TensorMap, task: EvalTask, spec: ForwardSpec) -> np.ndarray:
    hidden = np.asarray(task.features, dtype=np.float64)
    act = ACTIVATIONS[spec.activation] if spec.activation else None
    for i, key in enumerate(spec.layers):
        if key not in weights:
            raise MissingKey(f"forward spec names {key!r} but the checkpoint has no such tensor")
        w = np.asarray(weights[key], dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != hidden.shape[1]:
            raise ShapeError(f"layer {key!r} of shape {w.shape} cannot consume {hidden.shape[1]} features")
        hidden = hidden @ w.T
        if act is not None and i < len(spec.layers) - 1:
            hidden = act(hidden)
    if task.head.shape[1] != hidden.shape[1]:
        raise ShapeError(f"head expects {task.head.shape[1]} features, network gives {hidden.shape[1]}")
    return hidden @ task.head.T


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(weights: TensorMap, task: EvalTask, spec: ForwardSpec) -> float:
    return accuracy_from_logits(compute_logits(weights, task, spec), task.labels)


def normalized_accuracy(merged_acc: float, finetuned_acc: float) -> float:
    if not finetuned_acc > 0:
        raise DegenerateBaseline(f"finetuned accuracy must be positive, got {finetuned_acc}")
    return merged_acc / finetuned_acc


def _rank_of(logits: np.ndarray, true_idx: np.ndarray) -> np.ndarray:
    """0-based rank of the true class, ties resolved toward lower indices."""
    logits = np.atleast_2d(logits)
    true_idx = np.atleast_1d(true_idx)
    score = logits[np.arange(len(true_idx)), true_idx][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    ahead = (logits > score) | ((logits == score) & (cols < true_idx[:, None]))
    return ahead.sum(axis=1)


def _check_k(k: int, num_classes: int) -> None:
    if not 1 <= k <= num_classes:
        raise InvalidK(f"k must lie in [1, {num_classes}], got {k}")


def hits_at_k(logits: np.ndarray, true_idx: int, k: int) -> bool:
    logits = np.asarray(logits, dtype=np.float64)
    _check_k(k, logits.shape[-1])
    return bool(_rank_of(logits, np.array([true_idx]))[0] < k)


def hits_at_k_rate(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    _check_k(k, logits.shape[1])
    return float(np.mean(_rank_of(logits, np.asarray(labels)) < k))


# --------------------------------------------------------------------------
# joint label space


def normalize_label(name: str) -> str:
    return " ".join(name.split()).casefold()


@dataclass
class JointLabelSpace:
    union_labels: list[str]
    remap: dict[str, list[int]]  # task name -> union index per task label
    task_slices: dict[str, tuple[int, int]] = field(default_factory=dict)  # rows of the joint task


def build_joint_space(tasks: Sequence[EvalTask], name: str = "joint") -> tuple[JointLabelSpace, EvalTask]:
    """Union of all tasks' labels (exact match after case/whitespace folding).

    A label shared by several tasks keeps the head row of the first task that
    has it. The joint task stacks every example with its label remapped into
    the union; which task an example came from is not part of the joint task.
    """
    if not tasks:
        raise LabelSpecError("need at least one task")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise LabelSpecError(f"task names must be unique, got {names}")
    width = tasks[0].head.shape[1]
    union: list[str] = []
    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    remap: dict[str, list[int]] = {}
    for t in tasks:
        if t.head.shape[0] != len(t.label_names):
            raise LabelSpecError(f"{t.name}: head rows and label names disagree")
        if t.head.shape[1] != width:
            raise ShapeError(f"{t.name}: head width {t.head.shape[1]} differs from {width}")
        mapping = []
        for j, label in enumerate(t.label_names):
            key = normalize_label(label)
            if key not in index:
                index[key] = len(union)
                union.append(key)
                rows.append(t.head[j])
            mapping.append(index[key])
        remap[t.name] = mapping

    feats, labels, slices, start = [], [], {}, 0
    for t in tasks:
        feats.append(np.asarray(t.features, dtype=np.float64))
        labels.append(np.asarray(remap[t.name])[t.labels])
        slices[t.name] = (start, start + t.labels.size)
        start += t.labels.size
    joint = EvalTask(
        name=name,
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        label_names=union,
        head=np.stack(rows),
        split=tasks[0].split,
    )
    return JointLabelSpace(union, remap, slices), joint


# --------------------------------------------------------------------------
# sweeps

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_TOPKS = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0)
DEFAULT_DARE_PS = (0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
DEFAULT_SEEDS = (420, 421, 422, 423, 424)
DEFAULT_TOPK = 30.0
DEFAULT_DARE_P = 0.9


@dataclass(frozen=True)
class SweepGrids:
    alpha: tuple[float, ...] = DEFAULT_ALPHAS
    topk_percent: tuple[float, ...] = DEFAULT_TOPKS
    dare_p: tuple[float, ...] = DEFAULT_DARE_PS
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self) -> None:
        for name in ("alpha", "topk_percent", "dare_p", "seeds"):
            values = tuple(getattr(self, name))
            if not values:
                raise InvalidGrid(f"grid {name!r} is empty")
            object.__setattr__(self, name, values)

    @classmethod
    def from_dict(cls, data: dict | None) -> "SweepGrids":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidGrid(f"unknown grid fields {sorted(unknown)}")
        conv = {"alpha": float, "topk_percent": float, "dare_p": float, "seeds": int}
        return cls(**{k: tuple(conv[k](v) for v in vals) for k, vals in data.items()})

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("alpha", "topk_percent", "dare_p", "seeds")}


@dataclass
class SweepResult:
    method: str
    objective: str
    grid_points: list[tuple[MergeConfig, float]]
    best: MergeConfig
    best_score: float
    search_trace: list[dict]
    grids: SweepGrids
    exhaustive_best: MergeConfig | None = None
    exhaustive_score: float | None = None
    finetuned_accuracy: dict[str, float] = field(default_factory=dict)
    n_evaluations: int = 0

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "objective": self.objective,
            "grids": self.grids.to_dict(),
            "best": self.best.to_dict(),
            "best_score": self.best_score,
            "n_evaluations": self.n_evaluations,
            "finetuned_accuracy": dict(sorted(self.finetuned_accuracy.items())),
            "search_trace": self.search_trace,
        }
        if self.exhaustive_best is not None:
            out["exhaustive_best"] = self.exhaustive_best.to_dict()
            out["exhaustive_score"] = self.exhaustive_score
        return out


def _prune_field(method: str) -> str | None:
    inner = method.removeprefix("KNOTS_")
    return {"TA": None, "TIES": "topk_percent", "DARE_TIES": "dare_p"}[inner]


def _phase1_value(grid: Sequence[float], default: float) -> float:
    if default in grid:
        return default
    return min(grid, key=lambda v: (abs(v - default), v))


def _order_key(cfg: MergeConfig, score: float, prune: str | None) -> tuple:
    return (-score, cfg.alpha, getattr(cfg, prune) if prune else 0.0, cfg.seeds[0] if cfg.seeds else -1)


class _Objective:
    """Merges, applies and scores one config; caches so repeated points cost nothing."""

    def __init__(self, updates, base, tasks, spec, mode, finetuned, threads):
        self.updates, self.base, self.tasks, self.spec = updates, base, tasks, spec
        self.mode, self.finetuned, self.threads = mode, finetuned, threads
        self.cache: dict[MergeConfig, float] = {}
        self.calls = 0
        if mode == "joint":
            _, self.joint = build_joint_space(tasks)

    def __call__(self, cfg: MergeConfig) -> float:
        if cfg in self.cache:
            return self.cache[cfg]
        self.calls += 1
        merged = merge(self.updates, cfg, threads=self.threads)
        weights = apply_update(self.base, merged.layers)
        if self.mode == "joint":
            logits = compute_logits(weights, self.joint, self.spec)
            score = hits_at_k_rate(logits, self.joint.labels, 1)
        else:
            score = float(
                np.mean(
                    [normalized_accuracy(evaluate(weights, t, self.spec), self.finetuned[t.name]) for t in self.tasks]
                )
            )
        self.cache[cfg] = score
        return score


def finetuned_accuracies(updates: Sequence[TaskUpdate], base: TensorMap, tasks: Sequence[EvalTask], spec: ForwardSpec) -> dict[str, float]:
    """Accuracy of each finetuned model on its own task; ``updates[i]`` pairs with ``tasks[i]``."""
    if len(updates) != len(tasks):
        raise ConfigError(
            f"cannot pair {len(updates)} models with {len(tasks)} tasks; supply finetuned accuracies explicitly"
        )
    return {t.name: evaluate(apply_update(base, u), t, spec) for u, t in zip(updates, tasks)}


def sweep(
    updates: Sequence[TaskUpdate],
    base: TensorMap,
    tasks: Sequence[EvalTask],
    method: str,
    grids: SweepGrids | None = None,
    spec: ForwardSpec | None = None,
    *,
    mode: str = "per_task",
    finetuned_acc: dict[str, float] | None = None,
    exhaustive: bool = False,
    concat_axis: str = "columns",
    rank_tol: float = 1e-8,
    threads: int = 1,
) -> SweepResult:
    """Linear search: tune alpha at the default pruning value, then the pruning
    value at the best alpha. DARE methods try every seed at every point.

    The objective is mean validation normalized accuracy (``mode="per_task"``)
    or Hits@1 on the joint label space (``mode="joint"``).
    """
    grids = grids or SweepGrids()
    if spec is None:
        raise ConfigError("sweep needs a forward spec")
    if mode not in ("per_task", "joint"):
        raise ConfigError(f"unknown eval mode {mode!r}")
    method = method.upper()
    prune = _prune_field(method)
    seeds = grids.seeds if method.endswith("DARE_TIES") else ()
    if mode == "per_task" and finetuned_acc is None:
        finetuned_acc = finetuned_accuracies(updates, base, tasks, spec)

    score_of = _Objective(updates, base, tasks, spec, mode, finetuned_acc or {}, threads)
    trace: list[dict] = []
    seen: dict[MergeConfig, float] = {}

    def config(alpha: float, prune_value: float | None, seed: int | None) -> MergeConfig:
        kw = {"method": method, "alpha": alpha, "concat_axis": concat_axis, "rank_tol": rank_tol}
        if prune:
            kw[prune] = prune_value
        if seed is not None:
            kw["seeds"] = (seed,)
        return MergeConfig(**kw)

    def run(phase: str, cfgs: list[MergeConfig]) -> list[tuple[MergeConfig, float]]:
        out = []
        for cfg in cfgs:
            score = score_of(cfg)
            seen.setdefault(cfg, score)
            trace.append({"phase": phase, "config": cfg.to_dict(), "score": score})
            out.append((cfg, score))
        return out

    def pick(points: list[tuple[MergeConfig, float]]) -> tuple[MergeConfig, float]:
        return min(points, key=lambda p: _order_key(p[0], p[1], prune))

    seed_list: Sequence[int | None] = seeds or (None,)
    if prune:
        default = DEFAULT_TOPK if prune == "topk_percent" else DEFAULT_DARE_P
        p0 = _phase1_value(getattr(grids, prune), default)
    else:
        p0 = None
    phase1 = run("alpha", [config(a, p0, s) for a in grids.alpha for s in seed_list])
    best_cfg, _ = pick(phase1)
    if prune:
        run(prune, [config(best_cfg.alpha, v, s) for v in getattr(grids, prune) for s in seed_list])

    points = list(seen.items())
    best_cfg, best_score = pick(points)
    result = SweepResult(
        method=method,
        objective="joint_hits@1" if mode == "joint" else "mean_normalized_accuracy",
        grid_points=points,
        best=best_cfg,
        best_score=best_score,
        search_trace=trace,
        grids=grids,
        finetuned_accuracy=dict(finetuned_acc or {}),
    )
    if exhaustive:
        prune_values = getattr(grids, prune) if prune else (None,)
        full = [(c, score_of(c)) for c in (config(a, v, s) for a, v, s in itertools.product(grids.alpha, prune_values, seed_list))]
        for cfg, score in full:
            trace.append({"phase": "exhaustive", "config": cfg.to_dict(), "score": score})
        result.exhaustive_best, result.exhaustive_score = pick(full)
    result.n_evaluations = score_of.calls
    return result
