"""Seeded synthetic adapters, checkpoints and tasks for desk-scale experiments."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from knots.checkpoint_io import LoraAdapter, TaskUpdate, TensorMap
from knots.eval_harness import EvalTask, ForwardSpec


def random_adapter(
    shapes: dict[str, tuple[int, int]], rank: int, seed: int, source_id: str = "", scale: float = 1.0
) -> LoraAdapter:
    """Independent Gaussian factors; ``shapes`` maps layer key -> (O, I)."""
    rng = np.random.default_rng(seed)
    layers = {}
    for key in sorted(shapes):
        o, i = shapes[key]
        b = (scale * rng.standard_normal((o, rank)) / np.sqrt(rank)).astype(np.float32)
        a = rng.standard_normal((rank, i)).astype(np.float32)
        layers[key] = (b, a)
    return LoraAdapter(layers, rank, sorted(shapes), source_id or f"adapter{seed}")


def misaligned_adapters(
    n: int, shapes: dict[str, tuple[int, int]], rank: int, seed: int, noise: float = 0.3
) -> list[LoraAdapter]:
    """Adapters that read a common input subspace with task-specific weighting
    and write through unrelated output maps."""
    rng = np.random.default_rng(seed)
    shared = {k: rng.standard_normal((rank, i)) for k, (o, i) in sorted(shapes.items())}
    out = []
    for t in range(n):
        layers = {}
        for key in sorted(shapes):
            o, i = shapes[key]
            a = np.diag(rng.uniform(0.1, 3.0, rank)) @ shared[key] + noise * rng.standard_normal((rank, i))
            b = rng.standard_normal((o, rank)) / np.sqrt(rank)
            layers[key] = (b.astype(np.float32), a.astype(np.float32))
        out.append(LoraAdapter(layers, rank, sorted(shapes), f"task{t}"))
    return out


def random_base(shapes: dict[str, tuple[int, int]], seed: int, extra: dict[str, tuple[int, ...]] | None = None) -> TensorMap:
    rng = np.random.default_rng(seed)
    entries = {k: rng.standard_normal(shapes[k]).astype(np.float32) for k in sorted(shapes)}
    for k, shape in sorted((extra or {}).items()):
        entries[k] = rng.standard_normal(shape).astype(np.float32)
    return TensorMap(entries, {"name": "base"})


def symmetric_alpha_scenario(delta: float = 0.05) -> tuple[TensorMap, list[TaskUpdate], list[EvalTask], ForwardSpec]:
    """Two tasks for which Task Arithmetic is exactly optimal at alpha = 0.5.

    Inputs are ``(s, 1)`` and one layer computes ``h = w . x``; the head sends
    ``h >= 0`` to class 0. The base is ``(1, 0)`` and the updates
    ``(+delta, 1)`` and ``(-delta, 1)`` are mirror images, so the merge gives
    ``h = s + 2 alpha`` and the true boundary ``s = -1`` is met at alpha = 0.5.
    Samples sit 0.1 on either side of the boundary, so every other alpha on a
    0.1-spaced grid misclassifies at least one of them.
    """
    base = TensorMap({"w": np.array([[1.0, 0.0]], dtype=np.float32)})
    updates = [
        TaskUpdate({"w": np.array([[delta, 1.0]])}, "task_a"),
        TaskUpdate({"w": np.array([[-delta, 1.0]])}, "task_b"),
    ]
    head = np.array([[1.0], [-1.0]])

    def task(name: str, s: Sequence[float]) -> EvalTask:
        s = np.asarray(s, dtype=np.float64)
        feats = np.stack([s, np.ones_like(s)], axis=1)
        labels = np.where(s > -1.0, 0, 1)
        return EvalTask(name, feats, labels, ["above", "below"], head, "validation")

    tasks = [task("task_a", [-1.1, -0.9]), task("task_b", [-1.3, -1.1, -0.9, -0.7])]
    return base, updates, tasks, ForwardSpec(("w",))


def joint_fixture(seed: int = 0, d: int = 16, m: int = 60) -> list[EvalTask]:
    """Three tasks with 3, 4 and 3 labels where two labels ("cat", "dog") are
    shared; shared labels use identical head rows, as a common text encoder would."""
    rng = np.random.default_rng(seed)
    emb = {name: rng.standard_normal(d) for name in ["cat", "dog", "car", "tree", "ship", "plane", "frog", "horse"]}
    label_sets = [["cat", "dog", "car"], ["tree", "Cat", "ship", "plane"], ["frog", " dog ", "horse"]]
    tasks = []
    for t, names in enumerate(label_sets):
        head = np.stack([emb[n.strip().lower()] for n in names])
        labels = rng.integers(0, len(names), m)
        feats = head[labels] + 1.2 * rng.standard_normal((m, d))
        tasks.append(EvalTask(f"task{t}", feats, labels, names, head, "test"))
    return tasks
