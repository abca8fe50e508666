"""Builds a small on-disk workspace (base, adapters, tasks, configs) for CLI runs."""

import json
from pathlib import Path

import numpy as np

from knots.checkpoint_io import apply_update, materialize_update, save_adapter, save_tensor_map
from knots.eval_harness import EvalTask, ForwardSpec, compute_logits, save_task
from knots.synthetic import misaligned_adapters, random_base

SHAPES = {"l1": (8, 6), "l2": (4, 8)}
FORWARD = {"layers": ["l1", "l2"], "activation": "relu"}


def build_workspace(root: Path, n_tasks: int = 2, seed: int = 0) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = random_base(SHAPES, seed, extra={"bias": (4,)})
    save_tensor_map(base, root / "base.kt")
    adapters = misaligned_adapters(n_tasks, SHAPES, 2, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    spec = ForwardSpec.from_dict(FORWARD)
    names = [["cat", "dog", "car"], ["Dog", "tree", "ship"], ["frog", "cat ", "plane"]]
    paths = {"adapters": [], "tasks": []}
    for i, ad in enumerate(adapters):
        save_adapter(ad, root / f"a{i}.kt")
        paths["adapters"].append(f"a{i}.kt")
        finetuned = apply_update(base, materialize_update(ad))
        save_tensor_map(finetuned, root / f"ft{i}.kt")
        feats = rng.standard_normal((40, 6))
        head = rng.standard_normal((3, 4))
        probe = EvalTask(f"task{i}", feats, np.zeros(40, dtype=int), names[i % 3], head)
        labels = np.argmax(compute_logits(finetuned, probe, spec), axis=1)
        save_task(EvalTask(f"task{i}", feats, labels, names[i % 3], head), root / f"t{i}.kt")
        paths["tasks"].append(f"t{i}.kt")
    return paths


def write_config(root: Path, name: str, doc: dict) -> Path:
    path = Path(root) / name
    path.write_text(json.dumps(doc))
    return path
