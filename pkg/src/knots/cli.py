"""Command-line interface: ``knots {merge,cka,sweep,eval,inspect}``.

Every command reads one JSON config (``--config``), optionally patched with
``--set dotted.key=value``. Outputs are written atomically and are a pure
function of the config and input files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from knots.analysis import CKA_MODES, gaussian_probes, pairwise_update_cka
from knots.checkpoint_io import (
    TensorMap,
    apply_update,
    atomic_write_bytes,
    check_compatible,
    file_digest,
    load_adapter,
    load_tensor_map,
    materialize_update,
    tensor_map_bytes,
)
from knots.errors import ConfigError, KnotsError, MissingProbe
from knots.eval_harness import (
    ForwardSpec,
    SweepGrids,
    build_joint_space,
    compute_logits,
    evaluate,
    finetuned_accuracies,
    hits_at_k_rate,
    load_task,
    normalized_accuracy,
    split_validation,
    sweep,
)
from knots.knots_align import merge
from knots.update_algebra import MergeConfig

log = logging.getLogger("knots")

CONFIG_KEYS = {
    "adapters", "base", "output", "merge", "eval", "probe", "report",
    "key_convention", "cka", "sweep", "finetuned", "threads",
}  # fmt: skip


# --------------------------------------------------------------------------
# config handling


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _get(doc: dict, dotted: str, default: Any = None) -> Any:
    node: Any = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _set(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"--set {dotted}: {part!r} is not an object")
        node = child
    node[parts[-1]] = value


@dataclass
class RunConfig:
    doc: dict
    root: Path
    threads: int = 1
    exhaustive: bool = False
    quiet: bool = False
    csv: bool = False

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def require(self, dotted: str) -> Any:
        value = _get(self.doc, dotted)
        if value is None:
            raise ConfigError(f"config is missing {dotted!r}")
        return value

    def merge_config(self) -> MergeConfig:
        return MergeConfig.from_dict(dict(self.doc.get("merge") or {}))

    def forward_spec(self) -> ForwardSpec:
        return ForwardSpec.from_dict(self.require("eval.forward"))

    def check_paths(self, *dotted: str) -> None:
        for key in dotted:
            value = _get(self.doc, key)
            values = value if isinstance(value, list) else [value]
            for v in values:
                if v is not None and not self.path(v).exists():
                    raise FileNotFoundError(f"{key}: {v} does not exist")


def _seed_target(command: str) -> str:
    return {"merge": "merge.seeds", "cka": "probe.seed", "sweep": "eval.split_seed", "eval": "eval.split_seed"}[command]


def build_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg_path = Path(args.config)
        try:
            doc = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: invalid JSON ({exc})") from None
        root = cfg_path.parent
    else:
        doc, root = {}, Path.cwd()
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    file_doc = copy.deepcopy(doc)

    set_keys = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_keys[key.strip()] = _parse_value(value)
        _set(doc, key.strip(), set_keys[key.strip()])

    # flags never silently shadow config values
    flag_values = {}
    if args.seed is not None:
        target = _seed_target(args.command)
        flag_values[target] = [args.seed] if target == "merge.seeds" else args.seed
    if args.threads is not None:
        flag_values["threads"] = args.threads
    for key, value in flag_values.items():
        for origin, source in (("config file", file_doc), ("--set", set_keys)):
            existing = _get(source, key) if origin == "config file" else source.get(key)
            if existing is not None and existing != value:
                raise ConfigError(f"flag value {value!r} for {key!r} conflicts with {origin} value {existing!r}")
        _set(doc, key, value)

    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    threads = doc.get("threads")
    if threads is None:
        threads = int(os.environ.get("KNOTS_THREADS", "1") or 1)
    if int(threads) < 1:
        raise ConfigError("threads must be at least 1")
    return RunConfig(doc, root, int(threads), bool(args.exhaustive), bool(args.quiet), bool(args.csv))


# --------------------------------------------------------------------------
# shared helpers


def _json_bytes(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n").encode("utf-8")


def _write_all(files: list[tuple[Path, bytes]]) -> None:
    """All content is computed before the first write, so failures leave nothing partial."""
    for path, data in files:
        atomic_write_bytes(path, data)


def _load_updates(cfg: RunConfig):
    paths = cfg.require("adapters")
    if not isinstance(paths, list) or not paths:
        raise ConfigError("adapters must be a nonempty list of paths")
    cfg.check_paths("adapters")
    convention = cfg.doc.get("key_convention", "lora")
    adapters = [load_adapter(cfg.path(p), convention) for p in paths]
    check_compatible(adapters)
    inputs = [
        {"path": p, "digest": file_digest(cfg.path(p)), "source_id": a.source_id, "rank": a.rank}
        for p, a in zip(paths, adapters)
    ]
    return adapters, [materialize_update(a) for a in adapters], inputs


def _load_base(cfg: RunConfig) -> tuple[TensorMap, dict]:
    cfg.check_paths("base")
    p = cfg.require("base")
    return load_tensor_map(cfg.path(p)), {"path": p, "digest": file_digest(cfg.path(p))}


def _report_path(cfg: RunConfig, fallback: Path | None) -> Path:
    report = cfg.path(cfg.doc.get("report"))
    if report is None:
        if fallback is None:
            raise ConfigError("config is missing 'report'")
        report = fallback.with_name(fallback.name + ".report.json")
    return report


def _csv_text(rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _print_table(rows: list[list[Any]], quiet: bool) -> None:
    if quiet:
        return
    text = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(text[0]))]
    for r in text:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.4f}"


# --------------------------------------------------------------------------
# commands


def cmd_merge(cfg: RunConfig) -> int:
    mcfg = cfg.merge_config()
    _, updates, inputs = _load_updates(cfg)
    base, base_info = _load_base(cfg)
    out_path = cfg.path(cfg.require("output"))

    merged = merge(updates, mcfg, threads=cfg.threads)
    result = apply_update(base, merged.layers)
    payload = tensor_map_bytes(result)

    report: dict[str, Any] = {
        "command": "merge",
        "method": mcfg.method,
        "merge": mcfg.to_dict(),
        "seed_used": mcfg.seeds[0] if mcfg.uses_dare else None,
        "inputs": inputs,
        "base": base_info,
        "output": {"path": cfg.doc["output"], "digest": "sha256:" + _sha256(payload)},
        "layers": sorted(merged.layers),
    }
    if mcfg.is_knots:
        report["layer_ranks"] = dict(sorted(merged.layer_ranks.items()))
        baseline_cfg = MergeConfig.from_dict({**mcfg.to_dict(), "method": mcfg.inner})
        baseline = merge(updates, baseline_cfg, threads=cfg.threads)
        report["baseline_comparison"] = {
            "baseline": baseline_cfg.method,
            "frobenius_gap": {k: float(np.linalg.norm(merged.layers[k] - baseline.layers[k])) for k in sorted(merged.layers)},
        }
    _write_all([(out_path, payload), (_report_path(cfg, out_path), _json_bytes(report))])
    if not cfg.quiet:
        print(f"wrote {cfg.doc['output']} ({mcfg.method}, {len(merged.layers)} layers)")
    return 0


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cmd_cka(cfg: RunConfig) -> int:
    modes = _get(cfg.doc, "cka.modes") or [_get(cfg.doc, "cka.mode", "raw_update")]
    if isinstance(modes, str):
        modes = [modes]
    bad = [m for m in modes if m not in CKA_MODES]
    if bad:
        raise ConfigError(f"unknown CKA modes {bad}")
    probe = cfg.doc.get("probe")
    if not probe:
        raise MissingProbe("config has no probe specification")
    rank_tol = float(_get(cfg.doc, "merge.rank_tol", 1e-8))

    inputs: dict[str, Any] = {}
    updates = None
    if any(m != "fft_delta" for m in modes):
        _, updates, inputs["adapters"] = _load_updates(cfg)
    fft_models, base = None, None
    if "fft_delta" in modes:
        cfg.check_paths("finetuned")
        paths = cfg.require("finetuned")
        fft_models = []
        for p in paths:
            tm = load_tensor_map(cfg.path(p))
            meta = {"source_id": Path(p).stem, **tm.metadata}
            fft_models.append(TensorMap(tm.entries, meta))
        base, inputs["base"] = _load_base(cfg)
        inputs["finetuned"] = [{"path": p, "digest": file_digest(cfg.path(p))} for p in paths]

    kind = probe.get("kind", "gaussian")
    if kind == "gaussian":
        if updates is not None:
            dims = {k: updates[0].layers[k].shape[1] for k in updates[0].keys()}
        else:
            dims = {k: base[k].shape[1] for k in base.keys() if base[k].ndim == 2}
        seed, m = int(probe.get("seed", 0)), int(probe.get("m", 512))
        probes = gaussian_probes(dims, m, seed)
        probe_info = {"kind": "gaussian", "seed": seed, "m": m}
    elif kind == "file":
        cfg.check_paths("probe.path")
        ptm = load_tensor_map(cfg.path(probe["path"]))
        probes = {k: np.asarray(v, dtype=np.float64) for k, v in ptm.entries.items()}
        probe_info = {"kind": "file", "path": probe["path"], "digest": file_digest(cfg.path(probe["path"]))}
    else:
        raise MissingProbe(f"unknown probe kind {kind!r}")

    report_path = _report_path(cfg, None)
    files = []
    summaries = []
    for mode in modes:
        models = fft_models if mode == "fft_delta" else updates
        rep = pairwise_update_cka(models, probes, mode, base=base, probe_info=probe_info, rank_tol=rank_tol)
        doc = rep.to_json()
        doc["inputs"] = inputs
        target = report_path if len(modes) == 1 else report_path.with_name(f"{report_path.stem}.{mode}.json")
        files.append((target, _json_bytes(doc)))
        if cfg.csv:
            files.append((target.with_suffix(".csv"), rep.summary_csv().encode()))
        summaries.append([mode, _fmt(rep.mean_off_diagonal()), target.name])
    _write_all(files)
    _print_table([["mode", "mean_off_diag_cka", "report"], *summaries], cfg.quiet)
    return 0


def _load_tasks(cfg: RunConfig):
    cfg.check_paths("eval.tasks")
    paths = cfg.require("eval.tasks")
    tasks = [load_task(cfg.path(p)) for p in paths]
    info = [{"path": p, "digest": file_digest(cfg.path(p)), "name": t.name, "split": t.split} for p, t in zip(paths, tasks)]
    return tasks, info


def cmd_sweep(cfg: RunConfig) -> int:
    mcfg = cfg.merge_config()
    _, updates, inputs = _load_updates(cfg)
    base, base_info = _load_base(cfg)
    tasks, task_info = _load_tasks(cfg)
    spec = cfg.forward_spec()
    mode = _get(cfg.doc, "eval.mode", "per_task")
    split_seed = int(_get(cfg.doc, "eval.split_seed", 0))
    val_tasks = [split_validation(t, split_seed)[0] for t in tasks]
    finetuned = _get(cfg.doc, "eval.finetuned_acc")
    if isinstance(finetuned, list):
        finetuned = {t.name: float(a) for t, a in zip(tasks, finetuned)}

    grids = SweepGrids.from_dict(cfg.doc.get("sweep"))
    result = sweep(
        updates,
        base,
        val_tasks,
        mcfg.method,
        grids,
        spec,
        mode=mode,
        finetuned_acc=finetuned,
        exhaustive=cfg.exhaustive,
        concat_axis=mcfg.concat_axis,
        rank_tol=mcfg.rank_tol,
        threads=cfg.threads,
    )
    doc = result.to_json()
    doc.update(
        command="sweep",
        inputs=inputs,
        base=base_info,
        tasks=task_info,
        eval={"mode": mode, "split_seed": split_seed, "forward": spec.to_dict()},
    )
    files = []
    if cfg.doc.get("output"):
        merged = merge(updates, result.best, threads=cfg.threads)
        payload = tensor_map_bytes(apply_update(base, merged.layers))
        doc["output"] = {"path": cfg.doc["output"], "digest": "sha256:" + _sha256(payload)}
        files.append((cfg.path(cfg.doc["output"]), payload))
    report_path = _report_path(cfg, cfg.path(cfg.doc.get("output")))
    files.append((report_path, _json_bytes(doc)))
    if cfg.csv:
        rows = [["phase", "alpha", "topk_percent", "dare_p", "seed", "score"]]
        for t in result.search_trace:
            c = t["config"]
            rows.append([t["phase"], c["alpha"], c["topk_percent"], c["dare_p"], (c["seeds"] or [""])[0], repr(t["score"])])
        files.append((report_path.with_suffix(".csv"), _csv_text(rows).encode()))
    _write_all(files)
    best = result.best
    table = [["method", "alpha", "topk_percent", "dare_p", "seed", "score"],
             [best.method, best.alpha, best.topk_percent, best.dare_p, best.seeds[0] if best.seeds else "-", _fmt(result.best_score)]]  # fmt: skip
    if result.exhaustive_best is not None:
        e = result.exhaustive_best
        table.append(["exhaustive", e.alpha, e.topk_percent, e.dare_p, e.seeds[0] if e.seeds else "-", _fmt(result.exhaustive_score)])
    _print_table(table, cfg.quiet)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model_key = "eval.model" if _get(cfg.doc, "eval.model") else "output"
    cfg.check_paths(model_key)
    model_path = cfg.require(model_key)
    weights = load_tensor_map(cfg.path(model_path))
    tasks, task_info = _load_tasks(cfg)
    spec = cfg.forward_spec()
    mode = _get(cfg.doc, "eval.mode", "per_task")
    split_seed = int(_get(cfg.doc, "eval.split_seed", 0))
    test_tasks = [split_validation(t, split_seed)[1] for t in tasks]

    doc: dict[str, Any] = {
        "command": "eval",
        "mode": mode,
        "model": {"path": model_path, "digest": file_digest(cfg.path(model_path))},
        "tasks": task_info,
        "split_seed": split_seed,
        "forward": spec.to_dict(),
    }
    per_task = {t.name: evaluate(weights, t, spec) for t in test_tasks}

    if mode == "per_task":
        finetuned = _get(cfg.doc, "eval.finetuned_acc")
        if isinstance(finetuned, list):
            finetuned = {t.name: float(a) for t, a in zip(tasks, finetuned)}
        elif finetuned is None and cfg.doc.get("adapters") and cfg.doc.get("base"):
            _, updates, doc["adapters"] = _load_updates(cfg)
            base, doc["base"] = _load_base(cfg)
            finetuned = finetuned_accuracies(updates, base, test_tasks, spec)
        rows = [["task", "accuracy", "normalized"]]
        table = []
        for t in test_tasks:
            acc = per_task[t.name]
            norm = normalized_accuracy(acc, finetuned[t.name]) if finetuned else None
            table.append({"task": t.name, "accuracy": acc, "normalized": norm,
                          "finetuned": finetuned[t.name] if finetuned else None})  # fmt: skip
            rows.append([t.name, _fmt(acc), _fmt(norm)])
        norms = [r["normalized"] for r in table if r["normalized"] is not None]
        doc["rows"] = table
        doc["mean_accuracy"] = float(np.mean([r["accuracy"] for r in table]))
        doc["mean_normalized"] = float(np.mean(norms)) if norms else None
    elif mode == "joint":
        k_list = [int(k) for k in _get(cfg.doc, "eval.k_list", [1, 3, 5])]
        space, joint = build_joint_space(test_tasks)
        logits = compute_logits(weights, joint, spec)
        table = [{"k": k, "hits": hits_at_k_rate(logits, joint.labels, k)} for k in k_list]
        rows = [["k", "hits"]] + [[r["k"], _fmt(r["hits"])] for r in table]
        doc["rows"] = table
        doc["union_size"] = len(space.union_labels)
        doc["union_labels"] = space.union_labels
        slices = {}
        for name, (a, b) in sorted(space.task_slices.items()):
            slices[name] = {"joint_hits@1": hits_at_k_rate(logits[a:b], joint.labels[a:b], 1), "task_accuracy": per_task[name]}
        doc["per_task"] = slices
    else:
        raise ConfigError(f"eval.mode must be 'per_task' or 'joint', got {mode!r}")

    report_path = _report_path(cfg, None)
    files = [(report_path, _json_bytes(doc))]
    if cfg.csv:
        files.append((report_path.with_suffix(".csv"), _csv_text(rows).encode()))
    _write_all(files)
    _print_table(rows, cfg.quiet)
    return 0


def cmd_inspect(path: str, as_csv: bool = False) -> int:
    tm = load_tensor_map(path)
    rows = [["key", "shape", "dtype"]]
    rows += [[k, "x".join(str(d) for d in tm[k].shape), "F32"] for k in tm.keys()]
    if as_csv:
        sys.stdout.write(_csv_text(rows))
    else:
        _print_table(rows, False)
    if tm.metadata:
        print()
        for k, v in sorted(tm.metadata.items()):
            print(f"{k}: {v}")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key (repeatable)")
    common.add_argument("--threads", type=int, help="worker threads (default: $KNOTS_THREADS or 1)")
    common.add_argument("--seed", type=int, help="seed for the command's random component")
    common.add_argument("--quiet", action="store_true", help="suppress table output")
    common.add_argument("--csv", action="store_true", help="also write tables as CSV")

    parser = argparse.ArgumentParser(prog="knots", description="Merge LoRA-finetuned models with joint-SVD alignment.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("merge", parents=[common], help="merge adapters into a base checkpoint")
    sub.add_parser("cka", parents=[common], help="pairwise CKA between task updates")
    sw = sub.add_parser("sweep", parents=[common], help="tune merge hyperparameters on validation data")
    sw.add_argument("--exhaustive", action="store_true", help="also evaluate the full grid")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on tasks")
    ins = sub.add_parser("inspect", parents=[common], help="list tensors in a container")
    ins.add_argument("path")
    return parser


COMMANDS = {"merge": cmd_merge, "cka": cmd_cka, "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.exhaustive = getattr(args, "exhaustive", False)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path, args.csv)
        if not args.config and not args.set:
            raise ConfigError(f"{args.command} needs --config")
        return COMMANDS[args.command](build_config(args))
    except (KnotsError, FileNotFoundError, KeyError, ValueError) as exc:
        name = type(exc).__name__
        detail = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        sys.stderr.write(json.dumps({"error": name, "detail": detail}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
