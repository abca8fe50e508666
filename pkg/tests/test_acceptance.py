"""Acceptance suite: ten end-to-end criteria, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (lines are printed even
under output capture) or ``python3 tests/test_acceptance.py``.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cli_fixtures import FORWARD, build_workspace, write_config
from oracles import cka_hsic_oracle, ties_oracle
from knots.analysis import cka_linear, gaussian_probes, pairwise_update_cka, task_vector_cosine, toy_merge_flips
from knots.checkpoint_io import TaskUpdate, TensorMap, load_tensor_map, materialize_update, save_tensor_map
from knots.cli import main as cli_main
from knots.eval_harness import (
    DEFAULT_ALPHAS,
    DEFAULT_DARE_PS,
    DEFAULT_SEEDS,
    DEFAULT_TOPKS,
    ForwardSpec,
    accuracy_from_logits,
    build_joint_space,
    compute_logits,
    evaluate,
    hits_at_k_rate,
    sweep,
)
from knots.knots_align import knots_decompose, knots_merge, row_vs_column_compare
from knots.synthetic import joint_fixture, misaligned_adapters, symmetric_alpha_scenario
from knots.update_algebra import MergeConfig, dare_transform, merge_ta, ties_merge


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


def _rel(a, b):
    denom = np.linalg.norm(b)
    return np.linalg.norm(a - b) / denom if denom else np.linalg.norm(a - b)


def _updates(rng, n, shape, rank, keys=("w",), prefix="m"):
    o, i = shape
    return [
        TaskUpdate({k: rng.standard_normal((o, rank)) @ rng.standard_normal((rank, i)) for k in keys}, f"{prefix}{j}")
        for j in range(n)
    ]


# 1 -------------------------------------------------------------------------


def test_01_ta_reduction(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    settings = [(2, (64, 64), 16), (3, (48, 64), 4), (8, (64, 32), 4), (3, (64, 64), 16), (8, (64, 64), 16)]
    worst = 0.0
    for n, shape, r in settings:
        ups = _updates(rng, n, shape, r, keys=("q", "v"))
        alpha = float(rng.choice(DEFAULT_ALPHAS))
        ref = merge_ta(ups, alpha)
        got = knots_merge(ups, "TA", MergeConfig("KNOTS_TA", alpha=alpha))
        worst = max(worst, *(_rel(got.layers[k], ref.layers[k]) for k in ref.layers))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5
    report(1, ok, f"TA reduction: worst rel. Frobenius {worst:.2e} (tol 1e-5), {elapsed:.2f}s (< 5s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_02_svd_reconstruction_and_rank_bound(report):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst, literal_violations, corrected_violations = 0.0, [], 0
    for _ in range(100):
        o, i = (int(v) for v in rng.integers(2, 65, 2))
        n = int(rng.integers(1, 9))
        r = int(rng.choice([c for c in (1, 2, 4, 8, 16) if c <= min(o, i)]))
        mats = [rng.standard_normal((o, r)) @ rng.standard_normal((r, i)) for _ in range(n)]
        dec = knots_decompose(mats, rank_tol=0.0)
        worst = max(worst, *(_rel(dec.reconstruct(t), m) for t, m in enumerate(mats)))
        if not 1 <= dec.k <= min(i, o, n * r):
            literal_violations.append((o, i, n, r, dec.k))
        corrected_violations += not 1 <= dec.k <= min(o, n * i, n * r)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and not literal_violations and elapsed < 10
    detail = (
        f"reconstruction worst {worst:.2e} (tol 1e-5); k <= min(I,O,n*r) violated on "
        f"{len(literal_violations)}/100 fixtures"
    )
    if literal_violations:
        o, i, n, r, k = literal_violations[0]
        detail += f" (e.g. O={o} I={i} n={n} r={r} -> k={k}; the joint rank of n tall updates can exceed I)"
    detail += f"; k <= min(O, n*I, n*r) violated on {corrected_violations}/100; {elapsed:.2f}s (< 10s)"
    report(2, ok, detail)
    assert worst <= 1e-5 and corrected_violations == 0 and elapsed < 10
    assert not literal_violations, detail


# 3 -------------------------------------------------------------------------


def _tie_cases():
    u = lambda m, s: TaskUpdate({"w": np.asarray(m, dtype=float)}, s)  # noqa: E731
    return [
        # equal positive and negative mass: +1 wins
        ([u([[1, 0], [0, 0]], "a"), u([[-1, 0], [0, 0]], "b")], 100),
        ([u([[2, -1], [3, 3]], "a"), u([[-1, 1], [-3, -3]], "b"), u([[-1, 0], [0, 0]], "c")], 100),
        # magnitude ties at the trim boundary: lower flat index kept
        ([u([[1, 1], [1, 1]], "a"), u([[-1, 1], [-1, 1]], "b")], 50),
        ([u([[0, 0], [0, 0]], "a"), u([[0, 0], [0, 0]], "b")], 30),
        ([u([[5, -5, 5, -5]], "a"), u([[-5, 5, 0, 5]], "b")], 75),
    ]


def test_03_ties_oracle(report):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = 0.0
    cases = []
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        vals = rng.standard_normal((n, 4, 4))
        if rng.random() < 0.3:  # coarse values produce plenty of exact ties
            vals = rng.integers(-2, 3, (n, 4, 4)).astype(float)
        cases.append(([TaskUpdate({"w": v}, f"m{j}") for j, v in enumerate(vals)], float(rng.choice(DEFAULT_TOPKS))))
    cases += _tie_cases()
    for ups, topk in cases:
        alpha = 0.7
        got = ties_merge(ups, alpha, topk).layers["w"]
        ref = ties_oracle([u.layers["w"] for u in ups], alpha, topk)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-7 and elapsed < 5
    report(3, ok, f"TIES vs loop oracle on {len(cases)} instances: max abs diff {worst:.1e} (tol 1e-7), {elapsed:.2f}s (< 5s)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_04_dare_unbiased(report):
    w = np.linspace(-2, 2, 16).reshape(4, 4)
    w[w == 0] = 0.5
    u = TaskUpdate({"w": w}, "m")
    start = time.perf_counter()
    n = 10_000
    worst_z = 0.0
    for p in (0.1, 0.5, 0.9):
        mean = np.mean([dare_transform(u, p, s).layers["w"] for s in range(n)], axis=0)
        se = np.abs(w) * np.sqrt(p / ((1 - p) * n))
        worst_z = max(worst_z, float(np.max(np.abs(mean - w) / se)))
    exact = all(np.array_equal(dare_transform(u, 0.0, s).layers["w"], w) for s in range(100))
    elapsed = time.perf_counter() - start
    ok = worst_z <= 3 and exact and elapsed < 30
    report(4, ok, f"DARE mean over {n} seeds: worst |z| {worst_z:.2f} (<= 3 SE); p=0 identity {exact}; {elapsed:.2f}s (< 30s)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_05_toy_counterexample(report):
    f1 = TaskUpdate({"layer1": np.array([[1.0]]), "layer2": np.array([[1.0]])}, "f1")
    f2 = TaskUpdate({"layer1": np.array([[-1.0]]), "layer2": np.array([[1.0]])}, "f2")
    cos = task_vector_cosine(f1, f2)
    probes = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    flipped_alphas = []
    for alpha in DEFAULT_ALPHAS:
        flips = toy_merge_flips(alpha, probes)
        if any(np.any(f[probes < 0]) for f in flips.values()) and any(np.any(f[probes > 0]) for f in flips.values()):
            flipped_alphas.append(alpha)
    ok = cos == 0.0 and len(flipped_alphas) == len(DEFAULT_ALPHAS)
    report(5, ok, f"toy cosine {cos!r} (exactly 0); flips on both input signs for {len(flipped_alphas)}/10 alphas")
    assert ok


# 6 -------------------------------------------------------------------------


def test_06_cka(report):
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(5, 40))
        x, y = rng.standard_normal((m, int(rng.integers(1, 12)))), rng.standard_normal((m, int(rng.integers(1, 12))))
        worst = max(worst, abs(cka_linear(x, y) - cka_hsic_oracle(x, y)))
    x = rng.standard_normal((32, 8))
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    inv = max(abs(cka_linear(x, x) - 1), abs(cka_linear(x, x @ q) - 1), abs(cka_linear(x, 4.2 * x) - 1))
    shapes = {"blk0.q": (24, 20), "blk0.v": (24, 20), "blk1.q": (24, 20)}
    ups = [materialize_update(a) for a in misaligned_adapters(4, shapes, 4, seed=0)]
    probes = gaussian_probes({k: 20 for k in shapes}, 256, 0)
    raw = pairwise_update_cka(ups, probes, "raw_update").mean_off_diagonal()
    aligned = pairwise_update_cka(ups, probes, "knots_aligned").mean_off_diagonal()
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and inv <= 1e-6 and aligned > raw and elapsed < 20
    report(6, ok, f"CKA vs HSIC max diff {worst:.1e}; invariance err {inv:.1e}; "
                  f"mean off-diag raw {raw:.3f} < aligned {aligned:.3f}; {elapsed:.2f}s (< 20s)")  # fmt: skip
    assert ok


# 7 -------------------------------------------------------------------------


def test_07_metric_identities(report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    equal = monotone = True
    for _ in range(100):
        m, c = int(rng.integers(1, 50)), int(rng.integers(1, 12))
        logits = rng.integers(-3, 4, (m, c)).astype(float) if rng.random() < 0.5 else rng.standard_normal((m, c))
        labels = rng.integers(0, c, m)
        equal &= hits_at_k_rate(logits, labels, 1) == accuracy_from_logits(logits, labels)
        rates = [hits_at_k_rate(logits, labels, k) for k in range(1, c + 1)]
        monotone &= all(a <= b for a, b in zip(rates, rates[1:]))
    tasks = joint_fixture()
    model = TensorMap({"id": np.eye(16, dtype=np.float32)})
    spec = ForwardSpec(("id",))
    _, joint = build_joint_space(tasks)
    joint_hits = hits_at_k_rate(compute_logits(model, joint, spec), joint.labels, 1)
    per_task = [evaluate(model, t, spec) for t in tasks]
    elapsed = time.perf_counter() - start
    ok = equal and monotone and all(joint_hits <= a for a in per_task) and elapsed < 5
    report(7, ok, f"Hits@1 == accuracy {equal}; monotone {monotone}; joint Hits@1 {joint_hits:.3f} <= "
                  f"per-task {', '.join(f'{a:.3f}' for a in per_task)}; {elapsed:.2f}s (< 5s)")  # fmt: skip
    assert ok


# 8 -------------------------------------------------------------------------


def test_08_sweep_fidelity(report):
    start = time.perf_counter()
    verbatim = (
        list(DEFAULT_ALPHAS) == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        and list(DEFAULT_TOPKS) == [10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
        and list(DEFAULT_DARE_PS) == [0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
        and list(DEFAULT_SEEDS) == [420, 421, 422, 423, 424]
    )
    base, ups, tasks, spec = symmetric_alpha_scenario()
    res = sweep(ups, base, tasks, "TA", spec=spec, exhaustive=True)
    elapsed = time.perf_counter() - start
    ok = verbatim and res.best.alpha == 0.5 and res.exhaustive_best == res.best and elapsed < 60
    report(8, ok, f"default grids verbatim {verbatim}; linear search alpha={res.best.alpha} score {res.best_score}, "
                  f"exhaustive alpha={res.exhaustive_best.alpha} score {res.exhaustive_score}; {elapsed:.2f}s (< 60s)")  # fmt: skip
    assert ok


# 9 -------------------------------------------------------------------------


def _snapshot(root: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file() and p.suffix in (".kt", ".json", ".csv")}


def _cli_runs(root: Path, paths: dict) -> list[tuple[str, list[str]]]:
    doc_merge = {"adapters": paths["adapters"], "base": "base.kt", "output": "m.kt",
                 "merge": {"method": "KNOTS_DARE_TIES", "alpha": 0.8, "dare_p": 0.5, "seeds": [421]}}  # fmt: skip
    doc_cka = {"adapters": paths["adapters"], "probe": {"kind": "gaussian", "seed": 3, "m": 64},
               "cka": {"modes": ["raw_update", "knots_aligned"]}, "report": "cka.json"}  # fmt: skip
    doc_sweep = {"adapters": paths["adapters"], "base": "base.kt", "merge": {"method": "KNOTS_TIES"},
                 "eval": {"tasks": paths["tasks"], "forward": FORWARD}, "report": "sweep.json", "output": "best.kt",
                 "sweep": {"alpha": [0.5, 1.0], "topk_percent": [30, 100]}}  # fmt: skip
    doc_eval = {"output": "m.kt", "report": "eval.json",
                "eval": {"mode": "joint", "tasks": paths["tasks"], "forward": FORWARD}}  # fmt: skip
    return [
        ("merge", ["merge", "--config", str(write_config(root, "merge.json", doc_merge)), "--quiet"]),
        ("cka", ["cka", "--config", str(write_config(root, "ckacfg.json", doc_cka)), "--csv", "--quiet"]),
        ("sweep", ["sweep", "--config", str(write_config(root, "sweepcfg.json", doc_sweep)), "--exhaustive", "--csv", "--quiet"]),
        ("eval", ["eval", "--config", str(write_config(root, "evalcfg.json", doc_eval)), "--csv", "--quiet"]),
        ("inspect", ["inspect", str(root / "m.kt")]),
    ]


def test_09_determinism_and_roundtrip(report, tmp_path, capsys):
    root = tmp_path / "ws"
    paths = build_workspace(root)
    outcomes = {}
    for name, argv in _cli_runs(root, paths):
        runs = []
        for _ in range(2):
            capsys.readouterr()
            code = cli_main(argv)
            out = capsys.readouterr().out
            runs.append((code, out, _snapshot(root)))
        outcomes[name] = runs[0][0] == 0 and runs[0] == runs[1]
    rng = np.random.default_rng(9)
    exact = 0
    for t in range(20):
        entries = {}
        for j in range(int(rng.integers(0, 5))):
            shape = tuple(int(v) for v in rng.integers(0, 7, int(rng.integers(1, 3))))
            vals = rng.standard_normal(shape).astype(np.float32)
            if vals.size:
                vals.flat[0] = rng.choice([-0.0, np.float32(1e-40), np.finfo(np.float32).max])
            entries[f"layer{j}.weight"] = vals
        tm = TensorMap(entries, {"index": str(t)} if t % 2 else {})
        save_tensor_map(tm, tmp_path / f"r{t}.kt")
        back = load_tensor_map(tmp_path / f"r{t}.kt")
        exact += (
            back.keys() == tm.keys()
            and back.metadata == tm.metadata
            and all(back[k].shape == tm[k].shape and back[k].tobytes() == tm[k].tobytes() for k in tm.keys())
        )
    ok = all(outcomes.values()) and exact == 20
    report(9, ok, "byte-identical reruns: " + ", ".join(f"{k} {v}" for k, v in outcomes.items()) + f"; bit-exact round trips {exact}/20")
    assert ok


# 10 ------------------------------------------------------------------------


def test_10_row_vs_column(report):
    rng = np.random.default_rng(10)
    single = _updates(rng, 1, (16, 12), 4, keys=("q", "v"))
    n1_gaps = []
    for cfg in (MergeConfig("KNOTS_TIES", alpha=1.0, topk_percent=100), MergeConfig("KNOTS_TA", alpha=0.6)):
        res = row_vs_column_compare(single, cfg)
        n1_gaps += [g / np.linalg.norm(single[0].layers[k]) for k, g in res["frobenius_gap"].items()]
    n2_gaps = []
    for t in range(5):
        pair = _updates(rng, 2, (16, 12), 4, keys=("q", "v"), prefix=f"f{t}_")
        n2_gaps += list(row_vs_column_compare(pair, MergeConfig("KNOTS_TIES", alpha=1.0, topk_percent=30))["frobenius_gap"].values())
    ok = max(n1_gaps) <= 1e-12 and min(n2_gaps) > 0
    report(10, ok, f"n=1 max relative gap {max(n1_gaps):.1e} (no-op inner rule); n=2 TIES top-30 min gap {min(n2_gaps):.3f} > 0")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
