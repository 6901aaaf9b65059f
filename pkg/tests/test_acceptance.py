"""End-to-end gate for the package.

Each test exercises one externally stated requirement, prints a single
PASS or FAIL line with the measured margin, and enforces a wall-clock
budget.  They are ordered cheap to expensive; the two ladder-style tests
at the bottom dominate the runtime.
"""
from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from surgfed import (
    CLIENT_LADDER,
    ClassRegistry,
    ConfigError,
    ExperimentConfig,
    ScenarioSpec,
    auroc,
    build_architecture,
    forward,
    masked_bce_loss,
    params_equal,
    run_experiment,
    surgical_head_update,
)
from surgfed.cli import cmd_ablation, main, parse_config
from surgfed.nn import backward
from conftest import random_params

REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reference_run.json"


def _report(name: str, ok: bool, detail: str, elapsed: float) -> None:
    verdict = "PASS" if ok else "FAIL"
    print(f"[acceptance] {name}: {verdict} ({detail}) [{elapsed:.1f}s]", flush=True)


def _load_reference() -> ExperimentConfig:
    with open(REFERENCE_CONFIG) as f:
        return parse_config(json.load(f))


# 1. With every client holding every class, the selective scheme must be
#    indistinguishable from classical federated averaging, bit for bit.

def test_acceptance_fedavg_reduction() -> None:
    t0 = time.perf_counter()
    scenario = ScenarioSpec(
        n_per_client=120, d=8, M=6, K=4, seed=501,
        assignment=[list(range(6))] * 4,
    )
    captured: dict[str, list] = {"surgical": [], "vanilla_fl": []}

    def make_hook(tag):
        def hook(r, global_params, clients):
            captured[tag].append(global_params.copy())
        return hook

    for method in ("surgical", "vanilla_fl"):
        cfg = ExperimentConfig(scenario=scenario, method=method, T=20, E=1, lr=0.05)
        run_experiment(cfg, round_hook=make_hook(method))

    pairs = list(zip(captured["surgical"], captured["vanilla_fl"]))
    matches = sum(params_equal(a, b) for a, b in pairs)
    elapsed = time.perf_counter() - t0
    ok = len(pairs) == 20 and matches == 20
    _report("fedavg_reduction", ok, f"{matches}/20 rounds bit-identical", elapsed)
    assert ok
    assert elapsed < 30.0


# 2. The per-class head merge must equal the plain contributor mean for
#    every class, pass single-owner columns through untouched, and ignore
#    clients that do not hold the class.

def test_acceptance_head_merge_algebra() -> None:
    t0 = time.perf_counter()
    rng = np.random.default_rng(90210)
    n_cases = 1000
    singletons = 0
    probes = 0
    for _ in range(n_cases):
        K = int(rng.integers(1, 7))
        M = int(rng.integers(1, 11))
        n_feat = int(rng.integers(1, 9))
        members = [sorted(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False))
                   for _ in range(M)]
        classes_of = [[c for c in range(M) if k in members[c]] for k in range(K)]
        for k in range(K):
            if not classes_of[k]:
                c = int(rng.integers(M))
                members[c] = sorted(set(members[c]) | {k})
                classes_of[k].append(c)
        registry = ClassRegistry([f"c{i}" for i in range(M)], classes_of)
        heads = [
            (rng.normal(size=(n_feat, len(cls))), rng.normal(size=len(cls)), tuple(cls))
            for cls in (registry.client_classes[k] for k in range(K))
        ]
        global_W, global_b = surgical_head_update(heads, registry)

        for c in range(M):
            cols = []
            for k in members[c]:
                W, b, cls = heads[k]
                j = cls.index(c)
                cols.append(np.concatenate([W[:, j], [b[j]]]))
            acc = cols[0].copy()
            for v in cols[1:]:
                acc = acc + v
            expected = acc / len(cols)
            got = np.concatenate([global_W[:, c], [global_b[c]]])
            assert np.array_equal(got, expected)
            if len(members[c]) == 1:
                singletons += 1
                k = members[c][0]
                j = heads[k][2].index(c)
                assert np.array_equal(global_W[:, c], heads[k][0][:, j])
                assert global_b[c] == heads[k][1][j]

        # noise injected into clients outside a class's owner set must not
        # move that class's merged column at all
        partial = [c for c in range(M) if len(members[c]) < K]
        if partial:
            c = partial[int(rng.integers(len(partial)))]
            outsider = [k for k in range(K) if k not in members[c]][0]
            W, b, cls = heads[outsider]
            noisy = list(heads)
            noisy[outsider] = (W + rng.normal(size=W.shape), b + rng.normal(size=b.shape), cls)
            W2, b2 = surgical_head_update(noisy, registry)
            assert np.array_equal(W2[:, c], global_W[:, c])
            assert b2[c] == global_b[c]
            probes += 1
    elapsed = time.perf_counter() - t0
    ok = singletons > 0 and probes > 0
    _report(
        "head_merge_algebra", ok,
        f"{n_cases} registries exact, {singletons} passthrough columns, {probes} interference probes",
        elapsed,
    )
    assert ok
    assert elapsed < 10.0


# 3. Analytic gradients of the masked loss must agree with central finite
#    differences across every parameter of the full two-hidden-layer stack.

def test_acceptance_gradient_check() -> None:
    t0 = time.perf_counter()
    arch = build_architecture(6)
    params = random_params(arch, 4, seed=902)
    rng = np.random.default_rng(903)
    x = rng.normal(size=(12, 6))
    y = (rng.random((12, 4)) < 0.5).astype(float)
    cols = [0, 1, 2, 3]

    def loss_of(ps) -> float:
        _, p = forward(ps, arch, x, "train")
        return masked_bce_loss(p, y, cols)

    def bumped(name, idx, h):
        ps = params.copy()
        arr = ps.feature[name] if name in ps.feature else getattr(ps, name)
        arr[idx] += h
        return loss_of(ps)

    acts, p = forward(params.copy(), arch, x, "train")
    analytic = backward(params, arch, acts, p, y, cols)

    h = 1e-5
    worst = 0.0
    targets = [(name, arr, analytic.feature[name]) for name, arr in params.feature.items()]
    targets += [("head_W", params.head_W, analytic.head_W), ("head_b", params.head_b, analytic.head_b)]
    checked = 0
    for name, arr, grad in targets:
        for idx in np.ndindex(arr.shape):
            numeric = (bumped(name, idx, h) - bumped(name, idx, -h)) / (2 * h)
            # biases feeding a batchnorm layer have a true gradient of zero
            # (mean subtraction cancels constant shifts), so tiny-vs-tiny
            # comparisons fall back to an absolute scale instead of dividing
            # finite-difference roundoff by an arbitrarily small gradient
            rel = abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), 1e-6)
            worst = max(worst, rel)
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4
    _report("gradient_check", ok, f"max rel err {worst:.2e} over {checked} parameters", elapsed)
    assert ok
    assert elapsed < 10.0


# 4. The rank-statistic AUROC must match brute-force pair counting exactly,
#    including ties, and obey the complement and order-preservation laws.

def test_acceptance_auroc_oracle() -> None:
    t0 = time.perf_counter()
    rng = np.random.default_rng(7711)
    n_cases = 500
    for _ in range(n_cases):
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, 6, size=n) / 2.0
        labels = (rng.random(n) < 0.5).astype(float)
        labels[0], labels[1] = 1.0, 0.0
        a = auroc(scores, labels)

        pos = scores[labels == 1.0]
        neg = scores[labels == 0.0]
        wins = float((pos[:, None] > neg[None, :]).sum())
        ties = float((pos[:, None] == neg[None, :]).sum())
        expected = (wins + 0.5 * ties) / (len(pos) * len(neg))
        assert a == expected

        complement = auroc(scores, 1.0 - labels)
        assert abs(complement - (1.0 - a)) < 1e-12
        assert auroc(2.0 * scores + 1.0, labels) == a
    elapsed = time.perf_counter() - t0
    _report("auroc_oracle", True, f"{n_cases} tied instances exact, symmetries hold", elapsed)
    assert elapsed < 5.0


# 5. On the reference scenario the selective scheme must actually learn:
#    strong final test discrimination and validation loss that keeps
#    falling well past the early rounds.

def test_acceptance_convergence() -> None:
    t0 = time.perf_counter()
    result = run_experiment(_load_reference(), parallel=1)
    final = result.reports[-1].test_mean_auroc
    late_val = result.reports[99].mean_val_loss
    early_val = result.reports[4].mean_val_loss
    elapsed = time.perf_counter() - t0
    ok = final is not None and final >= 0.90 and late_val < early_val
    _report(
        "convergence", ok,
        f"final mean AUROC {final:.4f} >= 0.90, val loss {early_val:.4f} -> {late_val:.4f}",
        elapsed,
    )
    assert ok
    assert elapsed < 180.0


# 6. Where the methods differ is on classes only one client holds: the
#    selective scheme must clearly beat missing-as-negative training there
#    and stay within noise of loss masking, averaged over five seeds.

def test_acceptance_unique_class_pattern() -> None:
    t0 = time.perf_counter()
    base = _load_reference()
    methods = ("surgical", "vanilla_fl", "fl_partial_loss")
    unique_means: dict[str, list[float]] = {m: [] for m in methods}
    for seed in range(100, 105):
        scenario = replace(base.scenario, seed=seed)
        for method in methods:
            cfg = replace(base, scenario=scenario, method=method)
            result = run_experiment(cfg, parallel=1)
            value = result.global_eval().group_means["unique"]
            assert value is not None
            unique_means[method].append(value)
    gap_vanilla = float(np.mean(unique_means["surgical"]) - np.mean(unique_means["vanilla_fl"]))
    gap_masked = float(np.mean(unique_means["surgical"]) - np.mean(unique_means["fl_partial_loss"]))
    elapsed = time.perf_counter() - t0
    ok = gap_vanilla >= 0.05 and gap_masked >= -0.02
    _report(
        "unique_class_pattern", ok,
        f"unique-class gap vs vanilla {gap_vanilla:+.4f} (need >= +0.05), "
        f"vs loss masking {gap_masked:+.4f} (need >= -0.02)",
        elapsed,
    )
    assert ok
    assert elapsed < 900.0


# 7. Sweeping the number of clients, the selective scheme must match or
#    beat missing-as-negative training at every rung of the ladder.

def test_acceptance_client_ladder(tmp_path) -> None:
    t0 = time.perf_counter()
    code = cmd_ablation("clients", str(tmp_path), seeds=3, methods=("surgical", "vanilla_fl"))
    assert code == 0
    table: dict[tuple[int, str], float] = {}
    with open(tmp_path / "summary.csv") as f:
        header = f.readline().strip().split(",")
        for line in f:
            row = dict(zip(header, line.strip().split(",")))
            table[(int(row["rung"]), row["method"])] = float(row["mean_auroc"])
    margins = {k: table[(k, "surgical")] - table[(k, "vanilla_fl")] for k in CLIENT_LADDER}
    elapsed = time.perf_counter() - t0
    ok = all(m >= 0.0 for m in margins.values())
    worst_rung = min(margins, key=margins.get)
    _report(
        "client_ladder", ok,
        f"margin at every rung >= 0, tightest {margins[worst_rung]:+.4f} at K={worst_rung}",
        elapsed,
    )
    assert ok
    assert elapsed < 1800.0


# 8. The reference run must be byte-reproducible, with thread-parallel
#    client execution giving the identical transcript.

def test_acceptance_byte_determinism(tmp_path, monkeypatch) -> None:
    t0 = time.perf_counter()
    monkeypatch.delenv("SURGFED_OUT_DIR", raising=False)
    dirs = [tmp_path / tag for tag in ("first", "second", "threaded")]
    assert main(["run", str(REFERENCE_CONFIG), "--out", str(dirs[0])]) == 0
    assert main(["run", str(REFERENCE_CONFIG), "--out", str(dirs[1])]) == 0
    assert main(["run", str(REFERENCE_CONFIG), "--out", str(dirs[2]), "--parallel-clients", "4"]) == 0
    transcripts = [(d / "rounds.csv").read_bytes() for d in dirs]
    elapsed = time.perf_counter() - t0
    ok = transcripts[0] == transcripts[1] == transcripts[2]
    _report(
        "byte_determinism", ok,
        f"rerun and 4-thread transcripts identical ({len(transcripts[0])} bytes)",
        elapsed,
    )
    assert ok


# 9. A personalized client model scores only the classes it holds; asked
#    about the full class set it must answer "undefined", never a number.

def test_acceptance_personalized_undefined() -> None:
    t0 = time.perf_counter()
    scenario = ScenarioSpec(
        n_per_client=80, d=6, M=5, K=2, seed=31,
        assignment=[[0, 1, 2], [2, 3, 4]],
    )
    cfg = ExperimentConfig(
        scenario=scenario, method="pfl", strategy="fedbn",
        T=4, E=2, warmup_epochs=1,
    )
    result = run_experiment(cfg)
    fabricated = []
    for k in range(scenario.K):
        ev = result.client_eval(k)
        held = set(result.client_classes[k])
        if ev.mean_auroc is not None:
            fabricated.append(k)
        for c in range(scenario.M):
            if c not in held and ev.per_class[c] is not None:
                fabricated.append(k)
        local = result.client_eval(k, class_subset=result.client_classes[k])
        assert local.group_means["custom"] is not None
    try:
        result.global_eval()
        has_global = True
    except ConfigError:
        has_global = False
    elapsed = time.perf_counter() - t0
    ok = not fabricated and not has_global
    _report(
        "personalized_undefined", ok,
        "full-set means undefined for every client, no global model surfaced",
        elapsed,
    )
    assert ok
