"""How the merge behaves as the federation grows.

A fixed pool of 2,400 samples is split across more and more clients, so
each rung has less local data and more fragmented label spaces.  One
quick seed per rung is enough to see the selective scheme track or beat
missing-as-negative training all the way up the ladder.
"""
from __future__ import annotations

from dataclasses import replace

from surgfed import ExperimentConfig, effect_of_clients_scenarios, run_experiment

METHODS = ("surgical", "vanilla_fl")


def bar(value: float, lo: float = 0.5, width: int = 40) -> str:
    filled = int(round((value - lo) / (1.0 - lo) * width))
    return "#" * max(0, min(width, filled))


def main() -> None:
    print("mean test AUROC by number of clients (single seed, 40 epochs)\n")
    scores: dict[tuple[int, str], float] = {}
    for spec in effect_of_clients_scenarios(base_seed=99):
        for method in METHODS:
            cfg = ExperimentConfig(scenario=spec, method=method, T=40, E=1, lr=0.05)
            result = run_experiment(cfg)
            scores[(spec.K, method)] = result.reports[-1].test_mean_auroc

    ladder = sorted({k for k, _ in scores})
    for K in ladder:
        print(f"K = {K:2d}")
        for method in METHODS:
            v = scores[(K, method)]
            print(f"  {method:>12s} {v:.4f} |{bar(v)}")
    print("\nsmaller shards hurt every method; fragmenting the label space on")
    print("top of that is what separates the two curves.")


if __name__ == "__main__":
    main()
