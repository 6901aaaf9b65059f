"""Experiment driver: local epochs, communication rounds, checkpointing.

One experiment trains K clients for T local epochs with a server
exchange every E epochs (floor(T/E) rounds; leftover epochs still run
but are never communicated).  The selected model is the round
checkpoint with the lowest mean local validation BCE.

Methods
-------
surgical          narrow heads, per-class selective head aggregation
vanilla_fl        full-width heads, missing labels treated as negatives
fl_partial_loss   full-width heads, loss masked to each client's classes
pfl               feature aggregation only; personalised heads, no global model
centralized       all data concatenated (missing-as-negative), one model
individual        one standalone model per client, no communication

Any number of worker threads may train clients within a round; results
are bit-identical to the sequential schedule because every client owns a
private RNG stream and aggregation always walks clients in index order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import (
    GlobalModel,
    STRATEGIES,
    collect_bn_stats,
    fedavg_feature,
    fedbn_plus_feature,
    fedavg_full,
    mean_arrays,
    server_update,
)
from .data import (
    LabeledSet,
    ScenarioData,
    ScenarioSpec,
    generate_synthetic,
    scatter_restricted,
    stats_split,
)
from .errors import ConfigError
from .metrics import EvalResult, evaluate
from .model import (
    ClientState,
    head_warmup,
    init_model,
    local_train,
    validation_loss,
)
from .nn import Architecture, ParamSet, build_architecture
from .registry import ClassRegistry

METHODS = ("surgical", "vanilla_fl", "fl_partial_loss", "pfl", "centralized", "individual")
BASELINES = tuple(m for m in METHODS if m != "surgical")

_TAG_INIT, _TAG_SHUFFLE = 101, 102


@dataclass(frozen=True)
class SeedBundle:
    init: int
    shuffle: int


def default_seeds(scenario_seed: int) -> SeedBundle:
    ss = np.random.SeedSequence([scenario_seed, _TAG_INIT]).generate_state(2)
    return SeedBundle(init=int(ss[0]), shuffle=int(ss[1]))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; identical configs give identical runs."""

    scenario: ScenarioSpec
    method: str
    strategy: str = "fedavg"
    T: int = 100
    E: int = 1
    lr: float = 0.01
    batch_size: int = 32
    warmup_epochs: int = 5
    warmup_lr: float = 0.01
    hidden: tuple[int, ...] = (32, 16)
    use_batchnorm: bool = True
    sample_weighted: bool = False
    seeds: SeedBundle | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "fedbn" and self.method != "pfl":
            raise ConfigError("strategy 'fedbn' keeps no global model and is only valid with method 'pfl'")
        if self.T < 1:
            raise ConfigError("T must be positive")
        if self.E < 1:
            raise ConfigError("E must be positive")
        if self.T < self.E:
            raise ConfigError("T must be at least E (no round would ever complete)")
        if self.lr <= 0.0 or self.warmup_lr <= 0.0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    def resolved_seeds(self) -> SeedBundle:
        return self.seeds if self.seeds is not None else default_seeds(self.scenario.seed)

    def architecture(self) -> Architecture:
        return build_architecture(self.scenario.d, self.hidden, self.use_batchnorm)


@dataclass(frozen=True)
class RoundReport:
    """Per-round losses plus global-model test metrics when one exists."""

    round: int
    client_train_loss: tuple[float, ...]
    client_val_loss: tuple[float, ...]
    mean_val_loss: float
    test_mean_auroc: float | None
    test_per_class: tuple[float | None, ...] | None
    wall_time: float


@dataclass(frozen=True)
class RunResult:
    method: str
    config: ExperimentConfig
    arch: Architecture
    registry: ClassRegistry
    test: LabeledSet
    reports: tuple[RoundReport, ...]
    best_round: int
    global_params: ParamSet | None
    client_params: tuple[ParamSet, ...] | None
    client_classes: tuple[tuple[int, ...], ...]

    def global_eval(self, class_subset=None) -> EvalResult:
        if self.global_params is None:
            raise ConfigError(f"method {self.method!r} keeps no global model")
        return evaluate(
            self.global_params, self.arch, range(self.registry.n_classes),
            self.test, self.registry, class_subset,
        )

    def client_eval(self, k: int, class_subset=None) -> EvalResult:
        if self.client_params is None:
            raise ConfigError(f"method {self.method!r} keeps no per-client models")
        return evaluate(
            self.client_params[k], self.arch, self.client_classes[k],
            self.test, self.registry, class_subset,
        )


def _loss_mode(method: str) -> str:
    return "all_classes_negatives" if method in ("vanilla_fl", "centralized") else "local_classes"


def _build_clients(data: ScenarioData, cfg: ExperimentConfig, arch: Architecture) -> list[ClientState]:
    seeds = cfg.resolved_seeds()
    M = data.registry.n_classes
    wide = cfg.method in ("vanilla_fl", "fl_partial_loss")
    clients = []
    for k, cd in enumerate(data.clients):
        if wide:
            params = init_model(arch, M, seeds.init, class_ids=range(M))
            train = LabeledSet(cd.train.x, scatter_restricted(cd.train.y, cd.classes, M), "train")
            val = LabeledSet(cd.val.x, scatter_restricted(cd.val.y, cd.classes, M), "val")
        else:
            params = init_model(arch, len(cd.classes), seeds.init, class_ids=cd.classes)
            train, val = cd.train, cd.val
        clients.append(
            ClientState(
                id=k, arch=arch, params=params, classes=cd.classes,
                train=train, val=val,
                rng=np.random.default_rng([seeds.shuffle, k]),
            )
        )
    return clients


def _build_centralized(data: ScenarioData, cfg: ExperimentConfig, arch: Architecture) -> ClientState:
    seeds = cfg.resolved_seeds()
    M = data.registry.n_classes
    params = init_model(arch, M, seeds.init, class_ids=range(M))
    tx = np.vstack([cd.train.x for cd in data.clients])
    ty = np.vstack([scatter_restricted(cd.train.y, cd.classes, M) for cd in data.clients])
    vx = np.vstack([cd.val.x for cd in data.clients])
    vy = np.vstack([scatter_restricted(cd.val.y, cd.classes, M) for cd in data.clients])
    return ClientState(
        id=0, arch=arch, params=params, classes=tuple(range(M)),
        train=LabeledSet(tx, ty, "train"), val=LabeledSet(vx, vy, "val"),
        rng=np.random.default_rng([seeds.shuffle, 0]),
    )


def _train_all(clients, epochs, lr, batch_size, loss_mode, pool) -> None:
    if pool is None:
        for c in clients:
            local_train(c, epochs, lr, batch_size, loss_mode)
    else:
        list(pool.map(lambda c: local_train(c, epochs, lr, batch_size, loss_mode), clients))


def _average_feature_tensors(param_sets, weights=None):
    return {
        k: mean_arrays([ps.feature[k] for ps in param_sets], weights)
        for k in sorted(param_sets[0].feature)
    }


def _full_fedavg_update(clients, strategy, pretrained_bn, weights):
    """Classical aggregation for equal-width heads; returns the global
    parameter set and the per-client sendbacks."""
    param_sets = [c.params for c in clients]
    if strategy == "fedavg":
        gp = fedavg_full(param_sets, weights)
        return gp, [gp.copy() for _ in clients]
    feature, bn_mean, bn_var = fedbn_plus_feature(param_sets, pretrained_bn, weights)
    head_W = mean_arrays([ps.head_W for ps in param_sets], weights)
    head_b = mean_arrays([ps.head_b for ps in param_sets], weights)
    gp = ParamSet(feature=feature, bn_mean=bn_mean, bn_var=bn_var, head_W=head_W, head_b=head_b)
    sendbacks = [
        ParamSet(
            feature={k: v.copy() for k, v in feature.items()},
            bn_mean={i: v.copy() for i, v in ps.bn_mean.items()},
            bn_var={i: v.copy() for i, v in ps.bn_var.items()},
            head_W=head_W.copy(),
            head_b=head_b.copy(),
        )
        for ps in param_sets
    ]
    return gp, sendbacks


def _pfl_update(clients, strategy, weights):
    """Feature-only aggregation; heads and (except for fedavg) batch-norm
    statistics stay personal."""
    param_sets = [c.params for c in clients]
    if strategy == "fedavg":
        feature, bn_mean, bn_var = fedavg_feature(param_sets, weights)
        sendbacks = []
        for ps in param_sets:
            sendbacks.append(
                ParamSet(
                    feature={k: v.copy() for k, v in feature.items()},
                    bn_mean={i: v.copy() for i, v in bn_mean.items()},
                    bn_var={i: v.copy() for i, v in bn_var.items()},
                    head_W=ps.head_W,
                    head_b=ps.head_b,
                )
            )
        return sendbacks
    feature = _average_feature_tensors(param_sets, weights)
    return [
        ParamSet(
            feature={k: v.copy() for k, v in feature.items()},
            bn_mean=ps.bn_mean,
            bn_var=ps.bn_var,
            head_W=ps.head_W,
            head_b=ps.head_b,
        )
        for ps in param_sets
    ]


def run_experiment(config: ExperimentConfig, parallel: int = 1, round_hook=None) -> RunResult:
    """Run one experiment end to end.  ``parallel`` sets the number of
    worker threads used for within-round client training (results are
    identical for any value).  ``round_hook(round, global_params, clients)``
    is called after every communication round."""
    if parallel < 1:
        raise ConfigError("parallel must be at least 1")
    data = generate_synthetic(config.scenario)
    arch = config.architecture()
    registry = data.registry
    M = registry.n_classes
    loss_mode = _loss_mode(config.method)
    federated = config.method in ("surgical", "vanilla_fl", "fl_partial_loss", "pfl")

    if config.method == "centralized":
        clients = [_build_centralized(data, config, arch)]
    else:
        clients = _build_clients(data, config, arch)

    weights = [c.train.n for c in clients] if config.sample_weighted else None

    pretrained_bn = None
    if config.strategy in ("fedbn_plus",) and federated:
        seeds = config.resolved_seeds()
        reference = init_model(arch, M, seeds.init, class_ids=range(M))
        pretrained_bn = collect_bn_stats(reference, arch, stats_split(config.scenario))

    for c in clients:
        head_warmup(c, config.warmup_epochs, config.warmup_lr, config.batch_size, loss_mode)

    n_rounds = config.T // config.E
    reports: list[RoundReport] = []
    best_val = np.inf
    best_round = 0
    best_global: ParamSet | None = None
    best_clients: list[ParamSet] | None = None

    pool = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None
    try:
        for r in range(1, n_rounds + 1):
            t0 = time.perf_counter()
            _train_all(clients, config.E, config.lr, config.batch_size, loss_mode, pool)

            global_params: ParamSet | None = None
            if config.method == "surgical":
                gm, sendbacks = server_update(
                    clients, registry, config.strategy, pretrained_bn, weights, r
                )
                global_params = gm.params
            elif config.method in ("vanilla_fl", "fl_partial_loss"):
                global_params, sendbacks = _full_fedavg_update(
                    clients, config.strategy, pretrained_bn, weights
                )
            elif config.method == "pfl":
                sendbacks = _pfl_update(clients, config.strategy, weights)
            elif config.method == "centralized":
                global_params = clients[0].params
                sendbacks = None
            else:  # individual
                sendbacks = None
            if sendbacks is not None:
                for c, ps in zip(clients, sendbacks):
                    c.params = ps

            val_losses = tuple(validation_loss(c, loss_mode) for c in clients)
            mean_val = float(np.mean(val_losses))
            if global_params is not None:
                ev = evaluate(global_params, arch, range(M), data.test, registry)
                test_mean = ev.mean_auroc
                test_per_class = tuple(ev.per_class[c] for c in range(M))
            else:
                test_mean = None
                test_per_class = None
            reports.append(
                RoundReport(
                    round=r,
                    client_train_loss=tuple(c.last_train_loss for c in clients),
                    client_val_loss=val_losses,
                    mean_val_loss=mean_val,
                    test_mean_auroc=test_mean,
                    test_per_class=test_per_class,
                    wall_time=time.perf_counter() - t0,
                )
            )
            if round_hook is not None:
                round_hook(r, global_params, clients)
            if mean_val < best_val:
                best_val = mean_val
                best_round = r
                if global_params is not None:
                    best_global = global_params.copy()
                if config.method in ("pfl", "individual"):
                    best_clients = [c.params.copy() for c in clients]

        leftover = config.T - n_rounds * config.E
        if leftover:
            _train_all(clients, leftover, config.lr, config.batch_size, loss_mode, pool)
    finally:
        if pool is not None:
            pool.shutdown()

    keep_clients = config.method in ("pfl", "individual")
    return RunResult(
        method=config.method,
        config=config,
        arch=arch,
        registry=registry,
        test=data.test,
        reports=tuple(reports),
        best_round=best_round,
        global_params=best_global,
        client_params=tuple(best_clients) if keep_clients and best_clients else None,
        client_classes=tuple(c.classes for c in clients),
    )


def run_surgical(config: ExperimentConfig, parallel: int = 1, round_hook=None) -> RunResult:
    if config.method != "surgical":
        raise ConfigError("run_surgical requires method 'surgical'")
    return run_experiment(config, parallel, round_hook)


def run_baseline(config: ExperimentConfig, parallel: int = 1, round_hook=None) -> RunResult:
    if config.method not in BASELINES:
        raise ConfigError(f"run_baseline requires one of {BASELINES}")
    return run_experiment(config, parallel, round_hook)


# --- suites -----------------------------------------------------------------

SUITE_GROUPS = ("all", "shared_by_all", "partially_shared", "unique")


@dataclass(frozen=True)
class GroupStats:
    mean: float | None
    sd: float | None
    n: int
    p: float | None
    stars: str


@dataclass(frozen=True)
class SuiteRow:
    label: str
    method: str
    is_reference: bool
    failed: bool
    groups: dict[str, GroupStats]


@dataclass(frozen=True)
class SuiteResult:
    rows: tuple[SuiteRow, ...]
    reference: str
    class_names: tuple[str, ...]


def _per_class_vector(result: RunResult) -> dict[int, float | None]:
    """Per-class test AUROC for one run.  Personalised/individual methods
    have no single model, so each class is scored by averaging the
    owning clients' models (a class held by one client is simply that
    client's score)."""
    M = result.registry.n_classes
    if result.global_params is not None:
        return dict(result.global_eval().per_class)
    per_class: dict[int, list[float]] = {c: [] for c in range(M)}
    for k in range(len(result.client_classes)):
        ev = result.client_eval(k, result.client_classes[k])
        for c, v in ev.per_class.items():
            if v is not None:
                per_class[c].append(v)
    return {c: (float(np.mean(v)) if v else None) for c, v in per_class.items()}


def run_suite(configs, reference: str = "surgical", parallel: int = 1):
    """Run several methods on comparable scenarios and build one table.

    Returns ``(SuiteResult, list[RunResult | None])``; a member that
    raises is recorded as a failed row with empty stats.  Group means
    come with the sample SD across classes and a paired t-test against
    the reference method over the classes both runs define.
    """
    from .metrics import paired_ttest, significance_stars
    from .registry import sharing_profile

    configs = list(configs)
    if not configs:
        raise ConfigError("suite needs at least one member config")
    if reference not in [c.method for c in configs]:
        raise ConfigError(f"reference method {reference!r} is not among the suite members")

    results: list[RunResult | None] = []
    errors: list[str | None] = []
    for cfg in configs:
        try:
            results.append(run_experiment(cfg, parallel))
            errors.append(None)
        except Exception as exc:  # member failure must not sink the suite
            results.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")

    ref_idx = next(
        (i for i, cfg in enumerate(configs) if cfg.method == reference and results[i] is not None),
        None,
    )
    if ref_idx is None:
        raise ConfigError("the reference run failed; no comparison is possible")
    ref_result = results[ref_idx]
    ref_vector = _per_class_vector(ref_result)
    profile = sharing_profile(ref_result.registry)
    group_classes = {
        "all": tuple(range(ref_result.registry.n_classes)),
        "shared_by_all": profile.shared_by_all,
        "partially_shared": profile.partially_shared,
        "unique": profile.unique,
    }

    seen: dict[str, int] = {}
    rows = []
    for i, cfg in enumerate(configs):
        count = seen.get(cfg.method, 0)
        seen[cfg.method] = count + 1
        label = cfg.method if count == 0 else f"{cfg.method}#{count + 1}"
        if results[i] is None:
            rows.append(
                SuiteRow(
                    label=label, method=cfg.method, is_reference=False, failed=True,
                    groups={g: GroupStats(None, None, 0, None, "failed") for g in SUITE_GROUPS},
                )
            )
            continue
        vector = _per_class_vector(results[i])
        is_ref = i == ref_idx
        groups = {}
        for gname in SUITE_GROUPS:
            classes = group_classes[gname]
            vals = [vector[c] for c in classes if vector[c] is not None]
            mean = float(np.mean(vals)) if vals else None
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
            if is_ref:
                p, stars = None, "ref"
            else:
                paired = [
                    (vector[c], ref_vector[c])
                    for c in classes
                    if vector[c] is not None and ref_vector[c] is not None
                ]
                if len(paired) >= 2:
                    tt = paired_ttest([a for a, _ in paired], [b for _, b in paired])
                    p, stars = tt.p, significance_stars(tt.p)
                else:
                    p, stars = None, "NA"
            groups[gname] = GroupStats(mean=mean, sd=sd, n=len(vals), p=p, stars=stars)
        rows.append(SuiteRow(label=label, method=cfg.method, is_reference=is_ref, failed=False, groups=groups))

    suite = SuiteResult(
        rows=tuple(rows), reference=reference,
        class_names=ref_result.registry.global_classes,
    )
    return suite, results
