"""Synthetic multi-label scenarios with a linear ground truth.

Each class c has a unit direction u_c and threshold tau_c; a sample x is
positive for c iff x . u_c > tau_c, after which each label flips with an
independent noise probability.  Clients draw from a standard normal,
optionally offset by a per-client mean of fixed magnitude (institutional
feature shift).  The global test set is drawn before any client data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .registry import ClassRegistry

_THRESHOLD_BAND = 0.8  # keeps per-class prevalence in roughly [0.2, 0.8]
_MAX_THRESHOLD_ATTEMPTS = 100

# sub-stream tags so draws never depend on the class assignment
_TAG_TRUTH, _TAG_TEST, _TAG_CLIENT, _TAG_SHIFT, _TAG_STATS = 11, 12, 13, 14, 15


@dataclass(frozen=True)
class LabeledSet:
    """Feature matrix plus binary label matrix for one split."""

    x: np.ndarray
    y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ConfigError("x and y must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise ConfigError("x and y disagree on the number of samples")
        if not np.isfinite(x).all():
            raise ConfigError("x contains non-finite values")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ConfigError("labels must be exactly 0 or 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ScenarioSpec:
    """Recipe for one synthetic scenario.

    The class assignment is either explicit (``assignment``) or generated
    from ``shared_count`` classes held by everyone plus ``unique_count``
    classes distributed one-per-client; in that case
    ``M == shared_count + unique_count`` must hold.
    """

    n_per_client: int
    d: int
    M: int
    K: int
    seed: int
    assignment: tuple[tuple[int, ...], ...] | None = None
    shared_count: int | None = None
    unique_count: int | None = None
    skew: str = "iid"
    shift_sigma: float = 0.0
    label_noise: float = 0.05
    n_test: int = 2000
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.n_per_client < 2:
            raise ConfigError("n_per_client must be at least 2")
        if self.d < 1 or self.M < 1 or self.K < 1:
            raise ConfigError("d, M and K must be positive")
        if self.skew not in ("iid", "feature_shift"):
            raise ConfigError(f"unknown skew {self.skew!r}")
        if self.skew == "iid" and self.shift_sigma != 0.0:
            raise ConfigError("iid scenarios must have shift_sigma == 0")
        if self.shift_sigma < 0.0:
            raise ConfigError("shift_sigma must be non-negative")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if self.n_test < 2:
            raise ConfigError("n_test must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.assignment is not None:
            if self.shared_count is not None or self.unique_count is not None:
                raise ConfigError("give either an explicit assignment or generator counts, not both")
            object.__setattr__(
                self, "assignment", tuple(tuple(int(c) for c in cs) for cs in self.assignment)
            )
            if len(self.assignment) != self.K:
                raise ConfigError("assignment must list classes for every client")
        else:
            if self.shared_count is None or self.unique_count is None:
                raise ConfigError("need an assignment or both shared_count and unique_count")
            if self.shared_count < 0 or self.unique_count < 0:
                raise ConfigError("generator counts must be non-negative")
            if self.shared_count + self.unique_count != self.M:
                raise ConfigError("shared_count + unique_count must equal M")


@dataclass(frozen=True)
class ClientData:
    """One client's train/val splits, labels restricted to its classes."""

    classes: tuple[int, ...]
    train: LabeledSet
    val: LabeledSet


@dataclass(frozen=True)
class ScenarioData:
    registry: ClassRegistry
    test: LabeledSet
    clients: tuple[ClientData, ...]


def resolve_assignment(spec: ScenarioSpec) -> tuple[tuple[int, ...], ...]:
    """Per-client global class lists for a spec.

    Generated layout: client 0's unique classes first, then the shared
    block, then the remaining clients' unique classes in client order.
    Every client receives the whole shared block.
    """
    if spec.assignment is not None:
        return spec.assignment
    s, u, K = spec.shared_count, spec.unique_count, spec.K
    per_client = [u // K + (1 if k < u % K else 0) for k in range(K)]
    if s == 0 and min(per_client) == 0:
        raise ConfigError("some client would end up with no classes")
    shared_block = tuple(range(per_client[0], per_client[0] + s))
    lists = []
    cursor = 0
    for k in range(K):
        own = tuple(range(cursor, cursor + per_client[k]))
        cursor += per_client[k]
        if k == 0:
            cursor += s  # the shared block sits right after client 0's classes
        lists.append(tuple(sorted(own + shared_block)))
    return tuple(lists)


def _labels_for(x: np.ndarray, u: np.ndarray, tau: np.ndarray, noise: float, rng) -> np.ndarray:
    y = (x @ u.T > tau).astype(np.float64)
    if noise > 0.0:
        flips = rng.random(y.shape) < noise
    else:
        flips = rng.random(y.shape) < 0.0  # keep the stream aligned across noise settings
    return np.where(flips, 1.0 - y, y)


def _both_labels_present(y: np.ndarray, cols) -> bool:
    sub = y[:, list(cols)]
    return bool(np.all(sub.max(axis=0) == 1.0) and np.all(sub.min(axis=0) == 0.0))


def generate_synthetic(spec: ScenarioSpec) -> ScenarioData:
    """Build registry, global test set and per-client splits for a spec.

    Identical specs produce bit-identical data.  The feature draws never
    depend on the class assignment, so two specs differing only in their
    assignment share the same x matrices.  Thresholds (and the noise
    flips) are redrawn up to 100 times until every class has both labels
    in every split it appears in.
    """
    assignment = resolve_assignment(spec)
    registry = ClassRegistry(
        [f"c{i:02d}" for i in range(spec.M)], assignment
    )

    truth_rng = np.random.default_rng([spec.seed, _TAG_TRUTH])
    u = truth_rng.standard_normal((spec.M, spec.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)

    x_test = np.random.default_rng([spec.seed, _TAG_TEST]).standard_normal((spec.n_test, spec.d))
    shift_rng = np.random.default_rng([spec.seed, _TAG_SHIFT])
    xs = []
    for k in range(spec.K):
        xk = np.random.default_rng([spec.seed, _TAG_CLIENT, k]).standard_normal(
            (spec.n_per_client, spec.d)
        )
        direction = shift_rng.standard_normal(spec.d)
        direction /= np.linalg.norm(direction)
        xk = xk + spec.shift_sigma * direction
        xs.append(xk)

    n_val = max(1, int(round(spec.n_per_client * spec.val_fraction)))
    n_train = spec.n_per_client - n_val
    if n_train < 1:
        raise ConfigError("val_fraction leaves no training samples")

    for attempt in range(_MAX_THRESHOLD_ATTEMPTS):
        tau = truth_rng.uniform(-_THRESHOLD_BAND, _THRESHOLD_BAND, spec.M)
        y_test = _labels_for(x_test, u, tau, spec.label_noise, truth_rng)
        ys = [_labels_for(xk, u, tau, spec.label_noise, truth_rng) for xk in xs]
        ok = _both_labels_present(y_test, range(spec.M))
        if ok:
            for k in range(spec.K):
                cs = assignment[k]
                if not (
                    _both_labels_present(ys[k][:n_train], cs)
                    and _both_labels_present(ys[k][n_train:], cs)
                ):
                    ok = False
                    break
        if ok:
            clients = []
            for k in range(spec.K):
                cs = list(assignment[k])
                clients.append(
                    ClientData(
                        classes=tuple(cs),
                        train=LabeledSet(xs[k][:n_train], ys[k][:n_train][:, cs], "train"),
                        val=LabeledSet(xs[k][n_train:], ys[k][n_train:][:, cs], "val"),
                    )
                )
            return ScenarioData(registry=registry, test=LabeledSet(x_test, y_test, "test"), clients=tuple(clients))
    raise ConfigError(
        f"could not satisfy the one-positive-one-negative invariant in "
        f"{_MAX_THRESHOLD_ATTEMPTS} threshold draws; splits are too small "
        f"(n_per_client={spec.n_per_client}, val={n_val})"
    )


def stats_split(spec: ScenarioSpec, n: int = 1024) -> np.ndarray:
    """Held-out feature sample from the base distribution, used to seed
    batch-norm statistics before any communication round."""
    return np.random.default_rng([spec.seed, _TAG_STATS]).standard_normal((n, spec.d))


def mask_missing_as_negative(y_full: np.ndarray, classes) -> np.ndarray:
    """Full-width label view where every column outside ``classes`` is 0."""
    y_full = np.asarray(y_full, dtype=np.float64)
    if y_full.ndim != 2:
        raise ConfigError("y_full must be 2-D")
    cols = sorted({int(c) for c in classes})
    if cols and (cols[0] < 0 or cols[-1] >= y_full.shape[1]):
        raise ConfigError("class index out of range")
    out = np.zeros_like(y_full)
    out[:, cols] = y_full[:, cols]
    return out


def scatter_restricted(y_restricted: np.ndarray, classes, M: int) -> np.ndarray:
    """Inverse of restricting columns: place the restricted labels at
    their global positions, zeros elsewhere.  Equals
    :func:`mask_missing_as_negative` applied to the original full matrix."""
    y_restricted = np.asarray(y_restricted, dtype=np.float64)
    cols = sorted({int(c) for c in classes})
    if len(cols) != y_restricted.shape[1]:
        raise ConfigError("classes must match the restricted width")
    if cols and cols[-1] >= M:
        raise ConfigError("class index out of range")
    out = np.zeros((y_restricted.shape[0], M), dtype=np.float64)
    out[:, cols] = y_restricted
    return out


# --- scenario ladders -------------------------------------------------------

CLIENT_LADDER = (2, 3, 4, 5, 6, 8, 10)
SHARED_LADDER = (0, 1, 2, 4, 8, 12, 14)
_LADDER_TOTAL_SAMPLES = 2400
_LADDER_CLASSES = 14
_LADDER_D = 20


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def effect_of_clients_scenarios(base_seed: int, label_noise: float = 0.05) -> tuple[ScenarioSpec, ...]:
    """Ladder over the number of clients with the total sample count held
    constant.  Every class is annotated by at least one client; class
    subsets are drawn per rung from ``base_seed``."""
    specs = []
    for K in CLIENT_LADDER:
        rng = np.random.default_rng([base_seed, 21, K])
        lists: list[set[int]] = [set() for _ in range(K)]
        for c in range(_LADDER_CLASSES):
            size = int(rng.integers(1, K + 1))
            for k in rng.choice(K, size=size, replace=False):
                lists[int(k)].add(c)
        for k in range(K):
            if not lists[k]:
                lists[k].add(int(rng.integers(_LADDER_CLASSES)))
        specs.append(
            ScenarioSpec(
                n_per_client=_LADDER_TOTAL_SAMPLES // K,
                d=_LADDER_D,
                M=_LADDER_CLASSES,
                K=K,
                seed=_derive_seed(base_seed, 22, K),
                assignment=tuple(tuple(sorted(s)) for s in lists),
                label_noise=label_noise,
            )
        )
    return tuple(specs)


def effect_of_shared_classes_scenarios(base_seed: int, label_noise: float = 0.05) -> tuple[ScenarioSpec, ...]:
    """Ladder over the number of classes shared by all of K=4 clients.

    All seven specs share the same data seed and sample counts, so the
    underlying feature matrices are bit-identical; only the label masking
    changes from rung to rung.  Non-shared classes go to exactly one
    client each, round-robin in a per-rung random order."""
    K = 4
    data_seed = _derive_seed(base_seed, 32)
    specs = []
    for s in SHARED_LADDER:
        rng = np.random.default_rng([base_seed, 31, s])
        shared = set(int(c) for c in rng.choice(_LADDER_CLASSES, size=s, replace=False))
        rest = [c for c in range(_LADDER_CLASSES) if c not in shared]
        order = rng.permutation(len(rest))
        lists = [set(shared) for _ in range(K)]
        for pos, idx in enumerate(order):
            lists[pos % K].add(rest[int(idx)])
        specs.append(
            ScenarioSpec(
                n_per_client=_LADDER_TOTAL_SAMPLES // K,
                d=_LADDER_D,
                M=_LADDER_CLASSES,
                K=K,
                seed=data_seed,
                assignment=tuple(tuple(sorted(x)) for x in lists),
                label_noise=label_noise,
            )
        )
    return tuple(specs)


# --- dataset dump / load ---------------------------------------------------


def dump_labeled_set(ls: LabeledSet, directory, prefix: str = "data") -> None:
    """Write x/y CSVs plus a small JSON manifest.  Floats use 17
    significant digits so a reload is bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{prefix}_x.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in ls.x:
            w.writerow([f"{v:.17g}" for v in row])
    with open(directory / f"{prefix}_y.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in ls.y:
            w.writerow([str(int(v)) for v in row])
    manifest = {
        "n": int(ls.n),
        "d": int(ls.x.shape[1]),
        "n_classes": int(ls.y.shape[1]),
        "split": ls.split,
    }
    with open(directory / f"{prefix}_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_labeled_set(directory, prefix: str = "data") -> LabeledSet:
    directory = Path(directory)
    with open(directory / f"{prefix}_manifest.json") as f:
        manifest = json.load(f)
    with open(directory / f"{prefix}_x.csv", newline="") as f:
        x = np.array([[float(v) for v in row] for row in csv.reader(f)], dtype=np.float64)
    with open(directory / f"{prefix}_y.csv", newline="") as f:
        y = np.array([[float(v) for v in row] for row in csv.reader(f)], dtype=np.float64)
    ls = LabeledSet(x, y, manifest["split"])
    if ls.n != manifest["n"] or ls.x.shape[1] != manifest["d"] or ls.y.shape[1] != manifest["n_classes"]:
        raise ConfigError("dataset files do not match their manifest")
    return ls
