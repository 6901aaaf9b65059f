"""Client-side model state: init, per-class head columns, local SGD.

Every client in an experiment shares one init seed for the feature
extractor, and each head column is drawn from a stream keyed by
(seed, global class id).  Two clients that share a class therefore start
from identical columns regardless of how wide their heads are.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSet
from .errors import ConfigError, ContractViolation, NumericError
from .nn import (
    Architecture,
    ParamSet,
    backward,
    forward,
    masked_bce_loss,
    sgd_step,
)

_TAG_FEATURE, _TAG_HEAD = 1, 2

LOSS_MODES = ("local_classes", "all_classes_negatives")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_model(arch: Architecture, head_classes: int, seed: int, class_ids=None) -> ParamSet:
    """Fresh parameters: Glorot-uniform dense weights, zero biases,
    batch-norm at (gamma=1, beta=0, mean=0, var=1).

    ``class_ids`` are the global ids behind the head columns (defaults to
    0..head_classes-1); column j is drawn from a stream keyed by
    (seed, class_ids[j]) and each column is initialised as its own
    fan-out-1 dense map so its values do not depend on the head width.
    """
    if head_classes < 1:
        raise ConfigError("head_classes must be positive")
    if class_ids is None:
        class_ids = list(range(head_classes))
    class_ids = [int(c) for c in class_ids]
    if len(class_ids) != head_classes:
        raise ConfigError("class_ids must have one entry per head column")

    rng = np.random.default_rng([seed, _TAG_FEATURE])
    feature: dict[str, np.ndarray] = {}
    bn_mean: dict[int, np.ndarray] = {}
    bn_var: dict[int, np.ndarray] = {}
    for i, spec in enumerate(arch.feature_specs):
        if spec.kind == "dense":
            feature[f"{i}.W"] = _glorot(rng, spec.in_dim, spec.out_dim, (spec.in_dim, spec.out_dim))
            feature[f"{i}.b"] = np.zeros(spec.out_dim)
        elif spec.kind == "batchnorm":
            feature[f"{i}.gamma"] = np.ones(spec.out_dim)
            feature[f"{i}.beta"] = np.zeros(spec.out_dim)
            bn_mean[i] = np.zeros(spec.out_dim)
            bn_var[i] = np.ones(spec.out_dim)

    n_feat = arch.feature_out_dim
    head_W = np.empty((n_feat, head_classes))
    for j, c in enumerate(class_ids):
        col_rng = np.random.default_rng([seed, _TAG_HEAD, c])
        head_W[:, j] = _glorot(col_rng, n_feat, 1, n_feat)
    head_b = np.zeros(head_classes)
    return ParamSet(feature=feature, bn_mean=bn_mean, bn_var=bn_var, head_W=head_W, head_b=head_b)


def class_column(params: ParamSet, j: int) -> np.ndarray:
    """Head column j with its bias appended (length feature_dim + 1)."""
    if not 0 <= j < params.head_cols:
        raise ConfigError(f"head has no column {j}")
    return np.concatenate([params.head_W[:, j], [params.head_b[j]]])


def set_class_column(params: ParamSet, j: int, column: np.ndarray) -> None:
    """Write a (weights, bias) column back; exact inverse of
    :func:`class_column`."""
    column = np.asarray(column, dtype=np.float64)
    if not 0 <= j < params.head_cols:
        raise ConfigError(f"head has no column {j}")
    if column.shape != (params.head_W.shape[0] + 1,):
        raise ConfigError("column length must be feature_dim + 1")
    params.head_W[:, j] = column[:-1]
    params.head_b[j] = column[-1]


@dataclass
class ClientState:
    """One client's model, data views and private RNG stream.

    ``classes`` are the sorted global ids the client holds.  The head is
    normally one column per held class; missing-as-negative and masked
    loss baselines widen it to the full class set, in which case the
    label views are full width as well.
    """

    id: int
    arch: Architecture
    params: ParamSet
    classes: tuple[int, ...]
    train: LabeledSet
    val: LabeledSet
    rng: np.random.Generator
    epoch_counter: int = 0
    last_train_loss: float = float("nan")

    def __post_init__(self):
        if self.train.y.shape[1] != self.params.head_cols:
            raise ContractViolation("label view width does not match the head")
        if self.params.head_cols < len(self.classes):
            raise ContractViolation("head narrower than the client's class list")

    def loss_columns(self, loss_mode: str) -> tuple[int, ...]:
        """Head columns the training loss covers under a loss mode."""
        if loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss_mode {loss_mode!r}")
        width = self.params.head_cols
        if loss_mode == "all_classes_negatives":
            return tuple(range(width))
        if width == len(self.classes):
            return tuple(range(width))
        return self.classes


def _train_epoch(client: ClientState, lr: float, batch_size: int, frozen, cols) -> float:
    n = client.train.n
    perm = client.rng.permutation(n)
    total, batches = 0.0, 0
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        xb = client.train.x[idx]
        yb = client.train.y[idx]
        acts, p = forward(client.params, client.arch, xb, "train")
        loss = masked_bce_loss(p, yb, cols)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at client {client.id}", client=client.id)
        grads = backward(client.params, client.arch, acts, p, yb, cols)
        client.params = sgd_step(client.params, grads, lr, frozen)
        total += loss
        batches += 1
    return total / batches


def head_warmup(client: ClientState, warmup_epochs: int, warmup_lr: float, batch_size: int,
                loss_mode: str = "local_classes") -> ClientState:
    """Train only the head for a few epochs; the feature extractor stays
    frozen but batch-norm running statistics do update.  Zero epochs is a
    no-op."""
    if warmup_epochs < 0:
        raise ConfigError("warmup_epochs must be non-negative")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    cols = client.loss_columns(loss_mode)
    for _ in range(warmup_epochs):
        _train_epoch(client, warmup_lr, batch_size, frozenset({"feature_extractor"}), cols)
    return client


def local_train(client: ClientState, epochs: int, lr: float, batch_size: int,
                loss_mode: str = "local_classes") -> ClientState:
    """Run ``epochs`` full passes of mini-batch SGD on the client's data.

    Batch order comes from the client's own RNG stream, which persists
    across calls, so E epochs twice equals 2E epochs once bit-exactly.
    """
    if epochs < 1:
        raise ConfigError("epochs must be at least 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    cols = client.loss_columns(loss_mode)
    losses = [_train_epoch(client, lr, batch_size, frozenset(), cols) for _ in range(epochs)]
    client.epoch_counter += epochs
    client.last_train_loss = float(np.mean(losses))
    return client


def validation_loss(client: ClientState, loss_mode: str = "local_classes") -> float:
    """Masked BCE on the client's validation split, eval mode."""
    cols = client.loss_columns(loss_mode)
    _, p = forward(client.params, client.arch, client.val.x, "eval")
    return masked_bce_loss(p, client.val.y, cols)


# --- checkpoints ------------------------------------------------------------

_CKPT_HEADER = "surgfed-checkpoint-v1"


def save_checkpoint(params: ParamSet, path) -> None:
    """Text checkpoint: one row per tensor with a shape header and
    row-major values at 17 significant digits (bit-exact on reload)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in sorted(params.feature):
        rows.append(("feature", name, params.feature[name]))
    for i in sorted(params.bn_mean):
        rows.append(("bn_mean", str(i), params.bn_mean[i]))
        rows.append(("bn_var", str(i), params.bn_var[i]))
    rows.append(("head_W", "head_W", params.head_W))
    rows.append(("head_b", "head_b", params.head_b))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([_CKPT_HEADER])
        for group, name, arr in rows:
            if arr.ndim == 1:
                shape = (arr.shape[0], 0)
            else:
                shape = arr.shape
            w.writerow(
                [group, name, shape[0], shape[1]] + [f"{v:.17g}" for v in np.ravel(arr)]
            )


def load_checkpoint(path) -> ParamSet:
    path = Path(path)
    feature: dict[str, np.ndarray] = {}
    bn_mean: dict[int, np.ndarray] = {}
    bn_var: dict[int, np.ndarray] = {}
    head_W = head_b = None
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if not header or header[0] != _CKPT_HEADER:
            raise ConfigError(f"{path} is not a surgfed checkpoint")
        for row in r:
            group, name, rows_, cols_ = row[0], row[1], int(row[2]), int(row[3])
            vals = np.array([float(v) for v in row[4:]], dtype=np.float64)
            arr = vals if cols_ == 0 else vals.reshape(rows_, cols_)
            if group == "feature":
                feature[name] = arr
            elif group == "bn_mean":
                bn_mean[int(name)] = arr
            elif group == "bn_var":
                bn_var[int(name)] = arr
            elif group == "head_W":
                head_W = arr
            elif group == "head_b":
                head_b = arr
            else:
                raise ConfigError(f"unknown checkpoint row group {group!r}")
    if head_W is None or head_b is None:
        raise ConfigError("checkpoint is missing the head")
    return ParamSet(feature=feature, bn_mean=bn_mean, bn_var=bn_var, head_W=head_W, head_b=head_b)
