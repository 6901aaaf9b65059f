"""Server-side aggregation: feature averaging plus per-class head merging.

The head is merged column by column: global class c is the mean of that
class's (weights, bias) column over exactly the clients that hold c,
taken in ascending client order.  A class held by a single client passes
through bit-exactly, and when every client holds every class the whole
procedure reduces to plain federated averaging.

All means use one shared sequential accumulator so the same inputs give
bit-identical results on every code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .nn import Architecture, ParamSet, forward
from .registry import ClassRegistry, clients_with_class

STRATEGIES = ("fedavg", "fedbn", "fedbn_plus")


@dataclass
class GlobalModel:
    """Server-side model covering every global class."""

    params: ParamSet
    registry: ClassRegistry
    round: int


def mean_arrays(arrays, weights=None) -> np.ndarray:
    """Mean of equally-shaped arrays with a fixed left-to-right
    accumulation order (index order = client order)."""
    if len(arrays) == 0:
        raise ConfigError("cannot average an empty list")
    if weights is None:
        acc = np.array(arrays[0], dtype=np.float64, copy=True)
        for a in arrays[1:]:
            acc += a
        acc /= len(arrays)
        return acc
    weights = [float(w) for w in weights]
    if len(weights) != len(arrays):
        raise ConfigError("one weight per array required")
    total = sum(weights)
    if total <= 0.0:
        raise ConfigError("weights must sum to a positive value")
    acc = np.array(arrays[0], dtype=np.float64, copy=True) * weights[0]
    for a, w in zip(arrays[1:], weights[1:]):
        acc += a * w
    acc /= total
    return acc


def _check_same_feature_keys(param_sets) -> None:
    keys = set(param_sets[0].feature)
    for ps in param_sets[1:]:
        if set(ps.feature) != keys:
            raise ContractViolation("clients disagree on feature parameter names")


def fedavg_feature(param_sets, weights=None):
    """Average every feature tensor, including batch-norm gamma/beta and
    the running statistics.  Returns ``(feature, bn_mean, bn_var)``."""
    if not param_sets:
        raise ConfigError("no clients to aggregate")
    _check_same_feature_keys(param_sets)
    feature = {
        k: mean_arrays([ps.feature[k] for ps in param_sets], weights)
        for k in sorted(param_sets[0].feature)
    }
    bn_mean = {
        i: mean_arrays([ps.bn_mean[i] for ps in param_sets], weights)
        for i in sorted(param_sets[0].bn_mean)
    }
    bn_var = {
        i: mean_arrays([ps.bn_var[i] for ps in param_sets], weights)
        for i in sorted(param_sets[0].bn_var)
    }
    return feature, bn_mean, bn_var


def fedbn_plus_feature(param_sets, pretrained_bn, weights=None):
    """Average dense weights and batch-norm gamma/beta like fedavg, but
    replace the global running statistics with pretrained ones.  Clients
    keep their own local statistics (handled by the caller)."""
    if not param_sets:
        raise ConfigError("no clients to aggregate")
    _check_same_feature_keys(param_sets)
    feature = {
        k: mean_arrays([ps.feature[k] for ps in param_sets], weights)
        for k in sorted(param_sets[0].feature)
    }
    mean_stats, var_stats = pretrained_bn
    for i in param_sets[0].bn_mean:
        if i not in mean_stats or i not in var_stats:
            raise ConfigError(f"pretrained statistics missing for batch-norm layer {i}")
    bn_mean = {i: mean_stats[i].copy() for i in sorted(param_sets[0].bn_mean)}
    bn_var = {i: var_stats[i].copy() for i in sorted(param_sets[0].bn_var)}
    return feature, bn_mean, bn_var


def collect_bn_stats(params: ParamSet, arch: Architecture, x) -> tuple[dict, dict]:
    """Per-layer input mean/variance observed in one train-style pass
    over ``x``; used to pre-seed global batch-norm statistics."""
    probe = params.copy()
    captured_mean: dict[int, np.ndarray] = {}
    captured_var: dict[int, np.ndarray] = {}
    h = np.asarray(x, dtype=np.float64)
    for i, spec in enumerate(arch.feature_specs):
        if spec.kind == "dense":
            h = h @ probe.feature[f"{i}.W"] + probe.feature[f"{i}.b"]
        elif spec.kind == "batchnorm":
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            captured_mean[i] = mu
            captured_var[i] = var
            h = probe.feature[f"{i}.gamma"] * ((h - mu) / np.sqrt(var + arch.bn_eps)) + probe.feature[f"{i}.beta"]
        elif spec.kind == "relu":
            h = np.maximum(h, 0.0)
        else:
            from scipy.special import expit

            h = expit(h)
    return captured_mean, captured_var


def surgical_head_update(heads, registry: ClassRegistry, weights=None):
    """Merge local heads into one (feature_dim, M) head.

    ``heads[k]`` is ``(head_W, head_b, classes)`` for client k, with one
    column per held class in sorted class order.  Global column c is the
    mean of the (weights, bias) columns of the clients holding c, in
    ascending client order; the bias travels with its column.
    """
    if len(heads) != registry.n_clients:
        raise ContractViolation("one head per registry client required")
    n_feat = None
    for k, (W, b, classes) in enumerate(heads):
        classes = tuple(classes)
        if classes != registry.client_classes[k]:
            raise ContractViolation(f"head {k} classes do not match the registry")
        if W.shape[1] != len(classes) or b.shape != (len(classes),):
            raise ContractViolation(f"head {k} width does not match its class list")
        if n_feat is None:
            n_feat = W.shape[0]
        elif W.shape[0] != n_feat:
            raise ContractViolation("heads disagree on feature width")
    M = registry.n_classes
    global_W = np.empty((n_feat, M))
    global_b = np.empty(M)
    for c in range(M):
        contributors = clients_with_class(registry, c)
        cols = []
        for k in contributors:
            W, b, classes = heads[k]
            j = registry.client_classes[k].index(c)
            cols.append(np.concatenate([W[:, j], [b[j]]]))
        w = None if weights is None else [weights[k] for k in contributors]
        merged = mean_arrays(cols, w)
        global_W[:, c] = merged[:-1]
        global_b[c] = merged[-1]
    return global_W, global_b


def reconstruct_client_head(global_W, global_b, registry: ClassRegistry, k: int):
    """Client k's head: the global columns for its classes, in sorted
    class order (copies, not views)."""
    if not 0 <= k < registry.n_clients:
        raise ConfigError(f"client index {k} out of range")
    if global_W.shape[1] != registry.n_classes or global_b.shape != (registry.n_classes,):
        raise ContractViolation("global head width does not match the registry")
    cols = list(registry.client_classes[k])
    return global_W[:, cols].copy(), global_b[cols].copy()


def fedavg_full(param_sets, weights=None) -> ParamSet:
    """Plain federated averaging of entire parameter sets (heads must all
    have the same width).  This is the classical baseline aggregation and
    is kept as an independent path from the per-class merge."""
    if not param_sets:
        raise ConfigError("no clients to aggregate")
    width = param_sets[0].head_cols
    for ps in param_sets[1:]:
        if ps.head_cols != width:
            raise ContractViolation("fedavg_full needs equal head widths")
    feature, bn_mean, bn_var = fedavg_feature(param_sets, weights)
    head_W = mean_arrays([ps.head_W for ps in param_sets], weights)
    head_b = mean_arrays([ps.head_b for ps in param_sets], weights)
    return ParamSet(feature=feature, bn_mean=bn_mean, bn_var=bn_var, head_W=head_W, head_b=head_b)


def server_update(clients, registry: ClassRegistry, strategy: str = "fedavg",
                  pretrained_bn=None, weights=None, round_idx: int = 0):
    """One communication round of the selective scheme.

    Takes the clients' parameter sets (narrow heads, one column per held
    class), builds the global model, and returns it together with the
    per-client parameter sets to send back: the aggregated feature
    extractor for everyone plus each client's slice of the global head.

    ``strategy`` controls the feature part: ``fedavg`` averages
    everything including running statistics; ``fedbn_plus`` averages the
    trainable tensors, pins the global statistics to ``pretrained_bn``
    and lets every client keep its own local statistics.  ``fedbn`` keeps
    no global model and is therefore only valid for personalised runs.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if strategy == "fedbn":
        raise ConfigError("strategy 'fedbn' emits no global model; use it with the pfl method only")
    param_sets = [c.params for c in clients]
    if len(param_sets) != registry.n_clients:
        raise ContractViolation("one client state per registry client required")
    for k, (c, ps) in enumerate(zip(clients, param_sets)):
        if tuple(c.classes) != registry.client_classes[k]:
            raise ContractViolation(f"client {k} classes do not match the registry")
        if ps.head_cols != len(c.classes):
            raise ContractViolation(f"client {k} head width does not match its class list")

    if strategy == "fedavg":
        feature, bn_mean, bn_var = fedavg_feature(param_sets, weights)
    else:
        if pretrained_bn is None:
            raise ConfigError("fedbn_plus requires pretrained batch-norm statistics")
        feature, bn_mean, bn_var = fedbn_plus_feature(param_sets, pretrained_bn, weights)

    heads = [(ps.head_W, ps.head_b, clients[k].classes) for k, ps in enumerate(param_sets)]
    global_W, global_b = surgical_head_update(heads, registry, weights)
    global_params = ParamSet(
        feature={k: v.copy() for k, v in feature.items()},
        bn_mean={i: v.copy() for i, v in bn_mean.items()},
        bn_var={i: v.copy() for i, v in bn_var.items()},
        head_W=global_W,
        head_b=global_b,
    )

    sendbacks = []
    for k, ps in enumerate(param_sets):
        w, b = reconstruct_client_head(global_W, global_b, registry, k)
        if strategy == "fedavg":
            local_mean = {i: v.copy() for i, v in bn_mean.items()}
            local_var = {i: v.copy() for i, v in bn_var.items()}
        else:
            local_mean = {i: v.copy() for i, v in ps.bn_mean.items()}
            local_var = {i: v.copy() for i, v in ps.bn_var.items()}
        sendbacks.append(
            ParamSet(
                feature={key: v.copy() for key, v in feature.items()},
                bn_mean=local_mean,
                bn_var=local_var,
                head_W=w,
                head_b=b,
            )
        )
    return GlobalModel(params=global_params, registry=registry, round=round_idx), sendbacks
