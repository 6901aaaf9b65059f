"""Minimal dense-network kernel: forward, masked BCE, backprop, SGD.

Everything is float64 and all matrices are plain 2-D numpy arrays
(samples in rows).  A model is a stack of feature layers (dense,
batchnorm, relu, sigmoid) followed by an implicit classification head:
one dense layer plus a sigmoid.  The head's parameters live in their own
fields of :class:`ParamSet` so they can be aggregated per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractViolation, NumericError

BCE_CLAMP = 1e-7

LAYER_KINDS = ("dense", "batchnorm", "relu", "sigmoid")
PARAM_GROUPS = frozenset({"feature_extractor", "head"})


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("layer dimensions must be positive")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layers cannot change width")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def batchnorm(dim: int) -> LayerSpec:
    return LayerSpec("batchnorm", dim, dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec("relu", dim, dim)


def sigmoid(dim: int) -> LayerSpec:
    return LayerSpec("sigmoid", dim, dim)


@dataclass(frozen=True)
class Architecture:
    """Feature-extractor layer stack for inputs of width ``in_dim``.

    ``feature_specs`` may be empty, in which case the classification head
    acts directly on the inputs (a plain logistic model).
    """

    in_dim: int
    feature_specs: tuple[LayerSpec, ...] = ()
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.in_dim < 1:
            raise ConfigError("in_dim must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError("bn_momentum must lie in (0, 1)")
        if self.bn_eps <= 0.0:
            raise ConfigError("bn_eps must be positive")
        object.__setattr__(self, "feature_specs", tuple(self.feature_specs))
        w = self.in_dim
        for spec in self.feature_specs:
            if spec.in_dim != w:
                raise ConfigError(
                    f"layer expects width {spec.in_dim} but receives {w}"
                )
            w = spec.out_dim

    @property
    def feature_out_dim(self) -> int:
        return self.feature_specs[-1].out_dim if self.feature_specs else self.in_dim

    def bn_layers(self) -> tuple[int, ...]:
        return tuple(
            i for i, s in enumerate(self.feature_specs) if s.kind == "batchnorm"
        )


def build_architecture(d: int, hidden: tuple[int, ...] = (32, 16), use_batchnorm: bool = True) -> Architecture:
    """Default backbone: dense stack with batchnorm+relu after the first
    dense layer and relu after the rest.  ``hidden=()`` gives a logistic
    model (no feature extractor)."""
    specs: list[LayerSpec] = []
    w = d
    for pos, h in enumerate(hidden):
        specs.append(dense(w, h))
        if pos == 0 and use_batchnorm:
            specs.append(batchnorm(h))
        specs.append(relu(h))
        w = h
    return Architecture(in_dim=d, feature_specs=tuple(specs))


@dataclass(frozen=True)
class BatchNormState:
    """Snapshot view of one batch-norm layer's state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float
    epsilon: float


@dataclass
class ParamSet:
    """Trainable parameters plus batch-norm running statistics.

    ``feature`` maps ``"{layer}.W" / "{layer}.b" / "{layer}.gamma" /
    "{layer}.beta"`` to arrays; ``bn_mean`` / ``bn_var`` hold the running
    statistics keyed by feature-layer index.  ``head_W`` is
    (feature_out_dim, n_head_classes) and ``head_b`` its bias row.
    """

    feature: dict[str, np.ndarray]
    bn_mean: dict[int, np.ndarray]
    bn_var: dict[int, np.ndarray]
    head_W: np.ndarray
    head_b: np.ndarray

    @property
    def head_cols(self) -> int:
        return self.head_W.shape[1]

    def copy(self) -> "ParamSet":
        return ParamSet(
            feature={k: v.copy() for k, v in self.feature.items()},
            bn_mean={k: v.copy() for k, v in self.bn_mean.items()},
            bn_var={k: v.copy() for k, v in self.bn_var.items()},
            head_W=self.head_W.copy(),
            head_b=self.head_b.copy(),
        )

    def bn_state(self, arch: Architecture, layer: int) -> BatchNormState:
        return BatchNormState(
            gamma=self.feature[f"{layer}.gamma"],
            beta=self.feature[f"{layer}.beta"],
            running_mean=self.bn_mean[layer],
            running_var=self.bn_var[layer],
            momentum=arch.bn_momentum,
            epsilon=arch.bn_eps,
        )


@dataclass
class ParamGrad:
    feature: dict[str, np.ndarray]
    head_W: np.ndarray
    head_b: np.ndarray


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bitwise equality of two parameter sets (stats included)."""
    if set(a.feature) != set(b.feature) or set(a.bn_mean) != set(b.bn_mean):
        return False
    for k in a.feature:
        if not np.array_equal(a.feature[k], b.feature[k]):
            return False
    for k in a.bn_mean:
        if not np.array_equal(a.bn_mean[k], b.bn_mean[k]):
            return False
        if not np.array_equal(a.bn_var[k], b.bn_var[k]):
            return False
    return np.array_equal(a.head_W, b.head_W) and np.array_equal(a.head_b, b.head_b)


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError(f"{name} must be a 2-D array, got shape {a.shape}")
    return a


def forward(params: ParamSet, arch: Architecture, x, mode: str = "train"):
    """Run the network.  Returns ``(activations, output)``.

    ``activations[0]`` is the input, then one entry per feature layer,
    then the head pre-activations (logits), then the sigmoid output.
    In train mode batch-norm normalises with batch statistics and updates
    the running statistics in place; in eval mode it reads the running
    statistics and touches nothing.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = _as_matrix(x, "x")
    if h.shape[1] != arch.in_dim:
        raise ConfigError(f"x has width {h.shape[1]}, architecture expects {arch.in_dim}")
    if h.shape[0] < 1:
        raise ConfigError("x must contain at least one sample")
    acts = [h]
    for i, spec in enumerate(arch.feature_specs):
        if spec.kind == "dense":
            W = params.feature[f"{i}.W"]
            b = params.feature[f"{i}.b"]
            if W.shape != (spec.in_dim, spec.out_dim):
                raise ConfigError(f"layer {i} weight shape {W.shape} does not match spec")
            h = h @ W + b
        elif spec.kind == "batchnorm":
            gamma = params.feature[f"{i}.gamma"]
            beta = params.feature[f"{i}.beta"]
            if mode == "train":
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                m = arch.bn_momentum
                params.bn_mean[i][...] = (1.0 - m) * params.bn_mean[i] + m * mu
                params.bn_var[i][...] = (1.0 - m) * params.bn_var[i] + m * var
            else:
                mu = params.bn_mean[i]
                var = params.bn_var[i]
            h = gamma * ((h - mu) / np.sqrt(var + arch.bn_eps)) + beta
        elif spec.kind == "relu":
            h = np.maximum(h, 0.0)
        else:  # sigmoid
            h = expit(h)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation after layer {i} ({spec.kind})", layer=i)
        acts.append(h)
    if params.head_W.shape[0] != arch.feature_out_dim:
        raise ContractViolation(
            f"head expects {params.head_W.shape[0]} features, extractor emits {arch.feature_out_dim}"
        )
    logits = h @ params.head_W + params.head_b
    if not np.isfinite(logits).all():
        raise NumericError("non-finite head pre-activation", layer=len(arch.feature_specs))
    acts.append(logits)
    out = expit(logits)
    acts.append(out)
    return acts, out


def _mask_cols(mask, width: int) -> list[int]:
    cols = sorted({int(c) for c in mask})
    if not cols:
        raise ConfigError("mask must name at least one class column")
    if cols[0] < 0 or cols[-1] >= width:
        raise ConfigError(f"mask column out of range for width {width}")
    return cols


def masked_bce_loss(p, y, mask) -> float:
    """Binary cross-entropy averaged over samples and the masked columns.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs so a
    saturated prediction yields a large finite loss instead of an inf.
    """
    p = _as_matrix(p, "p")
    y = _as_matrix(y, "y")
    if p.shape != y.shape:
        raise ConfigError(f"p {p.shape} and y {y.shape} differ in shape")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ConfigError("labels must be exactly 0 or 1")
    cols = _mask_cols(mask, p.shape[1])
    pc = np.clip(p[:, cols], BCE_CLAMP, 1.0 - BCE_CLAMP)
    yc = y[:, cols]
    bce = -(yc * np.log(pc) + (1.0 - yc) * np.log1p(-pc))
    return float(bce.mean())


def backward(params: ParamSet, arch: Architecture, activations, p, y, mask) -> ParamGrad:
    """Analytic gradients of :func:`masked_bce_loss` wrt every trainable
    parameter.  ``activations`` must come from a matching train-mode
    forward call on the same parameters.  Head columns outside the mask
    receive exactly zero gradient.
    """
    p = _as_matrix(p, "p")
    y = _as_matrix(y, "y")
    if p.shape != y.shape:
        raise ConfigError(f"p {p.shape} and y {y.shape} differ in shape")
    nspecs = len(arch.feature_specs)
    if len(activations) != nspecs + 3:
        raise ContractViolation("activation list does not match the architecture")
    if activations[0].shape[0] != p.shape[0]:
        raise ContractViolation("activations are stale: batch size mismatch")
    if p.shape[1] != params.head_cols:
        raise ContractViolation("p width does not match the head")
    n = p.shape[0]
    cols = _mask_cols(mask, p.shape[1])
    g = np.zeros_like(p)
    # Joint derivative of clamped BCE through the output sigmoid; the clamp
    # is treated as the identity, which is exact away from saturation.
    g[:, cols] = (p[:, cols] - y[:, cols]) / (n * len(cols))

    feat_out = activations[nspecs]
    grad_head_W = feat_out.T @ g
    grad_head_b = g.sum(axis=0)
    g = g @ params.head_W.T

    grads: dict[str, np.ndarray] = {}
    for i in range(nspecs - 1, -1, -1):
        spec = arch.feature_specs[i]
        x_in = activations[i]
        if spec.kind == "dense":
            W = params.feature[f"{i}.W"]
            grads[f"{i}.W"] = x_in.T @ g
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ W.T
        elif spec.kind == "batchnorm":
            gamma = params.feature[f"{i}.gamma"]
            nb = x_in.shape[0]
            mu = x_in.mean(axis=0)
            var = x_in.var(axis=0)
            inv = 1.0 / np.sqrt(var + arch.bn_eps)
            xhat = (x_in - mu) * inv
            grads[f"{i}.gamma"] = (g * xhat).sum(axis=0)
            grads[f"{i}.beta"] = g.sum(axis=0)
            dxhat = g * gamma
            g = (inv / nb) * (
                nb * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        elif spec.kind == "relu":
            g = g * (x_in > 0.0)
        else:  # sigmoid
            s = activations[i + 1]
            g = g * s * (1.0 - s)
    return ParamGrad(feature=grads, head_W=grad_head_W, head_b=grad_head_b)


def sgd_step(params: ParamSet, grads: ParamGrad, lr: float, frozen=frozenset()) -> ParamSet:
    """One SGD step.  ``frozen`` names parameter groups to leave alone
    (``feature_extractor``, ``head``).  Running statistics are never
    touched.  Returns a new ParamSet; frozen groups keep their arrays."""
    frozen = frozenset(frozen)
    unknown = frozen - PARAM_GROUPS
    if unknown:
        raise ConfigError(f"unknown parameter group(s) {sorted(unknown)}")
    if lr < 0.0:
        raise ConfigError("lr must be non-negative")
    if "feature_extractor" in frozen:
        feature = dict(params.feature)
    else:
        feature = {}
        for k, v in params.feature.items():
            gk = grads.feature.get(k)
            if gk is None or gk.shape != v.shape:
                raise ContractViolation(f"gradient missing or mis-shaped for {k}")
            feature[k] = v - lr * gk
    if "head" in frozen:
        head_W, head_b = params.head_W, params.head_b
    else:
        if grads.head_W.shape != params.head_W.shape:
            raise ContractViolation("head gradient shape mismatch")
        head_W = params.head_W - lr * grads.head_W
        head_b = params.head_b - lr * grads.head_b
    return ParamSet(
        feature=feature,
        bn_mean=dict(params.bn_mean),
        bn_var=dict(params.bn_var),
        head_W=head_W,
        head_b=head_b,
    )
