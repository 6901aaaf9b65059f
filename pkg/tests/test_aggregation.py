from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgfed import (
    ClassRegistry,
    ClientState,
    ConfigError,
    ContractViolation,
    LabeledSet,
    ParamSet,
    build_architecture,
    collect_bn_stats,
    fedavg_feature,
    fedavg_full,
    fedbn_plus_feature,
    init_model,
    mean_arrays,
    params_equal,
    reconstruct_client_head,
    server_update,
    surgical_head_update,
)

from conftest import random_params


def _heads_for(registry: ClassRegistry, n_feat: int, seed: int):
    rng = np.random.default_rng(seed)
    heads = []
    for cs in registry.client_classes:
        heads.append((rng.normal(size=(n_feat, len(cs))), rng.normal(size=len(cs)), cs))
    return heads


# --- mean_arrays ------------------------------------------------------------


def test_mean_arrays_literal() -> None:
    out = mean_arrays([np.array([1.0, 0.0, 5.0]), np.array([3.0, 2.0, 7.0])])
    np.testing.assert_array_equal(out, [2.0, 1.0, 6.0])


def test_mean_arrays_weighted() -> None:
    out = mean_arrays([np.array([0.0]), np.array([10.0])], weights=[3, 1])
    np.testing.assert_array_equal(out, [2.5])


def test_mean_arrays_validation() -> None:
    with pytest.raises(ConfigError):
        mean_arrays([])
    with pytest.raises(ConfigError):
        mean_arrays([np.zeros(2)], weights=[1, 2])
    with pytest.raises(ConfigError):
        mean_arrays([np.zeros(2), np.zeros(2)], weights=[1, -1])


def test_mean_arrays_does_not_mutate_inputs() -> None:
    a = np.array([1.0, 2.0])
    b = np.array([3.0, 4.0])
    mean_arrays([a, b])
    np.testing.assert_array_equal(a, [1.0, 2.0])


def test_columnwise_mean_equals_matrix_mean() -> None:
    """The per-class merge averages columns one at a time while the
    classical path averages whole matrices.  With a shared left-to-right
    accumulator the two must agree bit for bit."""
    rng = np.random.default_rng(11)
    for K in (2, 3, 5, 7):
        mats = [rng.normal(size=(6, 4)) for _ in range(K)]
        whole = mean_arrays(mats)
        by_col = np.column_stack([mean_arrays([m[:, j] for m in mats]) for j in range(4)])
        np.testing.assert_array_equal(whole, by_col)


# --- per-class head merge -----------------------------------------------------


def test_head_merge_literal_example() -> None:
    reg = ClassRegistry(["a", "b"], [(0, 1), (0,)])
    heads = [
        (np.array([[1.0, 10.0], [3.0, 30.0]]), np.array([5.0, 50.0]), (0, 1)),
        (np.array([[3.0], [5.0]]), np.array([7.0]), (0,)),
    ]
    W, b = surgical_head_update(heads, reg)
    # class 0 is averaged over both clients, class 1 passes through
    np.testing.assert_array_equal(W[:, 0], [2.0, 4.0])
    assert b[0] == 6.0
    np.testing.assert_array_equal(W[:, 1], [10.0, 30.0])
    assert b[1] == 50.0


def test_singleton_class_passthrough_is_bit_exact(small_registry) -> None:
    heads = _heads_for(small_registry, 5, seed=2)
    W, b = surgical_head_update(heads, small_registry)
    # classes 2, 3, 4 live at exactly one client each
    for c, (k, j) in {2: (0, 2), 3: (1, 2), 4: (2, 1)}.items():
        np.testing.assert_array_equal(W[:, c], heads[k][0][:, j])
        assert b[c] == heads[k][1][j]


def test_homogeneous_merge_equals_plain_average() -> None:
    reg = ClassRegistry(["a", "b", "c"], [(0, 1, 2)] * 4)
    rng = np.random.default_rng(7)
    heads = [(rng.normal(size=(5, 3)), rng.normal(size=3), (0, 1, 2)) for _ in range(4)]
    W, b = surgical_head_update(heads, reg)
    np.testing.assert_array_equal(W, mean_arrays([h[0] for h in heads]))
    np.testing.assert_array_equal(b, mean_arrays([h[1] for h in heads]))


def test_non_contributors_cannot_interfere(small_registry) -> None:
    heads = _heads_for(small_registry, 5, seed=3)
    W1, b1 = surgical_head_update(heads, small_registry)
    # client 2 holds classes (0, 4); wreck everything it owns except class 0
    heads[2][0][:, 1] += 1e6
    heads[2][1][1] -= 1e6
    W2, b2 = surgical_head_update(heads, small_registry)
    for c in (1, 2, 3):
        np.testing.assert_array_equal(W1[:, c], W2[:, c])
        assert b1[c] == b2[c]
    assert not np.array_equal(W1[:, 4], W2[:, 4])


def test_merge_weighted_by_client(small_registry) -> None:
    heads = _heads_for(small_registry, 4, seed=4)
    W, b = surgical_head_update(heads, small_registry, weights=[1.0, 3.0, 0.5])
    # class 1 is held by clients 0 and 1 with weights 1 and 3
    expected = (heads[0][0][:, 1] * 1.0 + heads[1][0][:, 1] * 3.0) / 4.0
    np.testing.assert_allclose(W[:, 1], expected, rtol=1e-15)


def test_merge_contract_checks(small_registry) -> None:
    heads = _heads_for(small_registry, 4, seed=5)
    with pytest.raises(ContractViolation):
        surgical_head_update(heads[:2], small_registry)
    bad = list(heads)
    W0, b0, _ = bad[0]
    bad[0] = (W0, b0, (0, 1, 4))
    with pytest.raises(ContractViolation):
        surgical_head_update(bad, small_registry)
    bad[0] = (W0[:, :2], b0[:2], (0, 1, 2))
    with pytest.raises(ContractViolation):
        surgical_head_update(bad, small_registry)


@st.composite
def merge_cases(draw):
    M = draw(st.integers(min_value=1, max_value=6))
    K = draw(st.integers(min_value=1, max_value=5))
    subsets = []
    for _ in range(K):
        s = draw(st.sets(st.integers(min_value=0, max_value=M - 1), min_size=1, max_size=M))
        subsets.append(tuple(sorted(s)))
    covered = set().union(*subsets)
    for i, c in enumerate(sorted(set(range(M)) - covered)):
        k = i % K
        subsets[k] = tuple(sorted(set(subsets[k]) | {c}))
    reg = ClassRegistry([f"g{i}" for i in range(M)], subsets)
    seed = draw(st.integers(min_value=0, max_value=2**31))
    return reg, _heads_for(reg, 3, seed)


@given(merge_cases())
@settings(max_examples=120, deadline=None)
def test_merge_equals_sequential_contributor_mean(case) -> None:
    reg, heads = case
    W, b = surgical_head_update(heads, reg)
    for c in range(reg.n_classes):
        holders = [k for k, cs in enumerate(reg.client_classes) if c in cs]
        acc = None
        for k in holders:
            Wk, bk, cs = heads[k]
            col = np.concatenate([Wk[:, cs.index(c)], [bk[cs.index(c)]]])
            acc = col.copy() if acc is None else acc + col
        acc /= len(holders)
        np.testing.assert_array_equal(W[:, c], acc[:-1])
        assert b[c] == acc[-1]


# --- feature strategies ---------------------------------------------------------


def test_fedavg_feature_averages_everything(tiny_arch) -> None:
    sets = [random_params(tiny_arch, 2, seed=s) for s in (1, 2, 3)]
    feature, bn_mean, bn_var = fedavg_feature(sets)
    np.testing.assert_array_equal(
        feature["0.W"], mean_arrays([ps.feature["0.W"] for ps in sets])
    )
    np.testing.assert_array_equal(bn_mean[1], mean_arrays([ps.bn_mean[1] for ps in sets]))
    np.testing.assert_array_equal(bn_var[1], mean_arrays([ps.bn_var[1] for ps in sets]))


def test_fedbn_plus_pins_stats_to_pretrained(tiny_arch) -> None:
    sets = [random_params(tiny_arch, 2, seed=s) for s in (4, 5)]
    pre_mean = {1: np.array([9.0] * 6)}
    pre_var = {1: np.array([0.25] * 6)}
    feature, bn_mean, bn_var = fedbn_plus_feature(sets, (pre_mean, pre_var))
    np.testing.assert_array_equal(
        feature["1.gamma"], mean_arrays([ps.feature["1.gamma"] for ps in sets])
    )
    np.testing.assert_array_equal(bn_mean[1], pre_mean[1])
    np.testing.assert_array_equal(bn_var[1], pre_var[1])
    assert bn_mean[1] is not pre_mean[1]
    with pytest.raises(ConfigError):
        fedbn_plus_feature(sets, ({}, {}))


def test_collect_bn_stats_matches_manual(tiny_arch) -> None:
    params = init_model(tiny_arch, 2, seed=6)
    x = np.random.default_rng(7).normal(size=(64, 4))
    mean_stats, var_stats = collect_bn_stats(params, tiny_arch, x)
    pre_bn = x @ params.feature["0.W"] + params.feature["0.b"]
    np.testing.assert_allclose(mean_stats[1], pre_bn.mean(axis=0), rtol=1e-15)
    np.testing.assert_allclose(var_stats[1], pre_bn.var(axis=0), rtol=1e-15)


def test_collect_bn_stats_does_not_touch_params(tiny_arch) -> None:
    params = random_params(tiny_arch, 2, seed=8)
    snap = params.copy()
    collect_bn_stats(params, tiny_arch, np.random.default_rng(9).normal(size=(16, 4)))
    assert params_equal(params, snap)


def test_fedavg_full_requires_equal_widths(tiny_arch) -> None:
    a = init_model(tiny_arch, 2, seed=1)
    b = init_model(tiny_arch, 3, seed=1)
    with pytest.raises(ContractViolation):
        fedavg_full([a, b])


def test_reconstruct_client_head(small_registry) -> None:
    rng = np.random.default_rng(10)
    W = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    w2, b2 = reconstruct_client_head(W, b, small_registry, 2)
    np.testing.assert_array_equal(w2, W[:, [0, 4]])
    np.testing.assert_array_equal(b2, b[[0, 4]])
    w2[:, 0] = 0.0  # a copy, not a view
    assert not np.array_equal(w2[:, 0], W[:, 0])
    with pytest.raises(ConfigError):
        reconstruct_client_head(W, b, small_registry, 5)
    with pytest.raises(ContractViolation):
        reconstruct_client_head(W[:, :3], b[:3], small_registry, 0)


# --- full server round ---------------------------------------------------------


def _client_states(registry: ClassRegistry, arch, seed: int):
    rng = np.random.default_rng(seed)
    states = []
    for k, cs in enumerate(registry.client_classes):
        params = random_params(arch, len(cs), seed=seed + k)
        n = 20
        x = rng.normal(size=(n, arch.in_dim))
        y = (rng.random((n, len(cs))) < 0.5).astype(float)
        states.append(
            ClientState(
                id=k, arch=arch, params=params, classes=cs,
                train=LabeledSet(x, y), val=LabeledSet(x, y, "val"),
                rng=np.random.default_rng(k),
            )
        )
    return states


def test_server_update_round_trip(small_registry, tiny_arch) -> None:
    clients = _client_states(small_registry, tiny_arch, seed=21)
    gm, sendbacks = server_update(clients, small_registry, round_idx=3)
    assert gm.round == 3
    assert gm.params.head_cols == small_registry.n_classes
    assert len(sendbacks) == 3
    for k, ps in enumerate(sendbacks):
        cs = small_registry.client_classes[k]
        assert ps.head_cols == len(cs)
        np.testing.assert_array_equal(ps.head_W, gm.params.head_W[:, list(cs)])
        # everyone gets the averaged running statistics under fedavg
        np.testing.assert_array_equal(ps.bn_mean[1], gm.params.bn_mean[1])
        np.testing.assert_array_equal(ps.feature["0.W"], gm.params.feature["0.W"])


def test_server_update_fedbn_plus_keeps_local_stats(small_registry, tiny_arch) -> None:
    clients = _client_states(small_registry, tiny_arch, seed=22)
    own_stats = [c.params.bn_mean[1].copy() for c in clients]
    pre = ({1: np.zeros(6)}, {1: np.ones(6)})
    gm, sendbacks = server_update(clients, small_registry, "fedbn_plus", pretrained_bn=pre)
    np.testing.assert_array_equal(gm.params.bn_mean[1], 0.0)
    np.testing.assert_array_equal(gm.params.bn_var[1], 1.0)
    for ps, stats in zip(sendbacks, own_stats):
        np.testing.assert_array_equal(ps.bn_mean[1], stats)


def test_server_update_idempotent_on_consensus(small_registry, tiny_arch) -> None:
    """Aggregating a fleet that already agrees must hand back the same
    model.  Exact when the divisor is a power of two, within an ulp
    otherwise."""
    clients = _client_states(small_registry, tiny_arch, seed=23)
    gm, sendbacks = server_update(clients, small_registry)
    for c, ps in zip(clients, sendbacks):
        c.params = ps
    gm2, _ = server_update(clients, small_registry)
    for key in gm.params.feature:
        np.testing.assert_allclose(
            gm2.params.feature[key], gm.params.feature[key], rtol=3e-16, atol=0.0
        )
    np.testing.assert_allclose(gm2.params.head_W, gm.params.head_W, rtol=3e-16, atol=0.0)


def test_server_update_idempotent_exact_for_power_of_two() -> None:
    reg = ClassRegistry(["a", "b"], [(0, 1), (0, 1)])
    arch = build_architecture(3, hidden=(4,), use_batchnorm=False)
    clients = _client_states(reg, arch, seed=24)
    _, sendbacks = server_update(clients, reg)
    for c, ps in zip(clients, sendbacks):
        c.params = ps
    gm2, sendbacks2 = server_update(clients, reg)
    assert params_equal(sendbacks2[0], sendbacks[0])
    assert params_equal(sendbacks2[1], sendbacks[1])


def test_server_update_contracts(small_registry, tiny_arch) -> None:
    clients = _client_states(small_registry, tiny_arch, seed=25)
    with pytest.raises(ConfigError):
        server_update(clients, small_registry, "fedbn")
    with pytest.raises(ConfigError):
        server_update(clients, small_registry, "fedbn_plus")  # needs pretrained stats
    with pytest.raises(ConfigError):
        server_update(clients, small_registry, "median")
    clients[0].classes = (0, 1, 3)
    with pytest.raises(ContractViolation):
        server_update(clients, small_registry)
    with pytest.raises(ContractViolation):
        server_update(clients[:2], small_registry)
