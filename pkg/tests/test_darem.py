import math

import numpy as np
import pytest

from starformer.darem import (ImportanceScores, MaskConfig, aggregate_attention_rollout, apply_mask,
                              attention_scores, build_regional_mask, mask_budget, num_seeds, region_radius)
from starformer.encoder import AttentionStack, SequenceBatch
from starformer.errors import ConfigError, ContractError, DegenerateError


def _with_cls(block):
    """Embed a timestep block into an (N+1)x(N+1) matrix with an inert CLS row/column."""
    block = np.asarray(block, dtype=float)
    n = block.shape[-1]
    out = np.zeros(block.shape[:-2] + (n + 1, n + 1))
    out[..., 1:, 1:] = block
    out[..., 0, 0] = 1.0
    return out


def random_stack(rng, L, B, N, pad=True):
    lengths = rng.integers(1, N + 1, size=B) if pad else np.full(B, N)
    valid = np.arange(N)[None, :] < lengths[:, None]
    tokens = np.concatenate([np.ones((B, 1), bool), valid], axis=1)
    raw = rng.random((L, B, N + 1, N + 1)) * tokens[None, :, None, :]
    return raw / raw.sum(axis=-1, keepdims=True), valid


def scores(sigma, n=None):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    N = sigma.shape[1]
    n = n or N
    valid = np.broadcast_to(np.arange(N)[None, :] < n, sigma.shape)
    return ImportanceScores(sigma, valid)


# rollout ----------------------------------------------------------------------

def test_rollout_single_layer_is_identity_map():
    A0 = _with_cls([[0.5, 0.5], [0.2, 0.8]])[None, None]
    np.testing.assert_allclose(aggregate_attention_rollout(A0, np.ones((1, 2), bool))[0], A0[0, 0])


def test_rollout_identity_upper_layer():
    A0 = _with_cls([[0.5, 0.5], [0.2, 0.8]])
    stack = np.stack([A0, np.eye(3)])[:, None]
    np.testing.assert_allclose(aggregate_attention_rollout(stack, np.ones((1, 2), bool))[0], A0, atol=1e-15)


def test_rollout_two_layer_oracle():
    A0 = np.eye(3)
    A1 = _with_cls([[0.5, 0.5], [0.5, 0.5]])
    R = aggregate_attention_rollout(np.stack([A0, A1])[:, None], np.ones((1, 2), bool))[0]
    np.testing.assert_allclose(R[1:, 1:], [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)


def test_rollout_matches_explicit_product():
    rng = np.random.default_rng(0)
    W, valid = random_stack(rng, 3, 4, 5)
    R = aggregate_attention_rollout(AttentionStack(W), valid)
    for b in range(4):
        m = np.concatenate([[True], valid[b]]).astype(float)[None, :]
        ref = W[0, b] * m
        for i in (1, 2):
            ref = (0.5 * W[i, b] * m + 0.5 * np.eye(6)) @ ref
        np.testing.assert_allclose(R[b], ref, atol=1e-14)


def test_rollout_empty_stack():
    with pytest.raises(ContractError):
        aggregate_attention_rollout(np.zeros((0, 1, 3, 3)), np.ones((1, 2), bool))


def test_rollout_rows_stochastic_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        L, B, N = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 13))
        W, valid = random_stack(rng, L, B, N)
        R = aggregate_attention_rollout(W, valid)
        tokens = np.concatenate([np.ones((B, 1), bool), valid], axis=1)
        for b in range(B):
            rows = R[b][tokens[b]][:, tokens[b]]
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-6)


# scores -----------------------------------------------------------------------

def test_score_examples():
    np.testing.assert_allclose(attention_scores(_with_cls(np.eye(3))[None], np.ones((1, 3), bool)).sigma,
                               [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(attention_scores(_with_cls([[0, 1], [0, 1]])[None], np.ones((1, 2), bool)).sigma,
                               [[0.0, 1.0]])
    np.testing.assert_allclose(
        attention_scores(_with_cls([[0.75, 0.25], [0.25, 0.75]])[None], np.ones((1, 2), bool)).sigma, [[0.5, 0.5]])


def test_scores_ignore_padding_and_cls():
    rng = np.random.default_rng(2)
    W, valid = random_stack(rng, 2, 5, 8)
    s = attention_scores(aggregate_attention_rollout(W, valid), valid)
    assert np.all(s.sigma[~valid] == 0.0) and np.all(s.sigma >= 0)
    np.testing.assert_allclose(s.sigma.sum(axis=1), 1.0, atol=1e-12)


def test_scores_permutation_equivariant():
    rng = np.random.default_rng(3)
    block = rng.random((6, 6))
    perm = rng.permutation(6)
    valid = np.ones((1, 6), bool)
    s = attention_scores(_with_cls(block)[None], valid).sigma[0]
    sp = attention_scores(_with_cls(block[np.ix_(perm, perm)])[None], valid).sigma[0]
    np.testing.assert_allclose(sp, s[perm], atol=1e-15)


def test_scores_degenerate():
    with pytest.raises(DegenerateError):
        attention_scores(np.zeros((1, 3, 3)), np.ones((1, 2), bool))


# mask building ----------------------------------------------------------------

def test_mask_examples():
    m = build_regional_mask(scores([0.1, 0.7, 0.2]), MaskConfig(phi=0.4, zeta=1.0, gamma=0.0))
    assert m.budget[0] == 1 and np.flatnonzero(m.masked[0]).tolist() == [1]

    m = build_regional_mask(scores([0.05, 0.1, 0.5, 0.05, 0.3]), MaskConfig(phi=0.6, zeta=0.5, gamma=0.2))
    assert m.budget[0] == 3 and m.seeds[0] == [2, 4]
    assert np.flatnonzero(m.masked[0]).tolist() == [1, 2, 3]

    m = build_regional_mask(scores([0.2, 0.3, 0.5]), MaskConfig(phi=0.0))
    assert not m.masked.any()


def test_mask_helpers():
    assert mask_budget(0.6, 5) == 3
    assert mask_budget(0.29, 100) == 29
    assert num_seeds(0.5, 3) == 2 and num_seeds(0.3, 1) == 1 and num_seeds(0.25, 2) == 1
    assert num_seeds(0.5, 5) == 3  # half rounds up
    assert region_radius(0.2, 5) == 1 and region_radius(0.1, 64) == 6


def test_ties_break_toward_lower_index():
    m = build_regional_mask(scores([0.25, 0.25, 0.25, 0.25]), MaskConfig(phi=0.5, zeta=1.0, gamma=0.0))
    assert np.flatnonzero(m.masked[0]).tolist() == [0, 1]
    # equal distance on both sides: lower index first
    m = build_regional_mask(scores([0.0, 0.0, 1.0, 0.0, 0.0]), MaskConfig(phi=0.4, zeta=0.5, gamma=0.4))
    assert np.flatnonzero(m.masked[0]).tolist() == [1, 2]


def test_strategy_none_and_random():
    s = scores(np.full((3, 10), 0.1))
    none = build_regional_mask(s, MaskConfig(phi=0.5, strategy="none"))
    assert not none.masked.any()
    r1 = build_regional_mask(s, MaskConfig(phi=0.5, strategy="random"), rng_seed=4)
    r2 = build_regional_mask(s, MaskConfig(phi=0.5, strategy="random"), rng_seed=4)
    assert np.array_equal(r1.masked, r2.masked) and np.all(r1.masked.sum(axis=1) == 5)
    with pytest.raises(ContractError):
        build_regional_mask(s, MaskConfig(strategy="random"))


def test_mask_config_validation():
    with pytest.raises(ConfigError):
        MaskConfig(phi=1.5)
    with pytest.raises(ConfigError):
        MaskConfig(strategy="bert")


def _reference_mask(sigma, n, phi, zeta, gamma):
    """Independent restatement of the region-growth procedure."""
    budget = math.floor(phi * n)
    if budget == 0:
        return set()
    k = max(1, math.floor(zeta * budget + 0.5))
    order = sorted(range(n), key=lambda j: (-sigma[j], j))
    r = math.floor(gamma * n)
    out = []
    for s in order[:k]:
        for j in sorted(range(max(0, s - r), min(n, s + r + 1)), key=lambda j: (abs(j - s), j)):
            if j not in out:
                out.append(j)
            if len(out) == budget:
                return set(out)
    return set(out)


def test_mask_matches_reference_procedure():
    rng = np.random.default_rng(5)
    for _ in range(300):
        N = int(rng.integers(1, 20))
        n = int(rng.integers(1, N + 1))
        sigma = np.zeros(N)
        sigma[:n] = rng.dirichlet(np.ones(n))
        if rng.random() < 0.3:
            sigma[:n] = np.round(sigma[:n], 1)  # force ties
        phi, zeta, gamma = rng.random(3)
        m = build_regional_mask(scores(sigma, n), MaskConfig(phi, zeta, gamma))
        assert set(np.flatnonzero(m.masked[0]).tolist()) == _reference_mask(sigma, n, phi, zeta, gamma)


# apply ------------------------------------------------------------------------

def test_apply_mask():
    batch = SequenceBatch.from_sequences([np.arange(6.0).reshape(3, 2) + 1.0], [0])
    empty = build_regional_mask(scores([0.2, 0.3, 0.5]), MaskConfig(phi=0.0))
    assert np.array_equal(apply_mask(batch, empty).values, batch.values)
    m = build_regional_mask(scores([0.1, 0.7, 0.2]), MaskConfig(phi=0.4, zeta=1.0, gamma=0.0))
    out = apply_mask(batch, m)
    assert np.all(out.values[0, 1] == 0.0)
    np.testing.assert_array_equal(out.values[0, [0, 2]], batch.values[0, [0, 2]])
    assert np.array_equal(out.valid, batch.valid) and np.array_equal(out.labels, batch.labels)


def test_apply_mask_counting_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        B, N = int(rng.integers(1, 5)), int(rng.integers(2, 12))
        seqs = [rng.standard_normal((int(rng.integers(1, N + 1)), 3)) + 5.0 for _ in range(B)]
        batch = SequenceBatch.from_sequences(seqs, np.zeros(B, int), pad_to=N)
        sigma = rng.random((B, N)) * batch.valid
        sigma /= sigma.sum(axis=1, keepdims=True)
        m = build_regional_mask(ImportanceScores(sigma, batch.valid), MaskConfig(*rng.random(3)))
        out = apply_mask(batch, m)
        zeroed = np.all(out.values == 0.0, axis=-1) & batch.valid
        assert zeroed.sum() == m.masked.sum()


def test_apply_mask_rejects_mismatch():
    batch = SequenceBatch.from_sequences([np.ones((3, 1))], [0])
    bad = build_regional_mask(scores([0.5, 0.5]), MaskConfig(phi=0.5))
    with pytest.raises(ContractError):
        apply_mask(batch, bad)
