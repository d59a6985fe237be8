import math

import numpy as np
import pytest

from savt.attention import (
    AttentionConfig,
    AttentionWeights,
    attend,
    attend_grad_logits,
    attention_logits,
    multi_head_attend,
)
from savt.normalizers import entmax15_sort, normalize_rows, softmax
from savt.numerics import DimensionError, Rng

NORMALIZERS = ["softmax", "entmax15"]


def loop_oracle(x, w, n_heads, normalize):
    """Multi-head attention assembled with explicit loops over heads and rows."""
    t, d = x.shape
    dh = d // n_heads
    q, k, v = x @ w.w_q + w.b_q, x @ w.w_k + w.b_k, x @ w.w_v + w.b_v
    concat = np.zeros((t, d))
    for h in range(n_heads):
        lo = h * dh
        for i in range(t):
            logits = np.array([sum(q[i, lo + c] * k[j, lo + c] for c in range(dh)) for j in range(t)])
            a = normalize(logits / math.sqrt(dh))
            for c in range(dh):
                concat[i, lo + c] = sum(a[j] * v[j, lo + c] for j in range(t))
    return concat @ w.w_o + w.b_o


def random_weights(d, seed):
    rng = Rng(seed)
    return AttentionWeights(*(rng.normal((d, d)) * 0.5 for _ in range(4)),
                            *(rng.normal(d) * 0.1 for _ in range(4)))


@pytest.mark.parametrize("normalizer", NORMALIZERS)
def test_single_token(normalizer):
    cfg = AttentionConfig(4, 1, normalizer)
    v = np.array([[1.0, -2.0, 3.0]])
    y, a = attend(cfg, np.ones((1, 4))[:, :3], np.ones((1, 3)), v)
    assert a.tolist() == [[1.0]]
    assert np.array_equal(y, v)


def test_zero_logits_give_uniform_and_identical_outputs():
    rng = Rng(0)
    q = np.zeros((5, 4))
    k, v = rng.normal((5, 4)), rng.normal((5, 3))
    outs = [attend(AttentionConfig(4, 1, n), q, k, v) for n in NORMALIZERS]
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.allclose(outs[0][1], 0.2, atol=1e-15)
    assert np.allclose(outs[0][0], v.mean(axis=0), atol=1e-14)


def test_entmax_saturates_to_one_hot():
    cfg = AttentionConfig(4, 1, "entmax15")
    k = np.eye(4)
    q = np.array([[6.0, 0.0, 0.0, 0.0]])  # scaled gap 6/2 = 3 > 2
    v = Rng(1).normal((4, 3))
    y, a = attend(cfg, q, k, v)
    assert a.tolist() == [[1.0, 0.0, 0.0, 0.0]]
    assert np.array_equal(y[0], v[0])


def test_logits_scale_by_root_head_dim():
    q = np.ones((1, 9))
    assert attention_logits(q, q)[0, 0] == pytest.approx(3.0)


@pytest.mark.parametrize("normalizer", NORMALIZERS)
def test_zero_qk_identity_vo_averages_tokens(normalizer):
    d = 4
    x = Rng(2).normal((6, d))
    w = AttentionWeights(np.zeros((d, d)), np.zeros((d, d)), np.eye(d), np.eye(d))
    y, maps = multi_head_attend(AttentionConfig(d, 2, normalizer), w, x)
    assert maps.shape == (2, 6, 6)
    assert np.allclose(y, x.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize("normalizer", NORMALIZERS)
def test_token_permutation_equivariance(normalizer):
    x = Rng(3).normal((5, 6))
    w = random_weights(6, 4)
    cfg = AttentionConfig(6, 3, normalizer)
    perm = np.array([3, 0, 4, 1, 2])
    y, _ = multi_head_attend(cfg, w, x)
    y_perm, _ = multi_head_attend(cfg, w, x[perm])
    assert np.allclose(y_perm, y[perm], atol=1e-12)


@pytest.mark.parametrize("normalizer,fn", [("softmax", lambda z: softmax(z).p),
                                           ("entmax15", lambda z: entmax15_sort(z).p)])
def test_multi_head_matches_loop_oracle(normalizer, fn):
    x = Rng(5).normal((4, 6))
    w = random_weights(6, 6)
    y, _ = multi_head_attend(AttentionConfig(6, 2, normalizer), w, x)
    assert np.abs(y - loop_oracle(x, w, 2, fn)).max() < 1e-12


def test_config_and_shape_validation():
    with pytest.raises(ValueError):
        AttentionConfig(6, 4)
    with pytest.raises(ValueError):
        AttentionConfig(4, 2, solver="newton")
    w = random_weights(4, 0)
    with pytest.raises(DimensionError):
        multi_head_attend(AttentionConfig(6, 2), w, np.zeros((3, 6)))
    with pytest.raises(ValueError):
        multi_head_attend(AttentionConfig(4, 2), w, np.full((3, 4), np.inf))


@pytest.mark.parametrize("normalizer", NORMALIZERS)
def test_grad_trivial_cases(normalizer):
    cfg = AttentionConfig(4, 1, normalizer)
    rng = Rng(8)
    logits, v = rng.normal((3, 3)), rng.normal((3, 4))
    assert np.array_equal(attend_grad_logits(cfg, logits, v, np.zeros((3, 4))), np.zeros((3, 3)))
    assert np.array_equal(attend_grad_logits(cfg, [[0.7]], [[1.0, 2.0]], [[3.0, -1.0]]), [[0.0]])


@pytest.mark.parametrize("normalizer", NORMALIZERS)
@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences(normalizer, seed):
    cfg = AttentionConfig(4, 1, normalizer, solver="bisect")
    rng = Rng(seed)
    q, k, v, g = rng.normal((3, 4)), rng.normal((3, 4)), rng.normal((3, 4)), rng.normal((3, 4))
    logits = attention_logits(q, k)
    if normalizer == "entmax15":
        taus = np.array([entmax15_sort(row).tau for row in logits])
        if np.abs(logits - taus[:, None]).min() < 1e-4:
            pytest.skip("support boundary too close for finite differences")

    def loss(lg):
        return float((g * (normalize_rows(lg, cfg.normalizer, "bisect") @ v)).sum())

    h = 1e-6
    fd = np.empty_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        fd[idx] = (loss(logits + e) - loss(logits - e)) / (2 * h)
    assert np.abs(attend_grad_logits(cfg, logits, v, g) - fd).max() < 1e-5
