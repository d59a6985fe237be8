import math

import numpy as np
import pytest
from scipy import integrate

from savt.numerics import (
    DimensionError,
    Rng,
    add,
    argmax,
    concat,
    cosine_similarity,
    gather_rows,
    gelu,
    gelu_grad,
    layer_norm,
    matmul,
    reshape,
)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    assert np.array_equal(matmul(np.eye(2), np.eye(2)), np.eye(2))


def test_matmul_hand_computed():
    out = matmul([[1, 2], [3, 4]], [[0], [1]])
    assert np.array_equal(out, [[2.0], [4.0]])


@pytest.mark.parametrize("shape", [(7, 5, 3), (1, 1, 1), (3, 9, 2), (4, 0, 2)])
def test_matmul_against_triple_loop(shape):
    m, k, n = shape
    rng = Rng(7)
    a, b = rng.normal((m, k)), rng.normal((k, n))
    assert np.abs(matmul(a, b) - naive_matmul(a, b)).max(initial=0.0) < 1e-12


def test_matmul_left_to_right_accumulation_is_exact():
    # same summation order as the loop oracle, so equality is bitwise
    rng = Rng(3)
    a, b = rng.normal((6, 11)), rng.normal((11, 4))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_rejects_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(np.full((1, 5), 3.25), np.ones(5), np.zeros(5))
    assert np.array_equal(out, np.zeros((1, 5)))


def test_layer_norm_already_normalized():
    out = layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), eps=1e-15)
    assert np.allclose(out, [1.0, -1.0], atol=1e-12)


def test_layer_norm_two_pass_oracle():
    rng = Rng(11)
    x = rng.normal((4, 8)) * 3 + 1
    gamma, beta = rng.normal(8), rng.normal(8)
    want = np.empty_like(x)
    for i, row in enumerate(x):
        mean = math.fsum(row) / row.size
        var = math.fsum((v - mean) ** 2 for v in row) / row.size
        want[i] = [(v - mean) / math.sqrt(var + 1e-6) for v in row]
    want = want * gamma + beta
    assert np.abs(layer_norm(x, gamma, beta) - want).max() < 1e-12


def test_layer_norm_validates():
    with pytest.raises(DimensionError):
        layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(3))
    with pytest.raises(ValueError):
        layer_norm(np.ones(3), np.ones(3), np.zeros(3), eps=0.0)


def test_gelu_fixed_points():
    assert gelu(0.0) == 0.0
    assert abs(gelu(40.0) - 40.0) < 1e-9
    assert abs(gelu(-40.0)) < 1e-9


@pytest.mark.parametrize("x", [1.0, -0.5, 2.5])
def test_gelu_matches_quadrature(x):
    half, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), 0.0, x,
                             epsabs=1e-14, epsrel=1e-14)
    cdf = 0.5 + half
    assert abs(float(gelu(x)) - x * cdf) < 1e-9


def test_gelu_grad_matches_central_difference():
    x = np.linspace(-4, 4, 33)
    h = 1e-6
    fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.abs(gelu_grad(x) - fd).max() < 1e-8


def test_rng_is_deterministic_and_children_differ():
    a, b = Rng(5), Rng(5)
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))
    assert np.array_equal(a.permutation(10), b.permutation(10))
    assert not np.array_equal(Rng(5).child(1).normal(4), Rng(5).child(2).normal(4))
    with pytest.raises(ValueError):
        Rng(-1)


def test_truncated_normal_stays_in_bounds():
    draws = Rng(0).truncated_normal((200, 50), std=0.02)
    assert np.abs(draws).max() <= 0.04
    assert 0.015 < draws.std() < 0.02


def test_elementwise_shape_checks():
    with pytest.raises(DimensionError):
        add(np.ones(3), np.ones(4))
    with pytest.raises(DimensionError):
        reshape(np.ones(6), (4, 2))


def test_concat_gather_argmax():
    x = np.arange(6.0).reshape(3, 2)
    assert concat([x, x], axis=1).shape == (3, 4)
    assert np.array_equal(gather_rows(x, [2, 0]), x[[2, 0]])
    assert argmax(np.array([1.0, 3.0, 3.0])) == 1


def test_cosine_similarity_cases():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[2.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    sim = cosine_similarity(a, b)
    assert np.allclose(sim[0], [1.0, -1.0, 0.0])
    assert np.array_equal(sim[1], np.zeros(3))
