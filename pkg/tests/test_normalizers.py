import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from savt.normalizers import (
    ConsistencyError,
    Normalizer,
    SimplexError,
    entmax15_bisect,
    entmax15_bisect_rows,
    entmax15_sort,
    entmax15_sort_rows,
    entmax15_vjp,
    inject_tau_fault,
    normalize_rows,
    softmax,
    softmax_vjp,
    support_stats,
)
from savt.numerics import Rng

logit_rows = arrays(
    np.float64,
    st.integers(1, 24),
    elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False),
)


def two_element_entmax(a, b):
    gap = a - b
    if gap >= 2:
        return np.array([1.0, 0.0])
    if gap <= -2:
        return np.array([0.0, 1.0])
    tau = ((a + b) - math.sqrt(8 - gap * gap)) / 2
    return np.array([((a - tau) / 2) ** 2, ((b - tau) / 2) ** 2])


def central_fd(f, z, g, h=1e-6):
    out = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        out[i] = (g @ f(z + e) - g @ f(z - e)) / (2 * h)
    return out


# -- softmax ---------------------------------------------------------------


@pytest.mark.parametrize("c", [-3.0, 0.0, 7.5])
def test_softmax_constant(c):
    assert np.allclose(softmax([c, c, c]).p, 1 / 3, atol=1e-15)


def test_softmax_single_and_closed_form():
    assert softmax([42.0]).p.tolist() == [1.0]
    e = math.e
    assert np.abs(softmax([1.0, 0.0]).p - [e / (e + 1), 1 / (e + 1)]).max() < 1e-12


def test_softmax_has_no_threshold():
    with pytest.raises(AttributeError):
        softmax([1.0, 2.0]).tau


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(ValueError):
        softmax([1.0, np.nan])


# -- entmax ----------------------------------------------------------------


@pytest.mark.parametrize("solver", [entmax15_bisect, entmax15_sort])
@pytest.mark.parametrize("c", [-2.0, 0.0, 3.5])
def test_entmax_symmetric_pair(solver, c):
    r = solver([c, c])
    assert np.array_equal(r.p, [0.5, 0.5])
    assert abs(r.tau - (c - math.sqrt(2))) < 1e-12


@pytest.mark.parametrize("solver", [entmax15_bisect, entmax15_sort])
def test_entmax_saturation_is_exact(solver):
    r = solver([10.0, 0.0])
    assert r.p.tolist() == [1.0, 0.0]
    assert r.support_size == 1
    assert abs(r.tau - 8.0) < 1e-12
    assert solver([10.0, 0.0, 0.0]).p.tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("solver", [entmax15_bisect, entmax15_sort])
@pytest.mark.parametrize("pair", [(1.0, 0.0), (0.3, -1.2), (-0.5, 1.4), (1.999, 0.0)])
def test_entmax_two_element_closed_form(solver, pair):
    assert np.abs(solver(pair).p - two_element_entmax(*pair)).max() < 1e-12


@pytest.mark.parametrize("solver", [entmax15_bisect, entmax15_sort])
def test_entmax_uniform_and_singleton(solver):
    assert np.allclose(solver([4.0, 4.0, 4.0]).p, 1 / 3, atol=1e-15)
    assert solver([-9.0]).p.tolist() == [1.0]


def test_entmax_threshold_tie_gets_zero():
    # z = [2, 0]: tau = 0 exactly, so the second entry sits on the threshold
    for solver in (entmax15_bisect, entmax15_sort):
        r = solver([2.0, 0.0])
        assert r.p.tolist() == [1.0, 0.0]


def test_solvers_agree_on_random_battery():
    rng = Rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        z = rng.normal(n) * float(rng.uniform((), 0.1, 10.0))
        worst = max(worst, np.abs(entmax15_sort(z).p - entmax15_bisect(z).p).max())
    assert worst < 1e-9


@settings(max_examples=300, deadline=None)
@given(logit_rows)
def test_entmax_on_simplex(z):
    for solver in (entmax15_bisect, entmax15_sort):
        r = solver(z)
        assert abs(r.p.sum() - 1.0) < 1e-9
        assert r.p.min() >= 0.0
        # support is exactly the set above the threshold
        assert np.array_equal(r.p > 0, z > r.tau)


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(-50, 50))
def test_entmax_shift_invariance(z, c):
    a, b = entmax15_sort(z), entmax15_sort(z + c)
    assert np.abs(a.p - b.p).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.randoms(use_true_random=False))
def test_entmax_permutation_equivariance(z, rnd):
    perm = list(range(z.size))
    rnd.shuffle(perm)
    for solver in (entmax15_bisect, entmax15_sort):
        assert np.array_equal(solver(z[perm]).p, solver(z).p[perm])


@settings(max_examples=200, deadline=None)
@given(logit_rows)
def test_entmax_is_monotone_in_logits(z):
    p = entmax15_sort(z).p
    order = np.argsort(z, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


def test_constant_rows_agree_bitwise_with_softmax():
    z = np.full((3, 7), 0.125)
    assert np.array_equal(normalize_rows(z, "softmax"), normalize_rows(z, "entmax15"))
    assert np.array_equal(normalize_rows(z, "entmax15", "bisect"), normalize_rows(z, "entmax15"))


def test_row_solvers_match_vector_solvers():
    z = Rng(1).normal((5, 9)) * 3
    p_sort, tau_sort = entmax15_sort_rows(z)
    p_bis, tau_bis = entmax15_bisect_rows(z)
    for i in range(5):
        assert np.array_equal(p_sort[i], entmax15_sort(z[i]).p)
    assert np.abs(tau_sort - tau_bis).max() < 1e-9


def test_normalize_rows_rejects_unknown():
    with pytest.raises(ValueError):
        normalize_rows(np.zeros((1, 2)), "sparsemax")
    with pytest.raises(ValueError):
        normalize_rows(np.zeros((1, 2)), Normalizer.ENTMAX15, solver="newton")


def test_tau_fault_hook_breaks_and_restores():
    z = np.array([0.4, 0.1, -0.3])
    clean = entmax15_sort(z).p
    with inject_tau_fault(0.05):
        broken = entmax15_bisect(z).p
    assert abs(broken.sum() - 1.0) > 1e-3
    assert np.array_equal(entmax15_sort(z).p, clean)


def test_consistency_error_is_runtime_error():
    assert issubclass(ConsistencyError, RuntimeError)


# -- VJPs ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["entmax15", "softmax"])
def test_vjp_zero_and_constant_upstream(kind):
    z = Rng(4).normal(6)
    if kind == "entmax15":
        r, vjp = entmax15_sort(z), entmax15_vjp
    else:
        r, vjp = softmax(z), softmax_vjp
    assert np.array_equal(vjp(r, np.zeros(6)), np.zeros(6))
    assert np.abs(vjp(r, np.full(6, 2.5))).max() < 1e-15


@pytest.mark.parametrize("seed", range(8))
def test_entmax_vjp_matches_finite_differences(seed):
    rng = Rng(seed)
    z, g = rng.normal(6), rng.normal(6)
    r = entmax15_bisect(z)
    gap = np.abs(z - r.tau).min()
    if gap < 1e-4:
        pytest.skip("support boundary too close for finite differences")
    fd = central_fd(lambda v: entmax15_bisect(v).p, z, g)
    assert np.abs(entmax15_vjp(r, g) - fd).max() < 1e-5


@pytest.mark.parametrize("seed", range(8))
def test_softmax_vjp_matches_finite_differences(seed):
    rng = Rng(100 + seed)
    z, g = rng.normal(6), rng.normal(6)
    fd = central_fd(lambda v: softmax(v).p, z, g)
    assert np.abs(softmax_vjp(softmax(z), g) - fd).max() < 1e-7


def test_entmax_vjp_is_zero_off_support():
    z = np.array([5.0, 0.0, 4.5, -3.0])
    r = entmax15_sort(z)
    grad = entmax15_vjp(r, Rng(0).normal(4))
    assert np.array_equal(grad[r.p == 0], np.zeros(int((r.p == 0).sum())))


# -- support statistics ----------------------------------------------------


def test_support_stats_cases():
    onehot = np.eye(4)
    assert support_stats(onehot).mean == 0.25
    assert support_stats(np.full((3, 5), 0.2)).to_dict()["mean"] == 1.0
    dense = normalize_rows(Rng(0).normal((10, 8)) * 5, "softmax")
    assert support_stats(dense).min == 1.0
    assert support_stats(np.eye(3)[None].repeat(2, axis=0)).rows == 6


def test_support_stats_rejects_off_simplex():
    with pytest.raises(SimplexError):
        support_stats(np.array([[0.5, 0.2]]))
