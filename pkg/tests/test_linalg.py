import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linchain.linalg import (
    RngState,
    ShapeError,
    kaiming_bound,
    kaiming_uniform,
    matmul,
    max_abs_diff,
    transpose,
)

MASK = (1 << 64) - 1


def splitmix64_reference(seed, n):
    # sequential textbook form, independent of the vectorized counter form
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & MASK
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_matmul_identity_and_zeros(rng):
    m = rng.uniform(-1, 1, (3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(np.zeros((2, 3)), rng.uniform(-1, 1, (3, 4))), np.zeros((2, 4)))


def test_matmul_hand_example():
    # 1*5+2*7=19, 1*6+2*8=22, 3*5+4*7=43, 3*6+4*8=50
    got = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert got.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="2x3.*2x3"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_transpose_examples():
    assert np.array_equal(transpose(np.eye(4)), np.eye(4))
    assert transpose(np.zeros((2, 5))).shape == (5, 2)
    assert transpose(np.array([[1.0, 2.0, 3.0]])).tolist() == [[1.0], [2.0], [3.0]]


def test_max_abs_diff_examples(rng):
    m = rng.uniform(-1, 1, (3, 2))
    assert max_abs_diff(m, m) == 0.0
    assert max_abs_diff(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    assert max_abs_diff(np.array([[1.0, 5.0]]), np.array([[2.0, 3.0]])) == 2.0
    with pytest.raises(ShapeError):
        max_abs_diff(np.zeros((2, 2)), np.zeros((2, 3)))


def test_splitmix_reference_vectors():
    assert [int(v) for v in RngState(0).next_uint64(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 17, MASK])
def test_counter_stream_matches_sequential_reference(seed):
    rng = RngState(seed)
    got = [int(v) for v in rng.next_uint64(5)] + [int(v) for v in rng.next_uint64(7)]
    assert got == splitmix64_reference(seed, 12)
    assert rng.counter == 12


def test_uniform_uses_top_53_bits():
    raw = RngState(7).next_uint64(4)
    u = RngState(7).uniform(4)
    assert np.array_equal(u, np.array([(int(z) >> 11) * 2.0**-53 for z in raw]))


def test_permutation_is_a_permutation_and_deterministic():
    a = RngState(3).permutation(50)
    assert sorted(a.tolist()) == list(range(50))
    assert np.array_equal(a, RngState(3).permutation(50))
    assert not np.array_equal(a, np.arange(50))


def test_derive_does_not_advance_and_differs():
    r = RngState(5)
    child = r.derive(1)
    assert r.counter == 0
    assert child.seed != r.seed
    assert child == RngState(5).derive(1)
    assert RngState(5).derive(1) != RngState(5).derive(2)


def test_normal_moments():
    z = RngState(11).normal(100_000)
    assert abs(z.mean()) < 3 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.02


def test_kaiming_bound_examples():
    assert kaiming_bound(1024) == pytest.approx(0.0765, abs=5e-5)
    assert kaiming_bound(6) == 1.0
    w = kaiming_uniform(1024, 16, RngState(0))
    assert np.all(np.abs(w) <= kaiming_bound(1024))
    w = kaiming_uniform(6, 1, RngState(0))
    assert np.all(np.abs(w) <= 1.0)


def test_kaiming_determinism():
    a = kaiming_uniform(7, 5, RngState(42))
    b = kaiming_uniform(7, 5, RngState(42))
    assert a.tobytes() == b.tobytes()


def test_kaiming_advances_rng():
    rng = RngState(42)
    a = kaiming_uniform(3, 3, rng)
    b = kaiming_uniform(3, 3, rng)
    assert rng.counter == 18
    assert not np.array_equal(a, b)


def test_kaiming_distribution_over_many_draws():
    b = kaiming_bound(64)
    w = kaiming_uniform(64, 100_000 // 64 + 1, RngState(9)).ravel()
    assert np.all(np.abs(w) <= b)
    se = b / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) <= 3 * se
    # uniform on [-b, b] has variance b^2 / 3
    assert w.var() == pytest.approx(b * b / 3, rel=0.02)


dims = st.integers(1, 32)


@settings(max_examples=60, deadline=None)
@given(dims, dims, dims, dims, st.integers(0, 2**32))
def test_associativity(p, q, r, s, seed):
    g = np.random.default_rng(seed)
    a, b, c = g.uniform(-1, 1, (p, q)), g.uniform(-1, 1, (q, r)), g.uniform(-1, 1, (r, s))
    scale = q * r
    assert max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-12 * scale


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32))
def test_transpose_of_product(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b = g.uniform(-1, 1, (p, q)), g.uniform(-1, 1, (q, r))
    assert max_abs_diff(transpose(matmul(a, b)), matmul(transpose(b), transpose(a))) <= 1e-14
    assert np.array_equal(transpose(transpose(a)), a)
