import numpy as np
import pytest

from kron_fc import utils
from kron_fc.linalg import (
    Rng,
    as_matrix,
    kron,
    mac_counter,
    matmul,
    rearrange,
    rng_normal,
    rng_uniform,
    svd_full,
    svd_truncated,
    unvec,
    vec,
)
from kron_fc.utils import ArgumentError, CapacityError, ShapeError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def assert_orthonormal(q, tol=1e-10):
    assert np.abs(q.T @ q - np.eye(q.shape[1])).max() < tol


def test_matmul():
    mat = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), mat), mat)

    out = matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]]))
    assert np.array_equal(out, [[3], [7]])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_bit_equal_to_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_broadcasts_batches():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 1, 3, 4)), rng.normal(size=(5, 4, 2))
    np.testing.assert_allclose(matmul(a, b), np.matmul(a, b), rtol=1e-12)


def test_matmul_shape_error():
    msg = r"cannot multiply shapes \(2, 3\) and \(2, 3\)"
    with pytest.raises(ShapeError, match=msg):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_mac_counter():
    with mac_counter() as tally:
        matmul(np.ones((2, 3)), np.ones((3, 4)))
        matmul(np.ones((5, 2, 3)), np.ones((3, 1)))
    assert tally.macs == 2 * 3 * 4 + 5 * 2 * 3 * 1

    # counting stops outside the block
    matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert tally.macs == 54


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ArgumentError, match="NaN or Inf"):
        as_matrix([[1.0, np.nan]])
    assert as_matrix([1.0, 2.0]).shape == (1, 2)


def test_kron():
    assert np.array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))

    mat = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(kron(mat, [[1.0]]), mat)

    expected = [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]]
    assert np.array_equal(kron(mat, [[0.0, 1], [1, 0]]), expected)


def test_kron_capacity(monkeypatch):
    monkeypatch.setattr(utils, "MAX_ENTRIES", 10)
    with pytest.raises(CapacityError, match="limit is 10"):
        kron(np.ones((4, 4)), np.ones((1, 1)))


def test_kron_algebra():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        c, d = rng.normal(size=(3, 4)), rng.normal(size=(2, 2))
        alpha = rng.normal()
        scaled = alpha * kron(a, b)
        np.testing.assert_allclose(kron(alpha * a, b), scaled, rtol=1e-12)
        np.testing.assert_allclose(kron(a, alpha * b), scaled, rtol=1e-12)
        np.testing.assert_allclose(
            matmul(kron(a, b), kron(c, d)),
            kron(matmul(a, c), matmul(b, d)),
            rtol=1e-10,
            atol=1e-12,
        )


def test_vec():
    assert np.array_equal(vec([[1.0, 2], [3, 4]]), [[1], [2], [3], [4]])
    assert np.array_equal(vec([[1.0, 2, 3]]).ravel(), [1, 2, 3])
    mat = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(unvec(vec(mat), 2, 3), mat)
    with pytest.raises(ShapeError, match="cannot unvec 6 entries into 4x2"):
        unvec(vec(mat), 4, 2)


def test_rearrange_shapes():
    assert rearrange(np.ones((4, 6)), 2, 3, 2, 2).shape == (6, 4)

    mat = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(rearrange(mat, 2, 3, 1, 1), mat.reshape(-1, 1))

    with pytest.raises(ShapeError, match=r"is not \(2\*2\) x \(3\*3\)"):
        rearrange(np.ones((4, 6)), 2, 3, 2, 3)


def test_rearrange_rank_one_correspondence():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m1, n1, m2, n2 = (int(d) for d in rng.integers(1, 5, size=4))
        a, b = rng.normal(size=(m1, n1)), rng.normal(size=(m2, n2))
        expected = np.outer(vec(a), vec(b))
        assert np.array_equal(rearrange(kron(a, b), m1, n1, m2, n2), expected)


@pytest.mark.parametrize(
    "dims", [(1, 1, 1, 1), (2, 3, 4, 1), (3, 2, 2, 5), (6, 6, 1, 2)]
)
def test_rearrange_is_a_permutation(dims):
    m1, n1, m2, n2 = dims
    mat = np.random.default_rng(3).normal(size=(m1 * m2, n1 * n2))
    out = rearrange(mat, *dims)
    assert np.array_equal(np.sort(out, axis=None), np.sort(mat, axis=None))
    assert np.linalg.norm(mat) == pytest.approx(np.linalg.norm(out), rel=1e-12)


def test_svd_full_diagonal():
    res = svd_full(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.s, [3, 2, 1], atol=1e-14)
    np.testing.assert_allclose(np.abs(res.u), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(np.abs(res.v), np.eye(3), atol=1e-14)


def test_svd_full_rank_one():
    rng = np.random.default_rng(4)
    u, v = rng.normal(size=4), rng.normal(size=3)
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
    res = svd_full(2.5 * np.outer(u, v))
    np.testing.assert_allclose(res.s, [2.5, 0, 0], atol=1e-12)
    assert abs(res.u[:, 0] @ u) == pytest.approx(1, abs=1e-12)
    assert abs(res.v[:, 0] @ v) == pytest.approx(1, abs=1e-12)
    assert_orthonormal(res.u)
    assert_orthonormal(res.v)


@pytest.mark.parametrize("shape", [(5, 4), (4, 6), (7, 7), (1, 5)])
def test_svd_full_random(shape):
    mat = np.random.default_rng(5).normal(size=shape)
    res = svd_full(mat)
    err = np.linalg.norm(mat - res.reconstruct()) / np.linalg.norm(mat)
    assert err < 1e-10
    assert_orthonormal(res.u)
    assert_orthonormal(res.v)
    assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)

    gram = mat @ mat.T if shape[0] < shape[1] else mat.T @ mat
    eig = np.sort(np.linalg.eigvalsh(gram))
    np.testing.assert_allclose(res.s, np.sqrt(np.clip(eig[::-1], 0, None)), atol=1e-10)


def test_svd_sign_convention():
    mat = np.random.default_rng(6).normal(size=(6, 4))
    for res in (svd_full(mat), svd_truncated(mat, 3)):
        idx = np.abs(res.u).argmax(axis=0)
        assert np.all(res.u[idx, np.arange(res.u.shape[1])] > 0)


def test_svd_truncated():
    np.testing.assert_allclose(svd_truncated(np.diag([3.0, 2.0, 1.0]), 1).s, [3])

    mat = np.random.default_rng(7).normal(size=(8, 6))
    full = svd_full(mat)
    res = svd_truncated(mat, 2)
    np.testing.assert_allclose(res.s, full.s[:2], rtol=1e-8)
    residual = np.linalg.norm(mat - res.reconstruct()) ** 2
    assert residual == pytest.approx(np.sum(full.s[2:] ** 2), rel=1e-8)

    res = svd_truncated(mat, 6)
    np.testing.assert_allclose(res.s, full.s, rtol=1e-8)
    np.testing.assert_allclose(res.reconstruct(), mat, atol=1e-9)
    assert_orthonormal(res.u)
    assert_orthonormal(res.v)


def test_svd_truncated_rank_deficient():
    rng = np.random.default_rng(8)
    mat = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    res = svd_truncated(mat, 4)
    np.testing.assert_allclose(res.s[2:], 0, atol=1e-8)
    np.testing.assert_allclose(res.reconstruct(), mat, atol=1e-9)
    assert_orthonormal(res.u)
    assert_orthonormal(res.v)


@pytest.mark.parametrize("k", [0, 4])
def test_svd_truncated_bad_k(k):
    with pytest.raises(ArgumentError, match=r"k must be in \[1, 3\]"):
        svd_truncated(np.ones((3, 5)), k)


def test_rng_determinism():
    assert rng_uniform(Rng(42), 0, 1) == rng_uniform(Rng(42), 0, 1)
    assert rng_normal(Rng(42)) == rng_normal(Rng(42))
    assert not hasattr(Rng(42), "seed")

    first, second = Rng(7).split(2)
    assert first.random() != second.random()
    again, _ = Rng(7).split(2)
    assert again.random() == Rng(7).split(2)[0].random()


def test_rng_statistics():
    rng = Rng(123)
    uniforms = rng.uniform(0, 1, 100_000)
    assert uniforms.min() >= 0 and uniforms.max() < 1
    assert uniforms.mean() == pytest.approx(0.5, abs=0.01)
    assert rng.normal(100_000).var() == pytest.approx(1.0, abs=0.05)

    draws = [rng_uniform(rng, -2, 3) for _ in range(1000)]
    assert min(draws) >= -2 and max(draws) < 3


@pytest.mark.parametrize("lo, hi", [(1, 1), (2, 1)])
def test_rng_uniform_bad_range(lo, hi):
    with pytest.raises(ArgumentError, match="uniform needs lo < hi"):
        rng_uniform(Rng(0), lo, hi)
