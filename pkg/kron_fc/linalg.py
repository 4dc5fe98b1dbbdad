from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from kron_fc.utils import (
    ArgumentError,
    FloatArray,
    NumericError,
    ShapeError,
    check_capacity,
)


logger = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps


@dataclass
class MacTally:
    """Running count of scalar multiplications performed by `matmul`."""

    macs: int = 0


_active_tally: ContextVar[MacTally | None] = ContextVar("_active_tally", default=None)


@contextmanager
def mac_counter() -> Iterator[MacTally]:
    """Count multiply-adds done by `matmul` inside the `with` block.

    Example:
        with mac_counter() as tally:
            forward(spec, weights, x)
        print(tally.macs)
    """
    tally = MacTally()
    token = _active_tally.set(tally)
    try:
        yield tally
    finally:
        _active_tally.reset(token)


def as_matrix(m: Sequence[Sequence[float]] | FloatArray) -> FloatArray:
    """Coerce input to a 2-D float64 array, rejecting NaN and Inf."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or 0 in arr.shape:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ArgumentError("matrix contains NaN or Inf entries")
    return arr


def matmul(a: FloatArray, b: FloatArray) -> FloatArray:
    """Matrix product with a fixed summation order.

    Every output entry is accumulated as ((0 + a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...,
    exactly like a naive triple loop, so results are bit-reproducible across runs and
    platforms. Leading (batch) dimensions broadcast like `numpy.matmul`.

    Args:
        a (array): shape (..., M, K).
        b (array): shape (..., K, N).

    Returns:
        array: shape (..., M, N).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    rows, inner, cols = a.shape[-2], a.shape[-1], b.shape[-1]
    check_capacity(*batch, rows, cols)

    out = np.zeros((*batch, rows, cols))
    for k in range(inner):
        out += a[..., :, k, None] * b[..., None, k, :]

    tally = _active_tally.get()
    if tally is not None:
        tally.macs += int(np.prod(batch, dtype=np.int64)) * rows * inner * cols
    return out


def kron(a: FloatArray, b: FloatArray) -> FloatArray:
    """Kronecker product. Entry (i*b.rows + p, j*b.cols + q) equals a[i,j] * b[p,q]."""
    a, b = as_matrix(a), as_matrix(b)
    check_capacity(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1])
    return np.kron(a, b)


def vec(m: FloatArray) -> FloatArray:
    """Row-major flattening of m into a (rows*cols) x 1 column."""
    m = as_matrix(m)
    return m.reshape(-1, 1).copy()


def unvec(v: FloatArray, rows: int, cols: int) -> FloatArray:
    """Inverse of `vec`: refill a rows x cols matrix in row-major order."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ShapeError(f"cannot unvec {v.size} entries into {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def rearrange(m: FloatArray, m1: int, n1: int, m2: int, n2: int) -> FloatArray:
    """Van Loan rearrangement R(M) that turns the nearest Kronecker product problem
    into a rank-1 approximation problem.

    Row i*n1 + j of the result is vec of the (i, j)-th m2 x n2 block of m, so that
    rearrange(kron(A, B)) == vec(A) @ vec(B).T and
    ||M - A (x) B||_F == ||R(M) - vec(A) vec(B)^T||_F.

    Args:
        m (array): matrix of shape (m1*m2) x (n1*n2).
        m1, n1 (int): shape of the left Kronecker factor.
        m2, n2 (int): shape of the right Kronecker factor.

    Returns:
        array: matrix of shape (m1*n1) x (m2*n2).
    """
    m = as_matrix(m)
    if min(m1, n1, m2, n2) < 1:
        raise ShapeError(f"factor dims must be positive, got {(m1, n1, m2, n2)}")
    if m.shape != (m1 * m2, n1 * n2):
        raise ShapeError(
            f"matrix of shape {m.shape} is not ({m1}*{m2}) x ({n1}*{n2})"
        )
    blocks = m.reshape(m1, m2, n1, n2).transpose(0, 2, 1, 3)
    return blocks.reshape(m1 * n1, m2 * n2).copy()


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD m ~ u @ diag(s) @ v.T with s non-increasing."""

    u: FloatArray
    s: FloatArray
    v: FloatArray

    def reconstruct(self) -> FloatArray:
        return (self.u * self.s) @ self.v.T


def _complete_columns(q: FloatArray, bad: Sequence[int]) -> FloatArray:
    """Replace the columns listed in `bad` by unit vectors orthogonal to every other
    column, scanning the standard basis in order so the choice is deterministic.
    """
    q = q.copy()
    bad_set = set(bad)
    good = [j for j in range(q.shape[1]) if j not in bad_set]
    basis = q[:, good]
    candidate = 0
    for j in sorted(bad_set):
        while True:
            e = np.zeros(q.shape[0])
            e[candidate % q.shape[0]] = 1.0
            candidate += 1
            for _ in range(2):  # twice is enough for Gram-Schmidt in float64
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
            if candidate > 2 * q.shape[0]:
                raise NumericError("could not complete an orthonormal basis")
        q[:, j] = e / norm
        basis = np.column_stack([basis, q[:, j]])
    return q


def _fix_signs(u: FloatArray, v: FloatArray) -> tuple[FloatArray, FloatArray]:
    # largest-magnitude entry of each left singular vector is made positive
    idx = np.abs(u).argmax(axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def svd_full(m: FloatArray, max_sweeps: int = 75) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Slow but simple and deterministic; the in-repo oracle for `svd_truncated`.

    Args:
        m (array): matrix of shape (rows, cols).
        max_sweeps (int, optional): Cap on full sweeps over all column pairs.
            Defaults to 75.

    Raises:
        NumericError: if off-diagonal mass remains after max_sweeps sweeps.

    Returns:
        SvdResult: u (rows x k), s (k,), v (cols x k) with k = min(rows, cols).
    """
    m = as_matrix(m)
    transposed = m.shape[0] < m.shape[1]
    work = (m.T if transposed else m).copy()
    n_rows, n_cols = work.shape
    rot = np.eye(n_cols)
    tol = n_rows * EPS

    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n_cols - 1):
            for q in range(p + 1, n_cols):
                col_p, col_q = work[:, p], work[:, q]
                alpha = col_p @ col_p
                beta = col_q @ col_q
                gamma = col_p @ col_q
                if gamma == 0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1 + zeta**2))
                c = 1 / np.sqrt(1 + t**2)
                s = c * t
                work[:, [p, q]] = work[:, [p, q]] @ np.array([[c, s], [-s, c]])
                rot[:, [p, q]] = rot[:, [p, q]] @ np.array([[c, s], [-s, c]])
        if not rotated:
            logger.debug("jacobi svd of %s converged in %d sweeps", m.shape, sweep)
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge after {max_sweeps} sweeps")

    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing, work, rot = sing[order], work[:, order], rot[:, order]

    zero_tol = max(sing[0], 1.0) * EPS * max(m.shape)
    bad = [j for j in range(n_cols) if sing[j] <= zero_tol]
    left = np.zeros_like(work)
    for j in range(n_cols):
        if j not in bad:
            left[:, j] = work[:, j] / sing[j]
    if bad:
        left = _complete_columns(left, bad)

    u, v = (rot, left) if transposed else (left, rot)
    u, v = _fix_signs(u, v)
    return SvdResult(u=u, s=sing, v=v)


def svd_truncated(
    m: FloatArray,
    k: int,
    tol: float = 1e-12,
    max_iter: int = 10_000,
    seed: int = 0x5EED,
) -> SvdResult:
    """Top-k singular triples by power iteration with deflation.

    Each triple is found by alternating u <- R v, v <- R^T u on the deflated residual
    R = m - sum(s_i u_i v_i^T), re-orthogonalizing against earlier triples, until the
    singular value estimate changes by less than tol (relative) and the right vector
    by less than tol (absolute). A triple whose vector is still drifting at max_iter
    but whose singular value has settled is kept with a warning.

    Args:
        m (array): matrix of shape (rows, cols).
        k (int): number of triples, 1 <= k <= min(rows, cols).
        tol (float, optional): relative convergence tolerance. Defaults to 1e-12.
        max_iter (int, optional): iteration cap per triple. Defaults to 10 000.
        seed (int, optional): seed of the deterministic start vectors.

    Returns:
        SvdResult: u (rows x k), s (k,), v (cols x k).
    """
    m = as_matrix(m)
    n_rows, n_cols = m.shape
    if not 1 <= k <= min(n_rows, n_cols):
        raise ArgumentError(f"k must be in [1, {min(n_rows, n_cols)}], got {k}")

    rng = Rng(seed)
    residual = m.copy()
    zero_tol = max(np.linalg.norm(m), 1.0) * 1e2 * EPS * max(m.shape)
    us, vs, sigmas, null = np.zeros((n_rows, k)), np.zeros((n_cols, k)), [], []

    for idx in range(k):
        prev_u, prev_v = us[:, :idx], vs[:, :idx]
        v = rng.normal(size=n_cols)
        v -= prev_v @ (prev_v.T @ v)
        v /= np.linalg.norm(v)
        sigma_old, sigma, is_null, sigma_done = 0.0, 0.0, False, False

        for n_iter in range(1, max_iter + 1):
            u = residual @ v
            u -= prev_u @ (prev_u.T @ u)
            if np.linalg.norm(u) <= zero_tol:
                is_null = True
                break
            u /= np.linalg.norm(u)
            v_old = v
            v = residual.T @ u
            v -= prev_v @ (prev_v.T @ v)
            sigma = np.linalg.norm(v)
            v /= sigma
            sigma_done = abs(sigma - sigma_old) <= tol * sigma
            # sigma settles quadratically faster than the vectors do
            if sigma_done and np.linalg.norm(v - v_old) <= tol:
                break
            sigma_old = sigma
        else:
            if not sigma_done:
                raise NumericError(
                    f"power iteration for singular triple {idx + 1} did not converge "
                    f"after {max_iter} iterations"
                )
            logger.warning(
                "singular vector %d still moving after %d iterations (clustered "
                "singular values), keeping the converged singular value",
                idx + 1,
                max_iter,
            )

        if is_null:
            null.append(idx)
            sigmas.append(0.0)
            continue
        u = residual @ v
        u -= prev_u @ (prev_u.T @ u)
        sigma = np.linalg.norm(u)
        u /= sigma
        logger.debug("triple %d: sigma=%.6g after %d iterations", idx, sigma, n_iter)
        us[:, idx], vs[:, idx] = u, v
        sigmas.append(sigma)
        residual -= sigma * np.outer(u, v)

    if null:
        us, vs = _complete_columns(us, null), _complete_columns(vs, null)
    sing = np.array(sigmas)
    order = np.argsort(-sing, kind="stable")
    u, v = _fix_signs(us[:, order], vs[:, order])
    return SvdResult(u=u, s=sing[order], v=v)


class Rng:
    """Seeded random stream shared by initialization, dropout and shuffling.

    Bits come from NumPy's PCG64 bit generator seeded through `SeedSequence(seed)`.
    Uniforms are (next_uint64 >> 11) * 2**-53 rescaled to [lo, hi); normals use the
    Box-Muller cosine branch on two uniforms, sqrt(-2 ln(1 - u1)) * cos(2 pi u2).
    An Rng belongs to one consumer; use `split` to hand independent streams to
    parallel workers.
    """

    def __init__(self, seed: int | np.random.SeedSequence) -> None:
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def random(self, size: int | tuple[int, ...] | None = None) -> float | FloatArray:
        return self._gen.random(size)

    def uniform(
        self, lo: float, hi: float, size: int | tuple[int, ...] | None = None
    ) -> float | FloatArray:
        if not lo < hi:
            raise ArgumentError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
        return lo + (hi - lo) * self._gen.random(size)

    def normal(self, size: int | tuple[int, ...] | None = None) -> float | FloatArray:
        u1 = self._gen.random(size)
        u2 = self._gen.random(size)
        return np.sqrt(-2 * np.log1p(-u1)) * np.cos(2 * np.pi * u2)

    def bernoulli(self, p: float, size: int | tuple[int, ...]) -> FloatArray:
        """0/1 float mask with P(1) = p."""
        return (self._gen.random(size) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def split(self, n: int) -> list[Rng]:
        """Independent child streams, reproducible from the parent seed."""
        return [Rng(child) for child in self._seq.spawn(n)]


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    """Draw one uniform real in [lo, hi)."""
    return float(rng.uniform(lo, hi))


def rng_normal(rng: Rng) -> float:
    """Draw one standard normal real."""
    return float(rng.normal())
