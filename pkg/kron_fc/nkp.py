from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from kron_fc.kfc import FactorShape, KfcSpec, KfcWeights, init_weights
from kron_fc.linalg import Rng, as_matrix, kron, rearrange, svd_truncated, unvec
from kron_fc.utils import ArgumentError, FloatArray, ShapeError, UnsupportedError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecompResult:
    """Rank-k nearest Kronecker sum of a matrix for one factor shape.

    Attributes:
        weights (KfcWeights): one group with factors stacked as (k, rows, cols) and a
            zero bias.
        singular_values (array): the k leading singular values of R(M).
        residual_fro (float): ||M - sum_i A_i (x) B_i||_F.
        rel_residual (float): residual_fro / ||M||_F, 0 for M = 0.
    """

    weights: KfcWeights
    singular_values: FloatArray
    residual_fro: float
    rel_residual: float

    def reconstruct(self) -> FloatArray:
        a, b = self.weights.factors[0]
        return np.sum([kron(a[i], b[i]) for i in range(len(a))], axis=0)


def nkp(m: FloatArray, shape: FactorShape, k: int = 1) -> DecompResult:
    """Nearest Kronecker product: best rank-k sum of A_i (x) B_i in Frobenius norm.

    Solved in closed form through the rearrangement R(M), whose best rank-k
    approximation sum_i s_i u_i v_i^T gives A_i = unvec(sqrt(s_i) u_i) and
    B_i = unvec(sqrt(s_i) v_i). The symmetric sqrt(s_i) split makes
    ||A_i||_F == ||B_i||_F for every term.

    Args:
        m (array): matrix of shape (rows_a*rows_b) x (cols_a*cols_b).
        shape (FactorShape): two-factor shape of each Kronecker term.
        k (int, optional): number of terms, 1 <= k <= min dims of R(M). Defaults to 1.

    Returns:
        DecompResult: factors, singular values and residual.
    """
    m = as_matrix(m)
    if len(shape.factors) != 2:
        raise UnsupportedError("nkp factors into two Kronecker factors only")
    (ra, ca), (rb, cb) = shape.factors
    if m.shape != (ra * rb, ca * cb):
        raise ShapeError(
            f"matrix of shape {m.shape} does not split into {ra}x{ca} (x) {rb}x{cb}; "
            f"pad the layer with pad_dims first"
        )
    r_m = rearrange(m, ra, ca, rb, cb)
    if not 1 <= k <= min(r_m.shape):
        raise ArgumentError(f"k must be in [1, {min(r_m.shape)}], got {k}")

    norm = np.linalg.norm(m)
    if norm == 0:
        factors = [np.zeros((k, ra, ca)), np.zeros((k, rb, cb))]
        zero = KfcWeights([factors], np.zeros(ca * cb))
        return DecompResult(zero, np.zeros(k), 0.0, 0.0)

    svd = svd_truncated(r_m, k)
    root = np.sqrt(svd.s)
    a = np.stack([unvec(root[i] * svd.u[:, i], ra, ca) for i in range(k)])
    b = np.stack([unvec(root[i] * svd.v[:, i], rb, cb) for i in range(k)])
    weights = KfcWeights([[a, b]], np.zeros(ca * cb))

    residual = r_m - (svd.u * svd.s) @ svd.v.T
    residual_fro = float(np.linalg.norm(residual))
    logger.debug(
        "nkp %s rank %d: rel residual %.3e", shape, k, residual_fro / norm
    )
    return DecompResult(weights, svd.s, residual_fro, residual_fro / norm)


def _dense_in_kfc_order(m: FloatArray, spec: KfcSpec) -> FloatArray:
    """Pad and reorder a dense in_dim x K matrix into the index order the spec's
    Kronecker terms use.
    """
    m = as_matrix(m)
    if m.shape != (spec.in_dim, spec.out_dim):
        raise ShapeError(
            f"dense matrix of shape {m.shape} does not match KFC layer "
            f"{spec.in_dim} -> {spec.out_dim}"
        )
    m = np.pad(m, ((0, spec.pad_in), (0, spec.pad_out)))
    if spec.groups[0].formulation == "IV":
        m = m[spec._perm]
    return m


def _split_third_factor(
    a: FloatArray, bc: FloatArray, shape: FactorShape
) -> list[FloatArray]:
    # rank-1 NKP of every middle factor: B_i (x) C_i ~ M_i, then rebalance the three
    # factors to equal Frobenius norm
    (_, _), (rb, cb), (rc, cc) = shape.factors
    b_out, c_out = [], []
    for i in range(len(bc)):
        sub = nkp(bc[i], FactorShape(rb, cb, rc, cc), 1)
        b_out.append(sub.weights.factors[0][0][0])
        c_out.append(sub.weights.factors[0][1][0])
    a, b, c = a.copy(), np.stack(b_out), np.stack(c_out)
    for i in range(len(a)):
        norms = [np.linalg.norm(f[i]) for f in (a, b, c)]
        if min(norms) > 0:
            target = np.prod(norms) ** (1 / 3)
            for f, norm in zip((a, b, c), norms):
                f[i] *= target / norm
    return [a, b, c]


def compress_fc(m: FloatArray, bias: FloatArray, spec: KfcSpec) -> KfcWeights:
    """KFC weights initialized from a trained dense layer by NKP, as a starting point
    for fine-tuning.

    Formulation I (three factors) has no closed form; its factors come from a rank-k
    NKP into C x K1 and HW x K2K3 followed by a rank-1 split of each second factor.

    Args:
        m (array): dense weights of shape (in_dim, K).
        bias (array): dense bias of length K, copied verbatim.
        spec (KfcSpec): single-group target spec.

    Returns:
        KfcWeights: factors of the spec's rank plus the copied bias.
    """
    if len(spec.groups) != 1:
        raise UnsupportedError(
            "NKP has no closed form for several shape groups; initialize the first "
            "group by NKP and the others near zero with compress_fc_first_group"
        )
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (spec.out_dim,):
        raise ShapeError(f"bias must have length {spec.out_dim}, got {bias.shape}")

    group = spec.groups[0]
    dense = _dense_in_kfc_order(m, spec)
    factors = group.shape.factors
    if len(factors) == 2:
        result = nkp(dense, group.shape, group.rank)
        arrays = result.weights.factors[0]
    else:
        (ra, ca), (rb, cb), (rc, cc) = factors
        outer = nkp(dense, FactorShape(ra, ca, rb * rc, cb * cc), group.rank)
        a, bc = outer.weights.factors[0]
        arrays = _split_third_factor(a, bc, group.shape)
    return KfcWeights([arrays], bias.copy())


def compress_fc_first_group(
    m: FloatArray, bias: FloatArray, spec: KfcSpec, rng: Rng, scale: float = 1e-4
) -> KfcWeights:
    """Initialization for multi-group specs: NKP on the first group, the remaining
    groups random with every factor scaled by `scale`.
    """
    first = KfcSpec(
        spec.input_shape, spec.out_dim, spec.groups[:1], spec.pad_in, spec.pad_out
    )
    head = compress_fc(m, bias, first)
    rest = init_weights(spec, rng).factors[1:]
    for arrays in rest:
        for arr in arrays:
            arr *= scale
    return KfcWeights(head.factors + rest, head.bias)


def lowrank_init(m: FloatArray, rank: int) -> tuple[FloatArray, FloatArray]:
    """Split a dense layer into two consecutive layers by truncated SVD.

    Args:
        m (array): weights of shape (in_dim, out_dim).
        rank (int): inner width, 1 <= rank <= min(in_dim, out_dim).

    Returns:
        tuple[array, array]: left = U D^(1/2) of shape (in_dim, rank) and
            right = D^(1/2) V^T of shape (rank, out_dim), so left @ right is the best
            rank-r approximation of m.
    """
    m = as_matrix(m)
    if not 1 <= rank <= min(m.shape):
        raise ArgumentError(f"rank must be in [1, {min(m.shape)}], got {rank}")
    svd = svd_truncated(m, rank)
    root = np.sqrt(svd.s)
    return svd.u * root, (svd.v * root).T


def lowrank_layers(
    m: FloatArray, bias: FloatArray, rank: int
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """Weights and biases of the LowRank-N replacement (dense in -> N without
    activation, then dense N -> out carrying the original bias).
    """
    left, right = lowrank_init(m, rank)
    return left, np.zeros(rank), right, np.asarray(bias, dtype=np.float64).copy()
