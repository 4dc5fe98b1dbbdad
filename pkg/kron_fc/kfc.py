"""Kronecker Fully-Connected layers.

A KFC layer replaces the dense weight matrix W (in_dim x K) of a fully-connected layer
by a sum of Kronecker products of small factors,

    W = sum_j sum_i A_ij (x) B_ij [(x) C_ij],

and evaluates x @ W one term at a time as the small-matrix chain A^T X B without ever
building W. Flattened tensor inputs use the index j = c*H*W + h*W + w.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from kron_fc.linalg import Rng, kron, matmul
from kron_fc.utils import ArgumentError, FloatArray, ShapeError, check_capacity


logger = logging.getLogger(__name__)

Formulation = Literal["I", "II", "III", "IV", "KFCM"]
FORMULATIONS: tuple[str, ...] = ("I", "II", "III", "IV", "KFCM")
TENSOR_FORMULATIONS: tuple[str, ...] = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class FactorShape:
    """Shapes of the Kronecker factors of one term: A is rows_a x cols_a, B is
    rows_b x cols_b and the optional third factor C is rows_c x cols_c.
    """

    rows_a: int
    cols_a: int
    rows_b: int
    cols_b: int
    rows_c: int | None = None
    cols_c: int | None = None

    def __post_init__(self) -> None:
        if (self.rows_c is None) != (self.cols_c is None):
            raise ArgumentError("third factor needs both rows_c and cols_c")
        if min(d for d in self.dims_flat if d is not None) < 1:
            raise ArgumentError(f"factor dims must be positive, got {self}")

    @property
    def dims_flat(self) -> tuple[int | None, ...]:
        return (
            self.rows_a,
            self.cols_a,
            self.rows_b,
            self.cols_b,
            self.rows_c,
            self.cols_c,
        )

    @property
    def factors(self) -> list[tuple[int, int]]:
        """(rows, cols) of each factor in Kronecker order."""
        out = [(self.rows_a, self.cols_a), (self.rows_b, self.cols_b)]
        if self.rows_c is not None and self.cols_c is not None:
            out.append((self.rows_c, self.cols_c))
        return out

    @property
    def in_dim(self) -> int:
        return math.prod(r for r, _ in self.factors)

    @property
    def out_dim(self) -> int:
        return math.prod(c for _, c in self.factors)

    @property
    def params(self) -> int:
        return sum(r * c for r, c in self.factors)

    def __str__(self) -> str:
        return "*".join(f"{r}x{c}" for r, c in self.factors)


@dataclass(frozen=True)
class KfcGroup:
    """One shape group of the general KFC form: `rank` terms sharing `shape`."""

    shape: FactorShape
    rank: int = 1
    formulation: str = "KFCM"

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ArgumentError(f"rank must be >= 1, got {self.rank}")
        if self.formulation not in FORMULATIONS:
            raise ArgumentError(
                f"unknown formulation {self.formulation!r}, valid tags: "
                + ", ".join(FORMULATIONS)
            )
        if (self.formulation == "I") != (len(self.shape.factors) == 3):
            raise ShapeError("formulation I needs exactly three factors, others two")


@dataclass(frozen=True)
class KfcSpec:
    """Structural description of a KFC layer.

    Attributes:
        input_shape (tuple[int, ...]): (C, H, W) for tensor input or (C,) for matrix
            input.
        out_dim (int): K, the number of outputs.
        groups (tuple[KfcGroup, ...]): shape groups whose outputs are summed.
        pad_in (int): zero features appended to the input (matrix input only).
        pad_out (int): dummy outputs computed and then dropped.
    """

    input_shape: tuple[int, ...]
    out_dim: int
    groups: tuple[KfcGroup, ...]
    pad_in: int = 0
    pad_out: int = 0
    _perm: np.ndarray | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) < 1:
            raise ArgumentError(f"invalid input shape {self.input_shape}")
        if self.out_dim < 1 or self.pad_in < 0 or self.pad_out < 0:
            raise ArgumentError("out_dim must be positive and padding non-negative")
        if not self.groups:
            raise ArgumentError("a KFC spec needs at least one group")
        if self.input_kind == "tensor" and self.pad_in:
            raise ArgumentError("input padding is only supported for matrix input")
        for group in self.groups:
            if group.shape.in_dim != self.padded_in:
                raise ShapeError(
                    f"group {group.formulation} {group.shape} has input product "
                    f"{group.shape.in_dim}, layer input is {self.padded_in}"
                )
            if group.shape.out_dim != self.padded_out:
                raise ShapeError(
                    f"group {group.formulation} {group.shape} has output product "
                    f"{group.shape.out_dim}, layer output is {self.padded_out}"
                )
            if group.formulation in TENSOR_FORMULATIONS and self.input_kind != "tensor":
                raise ShapeError(
                    f"formulation {group.formulation} needs a (C, H, W) tensor input"
                )
        if any(g.formulation == "IV" for g in self.groups):
            chans, height, width = self.input_shape
            perm = np.arange(self.in_dim).reshape(chans, height, width)
            object.__setattr__(self, "_perm", perm.transpose(0, 2, 1).reshape(-1))

    @property
    def input_kind(self) -> str:
        return "tensor" if len(self.input_shape) == 3 else "matrix"

    @property
    def in_dim(self) -> int:
        return math.prod(self.input_shape)

    @property
    def padded_in(self) -> int:
        return self.in_dim + self.pad_in

    @property
    def padded_out(self) -> int:
        return self.out_dim + self.pad_out

    @property
    def total_rank(self) -> int:
        return sum(g.rank for g in self.groups)

    def describe(self) -> str:
        """One-line text form, inverse of `KfcSpec.parse`."""
        groups = ",".join(f"{g.formulation}:{g.shape}@{g.rank}" for g in self.groups)
        shape = "x".join(map(str, self.input_shape))
        return (
            f"in={shape} out={self.out_dim} pad={self.pad_in}/{self.pad_out} "
            f"groups={groups}"
        )

    @classmethod
    def parse(cls, text: str) -> KfcSpec:
        fields = dict(tok.split("=", 1) for tok in text.split())
        try:
            input_shape = tuple(int(d) for d in fields["in"].split("x"))
            pad_in, pad_out = (int(p) for p in fields.get("pad", "0/0").split("/"))
            groups = []
            for token in fields["groups"].split(","):
                match = re.fullmatch(r"(\w+):([\dx*]+)@(\d+)", token)
                if match is None:
                    raise ValueError(f"bad group token {token!r}")
                tag, dims, rank = match.groups()
                flat = [int(d) for pair in dims.split("*") for d in pair.split("x")]
                groups.append(KfcGroup(FactorShape(*flat), int(rank), tag))
            return cls(input_shape, int(fields["out"]), tuple(groups), pad_in, pad_out)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, (ShapeError, ArgumentError)):
                raise
            raise ArgumentError(f"cannot parse KFC spec {text!r}: {exc}") from exc


@dataclass
class KfcWeights:
    """Trainable state of a KFC layer.

    `factors[j][f]` stacks factor f of all rank terms of group j into an array of shape
    (rank, rows, cols). `bias` has length K. Arrays are updated in place by optimizers.
    """

    factors: list[list[FloatArray]]
    bias: FloatArray

    def arrays(self) -> list[FloatArray]:
        return [arr for group in self.factors for arr in group] + [self.bias]

    def names(self) -> list[str]:
        letters = "abc"
        names = [
            f"g{j}.{letters[f]}"
            for j, group in enumerate(self.factors)
            for f in range(len(group))
        ]
        return names + ["bias"]

    def copy(self) -> KfcWeights:
        return KfcWeights(
            [[arr.copy() for arr in group] for group in self.factors], self.bias.copy()
        )

    def check(self, spec: KfcSpec) -> None:
        """Raise ShapeError unless the arrays match the spec exactly."""
        if len(self.factors) != len(spec.groups) or self.bias.shape != (spec.out_dim,):
            raise ShapeError("weights do not match the KFC spec")
        for group, arrays in zip(spec.groups, self.factors):
            expected = [(group.rank, r, c) for r, c in group.shape.factors]
            if [arr.shape for arr in arrays] != expected:
                raise ShapeError(
                    f"group {group.formulation} expects factor shapes {expected}, "
                    f"got {[arr.shape for arr in arrays]}"
                )


@dataclass(frozen=True)
class FlopReport:
    """Multiply-add and parameter counts of a KFC layer next to its dense original.
    Parameter counts exclude the K bias terms, which are reported in `bias`.
    """

    macs: int
    params: int
    dense_macs: int
    dense_params: int
    bias: int


def nearest_divisor(n: int) -> int:
    """Divisor of n closest to sqrt(n) on a log scale, ties going to the larger one.
    Equivalently the smallest divisor >= sqrt(n), so n // result is its partner below
    the square root.
    """
    if n < 1:
        raise ArgumentError(f"n must be positive, got {n}")
    root = math.isqrt(n)
    start = root if root * root == n else root + 1
    for div in range(start, n + 1):
        if n % div == 0:
            return div
    return n


def pad_dims(n: int) -> int:
    """Smallest m >= n having a proper divisor within a factor 2 of sqrt(m). Used to
    add dummy features or outputs to layers whose dimension is prime or awkward.
    """
    if n < 1:
        raise ArgumentError(f"n must be positive, got {n}")
    m = n
    while m > 1:
        div = nearest_divisor(m)
        if div < m and div <= 2 * math.sqrt(m):
            break
        m += 1
    return m


def _check_positive(**dims: int) -> None:
    for name, dim in dims.items():
        if dim < 1:
            raise ArgumentError(f"{name} must be positive, got {dim}")


def formulation_shape(
    tag: str, chans: int, height: int, width: int, outs: Sequence[int]
) -> FactorShape:
    """Factor shapes of formulations I-IV for a (C, H, W) input and output factors
    (K1, K2[, K3]).
    """
    if tag not in TENSOR_FORMULATIONS:
        raise ArgumentError(
            f"unknown formulation {tag!r}, valid tags: " + ", ".join(FORMULATIONS)
        )
    n_outs = 3 if tag == "I" else 2
    if len(outs) != n_outs:
        raise ArgumentError(
            f"formulation {tag} takes {n_outs} output factors, got {tuple(outs)}"
        )
    if tag == "I":
        return FactorShape(chans, outs[0], height, outs[1], width, outs[2])
    rows = {
        "II": (chans, height * width),
        "III": (chans * height, width),
        "IV": (chans * width, height),
    }[tag]
    return FactorShape(rows[0], outs[0], rows[1], outs[1])


def make_spec_combined(
    dims: tuple[int, int, int, int],
    groups: Sequence[tuple[str, Sequence[int], int]],
) -> KfcSpec:
    """Linear combination of formulation groups on one (C, H, W) -> K layer.

    Args:
        dims (tuple[int, int, int, int]): (C, H, W, K).
        groups (list[tuple[str, list[int], int]]): (tag, (K1, K2[, K3]), rank) per
            group, e.g. [("II", (64, 4), 1), ("III", (128, 2), 1)].

    Returns:
        KfcSpec: spec whose group outputs are summed.
    """
    chans, height, width, n_out = dims
    _check_positive(C=chans, H=height, W=width, K=n_out)
    built = []
    for tag, outs, rank in groups:
        if math.prod(outs) != n_out:
            raise ShapeError(
                f"formulation {tag} output factors {tuple(outs)} multiply to "
                f"{math.prod(outs)}, layer output is K={n_out}"
            )
        shape = formulation_shape(tag, chans, height, width, outs)
        built.append(KfcGroup(shape, rank, tag))
    return KfcSpec((chans, height, width), n_out, tuple(built))


def make_spec_formulation(
    tag: str,
    dims: tuple[int, int, int, int],
    factors_out: Sequence[int],
    rank: int = 1,
) -> KfcSpec:
    """Single-group KFC spec for formulation I, II, III or IV.

    Args:
        tag (str): "I" (C x K1, H x K2, W x K3), "II" (C x K1, HW x K2),
            "III" (CH x K1, W x K2) or "IV" (CW x K1, H x K2).
        dims (tuple[int, int, int, int]): (C, H, W, K).
        factors_out (list[int]): (K1, K2) or (K1, K2, K3) for formulation I.
        rank (int, optional): number of Kronecker terms. Defaults to 1.

    Returns:
        KfcSpec: the layer spec.
    """
    return make_spec_combined(dims, [(tag, factors_out, rank)])


def _pick_factor(n: int, given: int | None, name: str) -> int:
    if given is not None:
        if given < 1 or n % given:
            raise ShapeError(
                f"{name}={given} does not divide {n}; pad the dimension with "
                f"pad_dims({n}) = {pad_dims(n)} first"
            )
        return given
    div = nearest_divisor(n)
    if n > 1 and div == n:
        raise ShapeError(
            f"dimension {n} is prime and has no divisor near its square root; "
            f"pad it with pad_dims({n}) = {pad_dims(n)} first"
        )
    return div


def make_spec_kfcm(
    in_dim: int,
    out_dim: int,
    c1: int | None = None,
    k1: int | None = None,
    rank: int = 1,
    pad: bool = False,
) -> KfcSpec:
    """KFCM spec for a matrix input: W (C x K) ~ W1 (C1 x K1) (x) W2 (C/C1 x K/K1).

    Args:
        in_dim (int): C.
        out_dim (int): K.
        c1 (int, optional): C1. Defaults to the divisor of C nearest sqrt(C).
        k1 (int, optional): K1. Defaults to the divisor of K nearest sqrt(K).
        rank (int, optional): number of Kronecker terms. Defaults to 1.
        pad (bool, optional): Zero-pad C and K with `pad_dims` before factoring
            instead of raising for prime dimensions. Defaults to False.

    Returns:
        KfcSpec: the layer spec.
    """
    _check_positive(C=in_dim, K=out_dim)
    padded_in = pad_dims(in_dim) if pad else in_dim
    padded_out = pad_dims(out_dim) if pad else out_dim
    c1 = _pick_factor(padded_in, c1, "C1")
    k1 = _pick_factor(padded_out, k1, "K1")
    shape = FactorShape(c1, k1, padded_in // c1, padded_out // k1)
    return KfcSpec(
        (in_dim,),
        out_dim,
        (KfcGroup(shape, rank, "KFCM"),),
        pad_in=padded_in - in_dim,
        pad_out=padded_out - out_dim,
    )


def make_spec_general(
    in_dim: int, out_dim: int, groups: Sequence[tuple[FactorShape, int]]
) -> KfcSpec:
    """General multi-shape KFC spec on a matrix input: each group is a
    (FactorShape, rank) pair and all groups share the layer's input and output dims.
    """
    built = tuple(KfcGroup(shape, rank, "KFCM") for shape, rank in groups)
    return KfcSpec((in_dim,), out_dim, built)


def init_weights(spec: KfcSpec, rng: Rng) -> KfcWeights:
    """Uniform factor initialization matched to a Glorot-uniform dense layer.

    Each materialized weight is a sum of total_rank products of m_j independent
    factor entries, so factor entries get variance (v / total_rank)^(1 / m_j) with
    v = 2 / (fan_in + fan_out) the Glorot variance of the dense layer. Bias is zero.
    """
    dense_var = 2 / (spec.in_dim + spec.out_dim)
    factors = []
    for group in spec.groups:
        n_factors = len(group.shape.factors)
        var = (dense_var / spec.total_rank) ** (1 / n_factors)
        bound = math.sqrt(3 * var)
        factors.append(
            [
                rng.uniform(-bound, bound, (group.rank, r, c))
                for r, c in group.shape.factors
            ]
        )
    return KfcWeights(factors, np.zeros(spec.out_dim))


def materialize(spec: KfcSpec, weights: KfcWeights) -> FloatArray:
    """The full in_dim x K weight matrix sum_j sum_i A_ij (x) B_ij [(x) C_ij].

    Only meant as a test oracle and for exporting; forward never builds it.
    """
    weights.check(spec)
    check_capacity(spec.padded_in, spec.padded_out)
    full = np.zeros((spec.padded_in, spec.padded_out))
    for group, arrays in zip(spec.groups, weights.factors):
        term_sum = np.zeros_like(full)
        for i in range(group.rank):
            term = arrays[0][i]
            for arr in arrays[1:]:
                term = kron(term, arr[i])
            term_sum += term
        if group.formulation == "IV":
            unpermuted = np.empty_like(term_sum)
            unpermuted[spec._perm] = term_sum
            term_sum = unpermuted
        full += term_sum
    return full[: spec.in_dim, : spec.out_dim]


def _swap(arr: FloatArray) -> FloatArray:
    return np.swapaxes(arr, -1, -2)


def _padded_input(spec: KfcSpec, x: FloatArray) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(
            f"KFC layer expects input of shape (N, {spec.in_dim}), got {x.shape}"
        )
    if spec.pad_in:
        x = np.pad(x, ((0, 0), (0, spec.pad_in)))
    return x


def _group_forward(
    spec: KfcSpec, group: KfcGroup, arrays: list[FloatArray], x: FloatArray
) -> FloatArray:
    n_rows = len(x)
    if group.formulation == "IV":
        x = x[:, spec._perm]
    (rows_a, cols_a), (rows_b, _), *rest = group.shape.factors
    a, b = arrays[0], arrays[1]

    if not rest:
        xs = x.reshape(n_rows, 1, rows_a, rows_b)
        z = matmul(_swap(a)[None], xs)
        y = matmul(z, b[None])
        return y.sum(axis=1).reshape(n_rows, -1)

    (rows_c, _), c = rest[0], arrays[2]
    xs = x.reshape(n_rows, 1, rows_a, rows_b * rows_c)
    z = matmul(_swap(a)[None], xs).reshape(n_rows, group.rank, cols_a, rows_b, rows_c)
    t = matmul(_swap(b)[None, :, None], z)
    y = matmul(t, c[None, :, None])
    return y.sum(axis=1).reshape(n_rows, -1)


def forward(
    spec: KfcSpec,
    weights: KfcWeights,
    x: FloatArray,
    activation: Callable[[FloatArray], FloatArray] | None = None,
) -> FloatArray:
    """Factored forward pass y = h(x W + b) without materializing W.

    Per term the row x (length C1*C2) is read as a C1 x C2 matrix X and mapped to
    A^T X B, which costs K1*C2*(C1 + K2) multiply-adds instead of C1*C2*K1*K2.
    Formulation I applies the chain once more for its third factor; formulation IV
    first reorders the (c, h, w) flattening to (c, w, h). All group and rank outputs
    are summed before bias and activation.

    Args:
        spec (KfcSpec): layer structure.
        weights (KfcWeights): factors and bias.
        x (array): input of shape (N, in_dim).
        activation (callable, optional): elementwise activation. Defaults to None,
            i.e. identity.

    Returns:
        array: output of shape (N, K).
    """
    xp = _padded_input(spec, x)
    out = np.zeros((len(xp), spec.padded_out))
    for group, arrays in zip(spec.groups, weights.factors):
        out += _group_forward(spec, group, arrays, xp)
    out = out[:, : spec.out_dim] + weights.bias
    return activation(out) if activation is not None else out


def _bilinear_backward(
    x: FloatArray, a: FloatArray, b: FloatArray, g: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    # Y = A^T X B  =>  dX = A G B^T, dA = X B G^T, dB = X^T A G
    dx = matmul(matmul(a, g), _swap(b))
    da = matmul(matmul(x, b), _swap(g))
    db = matmul(matmul(_swap(x), a), g)
    return dx, da, db


def _group_backward(
    spec: KfcSpec,
    group: KfcGroup,
    arrays: list[FloatArray],
    x: FloatArray,
    grad_out: FloatArray,
) -> tuple[FloatArray, list[FloatArray]]:
    n_rows = len(x)
    if group.formulation == "IV":
        x = x[:, spec._perm]
    (rows_a, cols_a), (rows_b, cols_b), *rest = group.shape.factors
    a4 = arrays[0][None]

    if not rest:
        xs = x.reshape(n_rows, 1, rows_a, rows_b)
        g = grad_out.reshape(n_rows, 1, cols_a, cols_b)
        dx, da, db = _bilinear_backward(xs, a4, arrays[1][None], g)
        dx, grads = dx.sum(axis=1), [da.sum(axis=0), db.sum(axis=0)]
    else:
        (rows_c, cols_c) = rest[0]
        xs = x.reshape(n_rows, 1, rows_a, rows_b * rows_c)
        z = matmul(_swap(a4), xs)
        z5 = z.reshape(n_rows, group.rank, cols_a, rows_b, rows_c)
        g = grad_out.reshape(n_rows, 1, cols_a, cols_b, cols_c)
        dz, db, dc = _bilinear_backward(
            z5, arrays[1][None, :, None], arrays[2][None, :, None], g
        )
        dz = dz.reshape(z.shape)
        da = matmul(xs, _swap(dz)).sum(axis=0)
        dx = matmul(a4, dz).sum(axis=1)
        grads = [da, db.sum(axis=(0, 2)), dc.sum(axis=(0, 2))]

    dx = dx.reshape(n_rows, -1)
    if group.formulation == "IV":
        unpermuted = np.empty_like(dx)
        unpermuted[:, spec._perm] = dx
        dx = unpermuted
    return dx, grads


def backward(
    spec: KfcSpec,
    weights: KfcWeights,
    x: FloatArray,
    grad_out: FloatArray,
) -> tuple[KfcWeights, FloatArray, FloatArray]:
    """Gradients of a scalar loss through the pre-activation output of `forward`.

    Args:
        spec (KfcSpec): layer structure.
        weights (KfcWeights): factors and bias used in the forward pass.
        x (array): forward input of shape (N, in_dim).
        grad_out (array): dLoss/dy of shape (N, K), y taken before activation.

    Returns:
        tuple[KfcWeights, array, array]: factor gradients (with the bias gradient in
            their bias slot), input gradient of shape (N, in_dim) and bias gradient
            of shape (K,).
    """
    xp = _padded_input(spec, x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (len(xp), spec.out_dim):
        raise ShapeError(
            f"grad_out must have shape {(len(xp), spec.out_dim)}, got {grad_out.shape}"
        )
    g = np.pad(grad_out, ((0, 0), (0, spec.pad_out))) if spec.pad_out else grad_out

    grad_x = np.zeros_like(xp)
    grad_factors = []
    for group, arrays in zip(spec.groups, weights.factors):
        dx, grads = _group_backward(spec, group, arrays, xp, g)
        grad_x += dx
        grad_factors.append(grads)
    grad_b = grad_out.sum(axis=0)
    return KfcWeights(grad_factors, grad_b), grad_x[:, : spec.in_dim], grad_b


def count_params(spec: KfcSpec) -> int:
    """Trainable factor entries: sum over groups of rank * (sum of factor sizes).
    The K bias terms are not included.
    """
    return sum(group.rank * group.shape.params for group in spec.groups)


def _term_macs(shape: FactorShape) -> int:
    (rows_a, cols_a), (rows_b, cols_b), *rest = shape.factors
    if not rest:
        return cols_a * rows_b * (rows_a + cols_b)
    rows_c, cols_c = rest[0]
    return cols_a * (rows_a * rows_b * rows_c + cols_b * rows_c * (rows_b + cols_c))


def count_macs(spec: KfcSpec, batch: int = 1) -> FlopReport:
    """Exact multiply-add count of `forward` on `batch` rows next to the dense layer.

    A two-factor term costs N * K1 * C2 * (C1 + K2); a formulation I term costs
    N * K1 * (C*H*W + K2 * W * (H + K3)).
    """
    if batch < 1:
        raise ArgumentError(f"batch must be >= 1, got {batch}")
    macs = batch * sum(g.rank * _term_macs(g.shape) for g in spec.groups)
    dense_params = spec.in_dim * spec.out_dim
    return FlopReport(
        macs=macs,
        params=count_params(spec),
        dense_macs=batch * dense_params,
        dense_params=dense_params,
        bias=spec.out_dim,
    )


def dense_params(in_dim: int, out_dim: int, bias: bool = True) -> int:
    """Parameters of a dense layer."""
    return in_dim * out_dim + (out_dim if bias else 0)


def cut_params(in_dim: int, hidden: int) -> int:
    """Parameters of the Cut-N baseline: the dense layer narrowed to N outputs."""
    return dense_params(in_dim, hidden)


def lowrank_params(in_dim: int, out_dim: int, rank: int) -> int:
    """Parameters of the LowRank-N baseline: two consecutive dense layers
    in_dim -> rank -> out_dim, each with its own bias.
    """
    return dense_params(in_dim, rank) + dense_params(rank, out_dim)
