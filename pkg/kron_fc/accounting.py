"""Parameter accounting of trained models and of the published comparison tables.

Counting rule used throughout: dense layers (including the Cut-N and LowRank-N
replacements) count weights plus bias, KFC layers count their factor entries only.
This reproduces the published layer reductions, e.g. 2084 factors against a
288x256 dense layer with bias (73984) is a 97.2% reduction.
"""
from __future__ import annotations

import math
from typing import Any

import pandas as pd

from kron_fc import kfc
from kron_fc.formats import ReportRow
from kron_fc.train import KfcLayer, Model
from kron_fc.utils import reduction


N_CLASSES = 10
# Parameters outside the fully-connected layer and the softmax head, inferred from
# the published baseline totals (99.5K for MNIST, 2.20M for SVHN).
MNIST_CONV_PARAMS = 99_500 - kfc.dense_params(288, 256) - kfc.dense_params(256, 10)
SVHN_CONV_PARAMS = 2_200_000 - kfc.dense_params(6400, 256) - kfc.dense_params(256, 10)


def layer_params(layer: Any) -> int:
    """Parameters of one layer under the counting rule above."""
    if isinstance(layer, KfcLayer):
        return kfc.count_params(layer.spec)
    return sum(arr.size for arr in layer.params())


def model_params(model: Model) -> int:
    return sum(layer_params(layer) for _, layer in model.layers)


def replaced_layer_params(model: Model, name: str = "fc1") -> int:
    """Parameters of the layer `name` or of the layers that replace it (`name`
    followed by a single letter, like fc1a and fc1b of a LowRank split).
    """
    matched = [
        layer
        for layer_name, layer in model.layers
        if layer_name == name
        or (layer_name[:-1] == name and layer_name[-1].isalpha())
    ]
    if not matched:
        raise KeyError(f"model has no layer {name!r}")
    return sum(layer_params(layer) for layer in matched)


def kfc_rank_params(
    dims: tuple[int, int, int], outs: tuple[int, int], rank: int
) -> int:
    """Formulation II factor count rank * (C*K1 + H*W*K2), evaluated without
    requiring K1*K2 to match a layer width.
    """
    chans, height, width = dims
    return rank * (chans * outs[0] + height * width * outs[1])


def _fc_table(
    dims: tuple[int, int, int],
    hidden: int,
    conv_params: int,
    cut: tuple[int, ...],
    lowrank: tuple[int, ...],
    extra: list[tuple[str, int]],
) -> list[ReportRow]:
    in_dim = math.prod(dims)
    head = kfc.dense_params(hidden, N_CLASSES)

    def row(method: str, layer: int, head_params: int = head) -> ReportRow:
        return ReportRow(method, layer, layer + conv_params + head_params)

    rows = [row("Baseline", kfc.dense_params(in_dim, hidden))]
    rows += [
        row(f"Cut-{n}", kfc.cut_params(in_dim, n), kfc.dense_params(n, N_CLASSES))
        for n in cut
    ]
    rows += [
        row(f"LowRank-{n}", kfc.lowrank_params(in_dim, hidden, n)) for n in lowrank
    ]
    rows.append(
        row(
            "KFC-II",
            kfc.count_params(kfc.make_spec_formulation("II", (*dims, hidden), (64, 4))),
        )
    )
    combined = kfc.make_spec_combined(
        (*dims, hidden), [("II", (64, 4), 1), ("III", (128, 2), 1), ("IV", (128, 2), 1)]
    )
    rows.append(row("KFC-Combined", kfc.count_params(combined)))
    rows += [row(method, count) for method, count in extra]
    return rows


def mnist_table() -> list[ReportRow]:
    """MNIST comparison: FC layer with (32, 3, 3) input and 256 outputs."""
    return _fc_table((32, 3, 3), 256, MNIST_CONV_PARAMS, (96,), (96,), [])


def svhn_table() -> list[ReportRow]:
    """SVHN comparison: FC layer with (256, 5, 5) input and 256 outputs.

    KFC-Rank10 uses the published factor widths (K1, K2) = (64, 2), counted as
    10 * (256*64 + 25*2) = 164340.
    """
    rank10 = kfc_rank_params((256, 5, 5), (64, 2), 10)
    return _fc_table(
        (256, 5, 5),
        256,
        SVHN_CONV_PARAMS,
        (128, 64),
        (128, 64),
        [("KFC-Rank10", rank10)],
    )


def chinese_table(
    fc1_input: tuple[int, int, int] = (256, 6, 6),
    fc1_out: int = 1536,
    fc2_out: int = 6400,
    fc1_outs: tuple[int, int] = (384, 4),
    fc1_outs_3: tuple[int, int, int] = (384, 2, 2),
) -> pd.DataFrame:
    """Two-FC network: fc1 on a tensor input, fc2 on fc1's matrix output.

    Only the hidden sizes are published (1536 and "more than 6000"), so the fc1
    input shape and fc2 width are arguments. KFC-II replaces fc1 only; the KFCM
    rows replace fc1 by formulation I and fc2 by KFCM (C1 = 48, K1 = 80 for
    1536 -> 6400) at rank 1 and 10.

    Returns:
        DataFrame: per method the parameters and % reduction of both layers and of
            their total.
    """
    chans, height, width = fc1_input
    base1 = kfc.dense_params(chans * height * width, fc1_out)
    base2 = kfc.dense_params(fc1_out, fc2_out)

    def fc1(tag: str, outs: tuple[int, ...], rank: int) -> int:
        dims = (chans, height, width, fc1_out)
        spec = kfc.make_spec_formulation(tag, dims, outs, rank)
        return kfc.count_params(spec)

    def fc2(rank: int) -> int:
        return kfc.count_params(kfc.make_spec_kfcm(fc1_out, fc2_out, rank=rank))

    rows = [
        ("Baseline", base1, base2),
        ("KFC-II", fc1("II", fc1_outs, 1), base2),
        ("KFC-KFCM-rank1", fc1("I", fc1_outs_3, 1), fc2(1)),
        ("KFC-KFCM-rank10", fc1("I", fc1_outs_3, 10), fc2(10)),
    ]
    return pd.DataFrame(
        [
            {
                "method": method,
                "fc1_params": p1,
                "fc1_reduction": round(reduction(p1, base1), 1),
                "fc2_params": p2,
                "fc2_reduction": round(reduction(p2, base2), 1),
                "total_params": p1 + p2,
                "total_reduction": round(reduction(p1 + p2, base1 + base2), 1),
            }
            for method, p1, p2 in rows
        ]
    )
