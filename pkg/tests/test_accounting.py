import pytest

from kron_fc import kfc
from kron_fc.accounting import (
    MNIST_CONV_PARAMS,
    SVHN_CONV_PARAMS,
    chinese_table,
    kfc_rank_params,
    layer_params,
    mnist_table,
    model_params,
    replaced_layer_params,
    svhn_table,
)
from kron_fc.presets import build_model
from kron_fc.train import TrainConfig
from kron_fc.utils import reduction


def by_method(rows):
    return {row.method: row for row in rows}


def test_conv_params():
    assert MNIST_CONV_PARAMS == 22946
    assert SVHN_CONV_PARAMS == 558774


def test_mnist_table():
    rows = by_method(mnist_table())
    assert list(rows) == ["Baseline", "Cut-96", "LowRank-96", "KFC-II", "KFC-Combined"]
    layer = {method: row.layer_params for method, row in rows.items()}
    assert layer == {
        "Baseline": 73984,
        "Cut-96": 27744,
        "LowRank-96": 52576,
        "KFC-II": 2084,
        "KFC-Combined": 26672,
    }
    assert rows["Baseline"].model_params == 99500
    assert rows["KFC-II"].model_params == 2084 + 22946 + 2570
    assert rows["Cut-96"].model_params == 27744 + 22946 + 970
    assert round(reduction(2084, 73984), 1) == 97.2


def test_svhn_table():
    rows = by_method(svhn_table())
    layer = {method: row.layer_params for method, row in rows.items()}
    assert layer == {
        "Baseline": 1638656,
        "Cut-128": 819328,
        "Cut-64": 409664,
        "LowRank-128": 852352,
        "LowRank-64": 426304,
        "KFC-II": 16484,
        "KFC-Combined": 344184,
        "KFC-Rank10": 164340,
    }
    assert rows["Baseline"].model_params == 2_200_000
    assert round(reduction(16484, 1638656), 1) == 99.0


def test_kfc_rank_params():
    assert kfc_rank_params((256, 5, 5), (64, 2), 10) == 164340
    assert kfc_rank_params((32, 3, 3), (64, 4), 1) == 2084


def test_chinese_table():
    table = chinese_table().set_index("method")
    assert list(table.index) == [
        "Baseline",
        "KFC-II",
        "KFC-KFCM-rank1",
        "KFC-KFCM-rank10",
    ]
    assert table.loc["Baseline", "fc1_params"] == 9216 * 1536 + 1536
    assert table.loc["Baseline", "fc2_params"] == 1536 * 6400 + 6400
    assert table.loc["KFC-II", "fc1_params"] == 256 * 384 + 36 * 4
    assert table.loc["KFC-II", "fc2_reduction"] == 0
    assert table.loc["KFC-KFCM-rank1", "fc1_params"] == 256 * 384 + 6 * 2 + 6 * 2
    # fc2 as KFCM with C1 = 48, K1 = 80
    assert table.loc["KFC-KFCM-rank1", "fc2_params"] == 48 * 80 + 32 * 80
    assert table.loc["KFC-KFCM-rank10", "fc2_params"] == 10 * 6400
    assert (table.total_params == table.fc1_params + table.fc2_params).all()
    assert table.loc["KFC-KFCM-rank1", "total_reduction"] > 99


@pytest.mark.parametrize(
    "model, replaced, total",
    [
        ("mnist-mlp-baseline", 200960, 203530),
        ("mnist-mlp-kfc2", 1220, 3790),
        ("mnist-mlp-kfc-combined", 29920, 32490),
        ("mnist-mlp-kfcm", 896, 3466),
        ("mnist-mlp-cut96", 75360, 76330),
        ("mnist-mlp-lowrank96", 100192, 102762),
    ],
)
def test_preset_params(model, replaced, total):
    built = build_model(TrainConfig(model=model))
    assert replaced_layer_params(built) == replaced
    assert model_params(built) == total


def test_layer_params_counts_kfc_factors_only():
    model = build_model(TrainConfig(model="mnist-mlp-kfc2"))
    fc1 = model["fc1"]
    assert layer_params(fc1) == kfc.count_params(fc1.spec) == 1220
    assert sum(arr.size for arr in fc1.params()) == 1220 + 256
    assert layer_params(model["fc2"]) == 2570

    with pytest.raises(KeyError, match="model has no layer 'fc9'"):
        replaced_layer_params(model, "fc9")
