import os

import numpy as np
import pytest

from kron_fc import ROOT, __version__, cli, kfc
from kron_fc.accounting import replaced_layer_params
from kron_fc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from kron_fc.formats import load_checkpoint, save_checkpoint
from kron_fc.linalg import Rng
from kron_fc.presets import build_model
from kron_fc.train import AbsTanh, Dense, Model, TrainConfig, evaluate, train

from . import (
    MNIST_DIR,
    blob_classifier,
    blobs,
    flip_after,
    random_weights,
    write_fake_mnist,
)


FAST_CONFIG = """
model = {model}
epochs = 1
batch_size = 4
validation_size = 2
lr = 1e-3
"""


def write_config(tmp_path, model="mnist-mlp-kfc2", extra=""):
    path = tmp_path / f"{model}.cfg"
    path.write_text(FAST_CONFIG.format(model=model) + extra)
    return str(path)


@pytest.fixture
def kron_baseline(tmp_path):
    """Baseline checkpoint whose fc1 is an exact KFC-II (64, 4) rank-1 matrix."""
    model = build_model(TrainConfig())
    spec = kfc.make_spec_formulation("II", (16, 7, 7, 256), (64, 4))
    weights = random_weights(spec, np.random.default_rng(0))
    model["fc1"].weight[...] = kfc.materialize(spec, weights)
    path = str(tmp_path / "baseline.kfc")
    meta = {"method": "mnist-mlp-baseline", "seed": 1, "test_error": 0.5}
    save_checkpoint(path, model, meta)
    return path


@pytest.fixture
def tiny_checkpoint(tmp_path):
    rng = Rng(3)
    layers = [
        ("fc1", Dense.init(12, 6, rng)),
        ("act1", AbsTanh()),
        ("fc2", Dense.init(6, 3, rng)),
    ]
    model = Model(layers, (3, 2, 2))
    for arr in model.params():
        arr += np.random.default_rng(4).normal(size=arr.shape)
    path = str(tmp_path / "tiny.kfc")
    save_checkpoint(path, model, {"method": "tiny"})
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["--version"])
    assert exc_info.value.code == 0
    assert capsys.readouterr().out.strip() == __version__


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["shrink"],
        ["compress", "--layer", "fc1", "--formulation", "II", "--out", "x.kfc"],
        ["compress", "--in", "a", "--layer", "fc1", "--formulation", "V"],
        ["eval", "--ckpt", "a.kfc", "--data", "d", "--workers", "0"],
        ["report", "--published", "cifar"],
    ],
)
def test_argparse_errors_exit_64(argv, capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(argv)
    assert exc_info.value.code == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "flags, match",
    [
        (["--formulation", "II", "--k1", "64"], "formulation II requires --k2"),
        (["--formulation", "KFCM", "--k2", "4"], "KFCM takes --c1 and --k1 only"),
        (["--formulation", "III", "--k1", "2", "--k2", "2", "--c1", "4"], "--c1"),
        (["--formulation", "I", "--k1", "2", "--k2", "2"], "--k3 is required"),
    ],
)
def test_compress_usage_errors_touch_nothing(tmp_path, capsys, flags, match):
    out = tmp_path / "out.kfc"
    argv = ["compress", "--in", str(tmp_path / "missing.kfc"), "--layer", "fc1"]
    assert main(argv + flags + ["--out", str(out)]) == EXIT_USAGE
    assert match in capsys.readouterr().err
    assert os.listdir(tmp_path) == []


def test_compress_missing_out_dir(tmp_path, capsys):
    argv = ["compress", "--in", "x.kfc", "--layer", "fc1", "--formulation", "KFCM"]
    out = str(tmp_path / "nowhere" / "out.kfc")
    assert main(argv + ["--out", out]) == EXIT_USAGE
    assert "does not exist" in capsys.readouterr().err


def test_compress_exact_kronecker(tmp_path, kron_baseline, capsys):
    out = str(tmp_path / "kfc2.kfc")
    argv = ["compress", "--in", kron_baseline, "--layer", "fc1"]
    flags = ["--formulation", "II", "--k1", "64", "--k2", "4", "--out", out]
    assert main(argv + flags) == EXIT_OK

    layer, params, residual = capsys.readouterr().out.splitlines()
    assert layer.startswith("layer fc1: dense 784x256 -> kfc in=16x7x7 out=256")
    assert params == "params 201.0K -> 1.5K (factors 1.2K, reduction 99.4%)"
    assert float(residual.split()[1]) < 1e-9

    model, meta = load_checkpoint(out)
    assert model["fc1"].kind == "kfc"
    assert meta["method"] == "KFC-II-rank1"
    assert meta["compressed_layer"] == "fc1"
    assert meta["seed"] == 1 and "test_error" not in meta

    # the compressed model has the layout of the kfc2 preset, so it can be finetuned
    expected = build_model(TrainConfig(model="mnist-mlp-kfc2")).topology()
    assert model.topology() == expected


def test_compress_full_rank_and_kfcm(tmp_path, tiny_checkpoint, capsys):
    out = str(tmp_path / "full.kfc")
    argv = ["compress", "--in", tiny_checkpoint, "--layer", "fc1", "--out", out]
    flags = ["--formulation", "II", "--k1", "3", "--k2", "2", "--rank", "full"]
    assert main(argv + flags) == EXIT_OK
    residual = capsys.readouterr().out.splitlines()[-1]
    assert float(residual.split()[1]) < 1e-9
    model, meta = load_checkpoint(out)
    # rearranged matrix of II (3, 3) x (4, 2) is 9 x 8
    assert model["fc1"].spec.total_rank == 8 and meta["method"] == "KFC-II-rank8"

    argv = ["compress", "--in", tiny_checkpoint, "--layer", "fc2", "--out", out]
    assert main(argv + ["--formulation", "KFCM", "--c1", "2", "--k1", "3"]) == 0
    assert "dense 6x3 -> kfc in=6 out=3" in capsys.readouterr().out


@pytest.mark.parametrize(
    "layer, flags, match",
    [
        ("fc9", ["--formulation", "KFCM"], "layer 'fc9' not found"),
        ("act1", ["--formulation", "KFCM"], "layer 'act1' is abs_tanh, not dense"),
        ("fc2", ["--formulation", "II", "--k1", "3", "--k2", "1"], "--input-shape"),
        ("fc1", ["--formulation", "KFCM", "--input-shape", "2x2x2"], "12 inputs"),
    ],
)
def test_compress_runtime_errors(
    tmp_path, tiny_checkpoint, capsys, layer, flags, match
):
    out = str(tmp_path / "out.kfc")
    argv = ["compress", "--in", tiny_checkpoint, "--layer", layer, "--out", out]
    assert main(argv + flags) == EXIT_RUNTIME
    assert match in capsys.readouterr().err
    assert not os.path.exists(out)


def test_compress_missing_checkpoint(tmp_path, capsys):
    argv = ["compress", "--in", str(tmp_path / "missing.kfc"), "--layer", "fc1"]
    out = str(tmp_path / "out.kfc")
    assert main(argv + ["--formulation", "KFCM", "--out", out]) == EXIT_RUNTIME
    assert "missing.kfc" in capsys.readouterr().err


def test_report_published_tables(capsys):
    assert main(["report", "--published", "mnist"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "KFC-II" in text and "2.1K (97.2%)" in text

    assert main(["report", "--published", "svhn", "--format", "tsv"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("KFC-Rank10\t164340\t") for line in lines)

    assert main(["report", "--published", "chinese"]) == EXIT_OK
    assert "KFC-KFCM-rank10" in capsys.readouterr().out


def test_report_usage_errors(tmp_path, capsys):
    assert main(["report"]) == EXIT_USAGE
    assert "needs --ckpt, --baseline or --published" in capsys.readouterr().err
    assert main(["report", "--published", "mnist", "--ckpt", "a.kfc"]) == EXIT_USAGE


def test_report_checkpoints(tmp_path, kron_baseline, capsys):
    out = str(tmp_path / "kfc2.kfc")
    argv = ["compress", "--in", kron_baseline, "--layer", "fc1", "--out", out]
    assert main(argv + ["--formulation", "II", "--k1", "64", "--k2", "4"]) == 0
    capsys.readouterr()

    argv = ["report", "--baseline", kron_baseline, "--ckpt", out, "--format", "tsv"]
    assert main(argv) == EXIT_OK
    _, base, compressed = capsys.readouterr().out.splitlines()
    assert base == "mnist-mlp-baseline\t200960\t0\t203530\t0\t0.5"
    assert compressed.startswith("KFC-II-rank1\t1220\t99.4\t3790\t98.1\t")


def test_selftest(capsys):
    assert main(["selftest", "--seed", "7"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("kron identities: pass")
    assert lines[-1].startswith("OK (") and lines[-1].endswith(" checks)")


def test_selftest_seed_sources(monkeypatch, capsys):
    seeds = []
    monkeypatch.setattr(
        cli, "run_selftest", lambda emit, seed: seeds.append(seed) or True
    )
    monkeypatch.delenv("KFC_SEED", raising=False)
    assert main(["selftest"]) == EXIT_OK
    monkeypatch.setenv("KFC_SEED", "11")
    assert main(["selftest"]) == EXIT_OK
    assert main(["selftest", "--seed", "3"]) == EXIT_OK
    assert seeds == [cli.SELFTEST_SEED, 11, 3]

    monkeypatch.setenv("KFC_SEED", "abc")
    assert main(["selftest"]) == EXIT_USAGE
    assert "KFC_SEED must be an integer" in capsys.readouterr().err


def test_train_eval_finetune(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("KFC_SEED", raising=False)
    data = tmp_path / "mnist"
    data.mkdir()
    write_fake_mnist(data)
    config = write_config(tmp_path)
    trained = str(tmp_path / "kfc2.kfc")

    argv = ["train", "--config", config, "--data", str(data), "--out", trained]
    assert main(argv) == EXIT_OK
    first, last = capsys.readouterr().out.splitlines()
    assert first.startswith("epoch 1 train_loss ")
    assert last.startswith("best_epoch 1 val_error ")
    model, meta = load_checkpoint(trained)
    assert meta["method"] == "mnist-mlp-kfc2" and meta["preset_version"] == 1
    assert (meta["seed"], meta["epoch"]) == (1, 1)

    assert main(["eval", "--ckpt", trained, "--data", str(data)]) == EXIT_OK
    key, value = capsys.readouterr().out.split()
    assert key == "test_error"
    # 5 fake test images
    assert float(value) * 5 == pytest.approx(round(float(value) * 5))
    assert float(value) == pytest.approx(meta["test_error"], abs=1e-4)

    tuned = str(tmp_path / "tuned.kfc")
    argv = ["finetune", "--from", trained, "--config", config, "--data", str(data)]
    assert main(argv + ["--out", tuned]) == EXIT_OK
    _, tuned_meta = load_checkpoint(tuned)
    assert tuned_meta["method"] == "mnist-mlp-kfc2"
    assert tuned_meta["finetuned_from"] == trained

    wrong = write_config(tmp_path, "mnist-mlp-baseline")
    argv = ["finetune", "--from", trained, "--config", wrong, "--data", str(data)]
    assert main(argv + ["--out", tuned]) == EXIT_RUNTIME
    assert "topology mismatch" in capsys.readouterr().err


def test_train_is_deterministic_and_seeded(tmp_path, monkeypatch):
    data = tmp_path / "mnist"
    data.mkdir()
    write_fake_mnist(data)
    config = write_config(tmp_path, "mnist-mlp-kfcm")

    def run(name, *extra):
        out = str(tmp_path / name)
        argv = ["train", "--config", config, "--data", str(data), "--out", out]
        assert main(argv + list(extra)) == EXIT_OK
        with open(out, "rb") as file:
            return file.read(), load_checkpoint(out)[1]

    monkeypatch.delenv("KFC_SEED", raising=False)
    first, meta = run("a.kfc")
    again, _ = run("b.kfc")
    assert first == again and meta["seed"] == 1

    monkeypatch.setenv("KFC_SEED", "5")
    other, meta = run("c.kfc")
    assert other != first and meta["seed"] == 5
    _, meta = run("d.kfc", "--seed", "6")
    assert meta["seed"] == 6


@pytest.mark.parametrize(
    "text, code, match",
    [
        ("epochs = 1\nlearnin_rate = 1", EXIT_USAGE, "line 2: unknown key"),
        ("model = mnist-mlp-kfc2\nk1 = 5", EXIT_RUNTIME, "multiply to 20"),
        ("epochs = 1\npatch = 0", EXIT_USAGE, "line 2: bad value for patch"),
    ],
)
def test_train_config_errors(tmp_path, capsys, text, code, match):
    data = tmp_path / "mnist"
    data.mkdir()
    write_fake_mnist(data)
    config = tmp_path / "bad.cfg"
    config.write_text(text)
    out = str(tmp_path / "out.kfc")
    argv = ["train", "--config", str(config), "--data", str(data), "--out", out]
    assert main(argv) == code
    assert match in capsys.readouterr().err
    assert not os.path.exists(out)


def test_train_missing_inputs(tmp_path, capsys):
    out = str(tmp_path / "out.kfc")
    argv = ["train", "--config", str(tmp_path / "none.cfg"), "--out", out]
    assert main(argv) == EXIT_USAGE
    assert "cannot read config" in capsys.readouterr().err

    config = write_config(tmp_path)
    argv = ["train", "--config", config, "--data", str(tmp_path), "--out", out]
    assert main(argv) == EXIT_RUNTIME
    assert "MNIST files missing" in capsys.readouterr().err


def test_fit_reports_snapshot_test_error(monkeypatch, capsys):
    model = blob_classifier()
    splits = blobs(100, 0), blobs(200, 1), blobs(200, 2)
    monkeypatch.setattr(cli, "load_mnist", lambda *args: splits)

    def train_then_flip(model, train_set, val_set, config, rng, on_epoch, progress):
        flip = flip_after(model, 2)

        def both(*args):
            on_epoch(*args)
            flip(*args)

        return train(model, train_set, val_set, config, rng, both, progress)

    monkeypatch.setattr(cli, "train", train_then_flip)
    config = TrainConfig(optimizer="sgd", lr=1e-6, weight_decay=0, epochs=4)
    meta = cli._fit(model, config, Rng(1), progress=False)

    assert meta["epoch"] in (1, 2)
    assert meta["test_error"] < 0.05
    assert meta["test_error"] == evaluate(model, splits[2])
    last = capsys.readouterr().out.splitlines()[-1]
    assert last.startswith(f"best_epoch {meta['epoch']} val_error ")


real_mnist_only = pytest.mark.skipif(
    not os.path.isdir(MNIST_DIR), reason="MNIST not downloaded"
)


def train_shipped(preset, out):
    config = f"{ROOT}/configs/{preset}.cfg"
    argv = ["train", "--config", config, "--data", MNIST_DIR, "--out", str(out)]
    assert main(argv) == EXIT_OK


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    """Checkpoint paths of the shipped baseline and kfc2 configs, 10 epochs each."""
    runs = tmp_path_factory.mktemp("mnist")
    train_shipped("mnist-mlp-baseline", runs / "baseline.kfc")
    train_shipped("mnist-mlp-kfc2", runs / "kfc2.kfc")
    return runs


@pytest.mark.slow
@real_mnist_only
def test_mnist_dense_baseline(mnist_runs):
    _, meta = load_checkpoint(str(mnist_runs / "baseline.kfc"))
    assert meta["test_error"] <= 0.03


@pytest.mark.slow
@real_mnist_only
def test_mnist_kfc2_close_to_baseline(mnist_runs):
    baseline, base_meta = load_checkpoint(str(mnist_runs / "baseline.kfc"))
    kfc2, meta = load_checkpoint(str(mnist_runs / "kfc2.kfc"))
    assert meta["test_error"] <= base_meta["test_error"] + 0.015
    dense, factored = replaced_layer_params(baseline), replaced_layer_params(kfc2)
    assert factored <= 0.05 * dense


@pytest.mark.slow
@real_mnist_only
def test_mnist_compress_then_finetune(mnist_runs):
    base_path = str(mnist_runs / "baseline.kfc")
    compressed = str(mnist_runs / "rank10.kfc")
    argv = ["compress", "--in", base_path, "--layer", "fc1", "--out", compressed]
    flags = ["--formulation", "II", "--k1", "64", "--k2", "4", "--rank", "10"]
    assert main(argv + flags) == EXIT_OK

    tuned = str(mnist_runs / "rank10-tuned.kfc")
    config = f"{ROOT}/configs/finetune-kfc2-rank10.cfg"
    argv = ["finetune", "--from", compressed, "--config", config, "--data", MNIST_DIR]
    assert main(argv + ["--out", tuned]) == EXIT_OK
    _, meta = load_checkpoint(tuned)
    _, base_meta = load_checkpoint(base_path)
    assert meta["method"] == "KFC-II-rank10" and meta["epoch"] <= 2
    assert meta["test_error"] <= base_meta["test_error"] + 0.01


@pytest.mark.slow
@real_mnist_only
def test_mnist_runs_are_bit_identical(mnist_runs, tmp_path):
    for name in ("baseline", "kfc2"):
        train_shipped(f"mnist-mlp-{name}", tmp_path / f"{name}.kfc")
        again = (tmp_path / f"{name}.kfc").read_bytes()
        assert again == (mnist_runs / f"{name}.kfc").read_bytes()
