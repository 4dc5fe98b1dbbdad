import gzip
import os

import numpy as np

from kron_fc import ROOT, kfc
from kron_fc.formats import MNIST_FILES, Dataset, write_idx
from kron_fc.train import Dense, Model


MNIST_DIR = os.environ.get("KFC_MNIST_DIR", f"{ROOT}/data/mnist")


def random_spec(rng: np.random.Generator) -> kfc.KfcSpec:
    """Random small KFC spec covering every formulation and combined groups."""
    kind = rng.choice(["I", "II", "III", "IV", "KFCM", "combined"])
    rank = int(rng.integers(1, 4))
    chans, height, width = (int(d) for d in rng.integers(1, 4, size=3))
    k1, k2, k3 = (int(d) for d in rng.integers(1, 4, size=3))
    if kind == "KFCM":
        c1, c2 = (int(d) for d in rng.integers(1, 6, size=2))
        return kfc.make_spec_kfcm(c1 * c2, k1 * k2, c1, k1, rank)
    dims = (chans, height, width, k1 * k2)
    if kind == "I":
        dims_i = (chans, height, width, k1 * k2 * k3)
        return kfc.make_spec_formulation("I", dims_i, (k1, k2, k3), rank)
    if kind == "combined":
        groups = [("II", (k1, k2), rank), ("III", (k2, k1), 1), ("IV", (k1, k2), 2)]
        return kfc.make_spec_combined(dims, groups)
    return kfc.make_spec_formulation(str(kind), dims, (k1, k2), rank)


def random_weights(
    spec: kfc.KfcSpec, rng: np.random.Generator
) -> kfc.KfcWeights:
    factors = [
        [rng.normal(size=(g.rank, r, c)) for r, c in g.shape.factors]
        for g in spec.groups
    ]
    return kfc.KfcWeights(factors, rng.normal(size=spec.out_dim))


def central_diff(loss, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of loss() w.r.t. every entry of arr, perturbed in place."""
    grad = np.zeros(arr.size)
    flat = arr.reshape(-1)
    for idx in range(flat.size):
        saved = flat[idx]
        flat[idx] = saved + eps
        up = loss()
        flat[idx] = saved - eps
        down = loss()
        flat[idx] = saved
        grad[idx] = (up - down) / (2 * eps)
    return grad.reshape(arr.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def write_fake_mnist(data_dir, n_train=12, n_test=5, gz=()):
    """Random 28x28 IDX files under MNIST's names; keys in gz are gzipped."""
    rng = np.random.default_rng(0)
    arrays = {
        "train_images": rng.integers(0, 256, size=(n_train, 28, 28)) / 255,
        "train_labels": rng.integers(0, 10, size=n_train),
        "test_images": rng.integers(0, 256, size=(n_test, 28, 28)) / 255,
        "test_labels": rng.integers(0, 10, size=n_test),
    }
    for key, name in MNIST_FILES.items():
        data = write_idx(arrays[key])
        if key in gz:
            with gzip.open(os.path.join(data_dir, name + ".gz"), "wb") as file:
                file.write(data)
        else:
            with open(os.path.join(data_dir, name), "wb") as file:
                file.write(data)
    return arrays


def blobs(n_samples, seed, gap=3.0):
    """Two well separated Gaussian clouds in 2-D, labels 0 and 1."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n_samples)
    centers = np.where(labels[:, None] == 1, gap, -gap) * np.array([1.0, 0.5])
    return Dataset(centers + rng.normal(size=(n_samples, 2)), labels)


def blob_classifier():
    """Linear model that already separates `blobs`: class 1 iff x0 + x1 / 2 > 0."""
    weight = np.array([[-1.0, 1.0], [-0.5, 0.5]])
    return Model([("fc", Dense(weight, np.zeros(2)))], (2,))


def flip_after(model, epoch, layer="fc"):
    """on_epoch callback negating a dense layer once `epoch` is done, so a
    separating classifier turns into its opposite from the next epoch on.
    """

    def on_epoch(done, *_):
        if done == epoch:
            model[layer].weight *= -1
            model[layer].bias *= -1

    return on_epoch
