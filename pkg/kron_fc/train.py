"""Minimal feed-forward training stack: dense and KFC layers, |tanh| activation,
inverted dropout, softmax cross-entropy, SGD and Adam.

Layers are stateless between calls: `forward` returns the output plus a cache that
the matching `backward` consumes, so evaluation can run on several threads at once.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import log_softmax
from sklearn.metrics import zero_one_loss
from tqdm import tqdm

from kron_fc import kfc
from kron_fc.linalg import Rng, matmul
from kron_fc.utils import ArgumentError, FloatArray, ShapeError


if TYPE_CHECKING:
    from kron_fc.formats import Dataset

logger = logging.getLogger(__name__)


def abs_tanh(x: FloatArray) -> FloatArray:
    """y = |tanh(x)|, elementwise."""
    return np.abs(np.tanh(x))


def abs_tanh_grad(x: FloatArray) -> FloatArray:
    """d|tanh(x)|/dx = sign(x) * (1 - tanh(x)^2), with 0 at the kink x == 0."""
    return np.sign(x) * (1 - np.tanh(x) ** 2)


def dropout_forward(
    x: FloatArray, keep: float, rng: Rng | None, train: bool
) -> tuple[FloatArray, FloatArray]:
    """Inverted dropout.

    Args:
        x (array): activations.
        keep (float): keep probability p in (0, 1].
        rng (Rng): mask source, only used in train mode.
        train (bool): in eval mode the input passes through unchanged.

    Returns:
        tuple[array, array]: x * mask / p and the 0/1 mask.
    """
    if not 0 < keep <= 1:
        raise ArgumentError(f"keep probability must be in (0, 1], got {keep}")
    if not train or keep == 1:
        return x, np.ones_like(x)
    if rng is None:
        raise ArgumentError("dropout in train mode needs an Rng")
    mask = rng.bernoulli(keep, x.shape)
    return x * mask / keep, mask


def softmax_xent(
    logits: FloatArray, labels: Sequence[int] | np.ndarray
) -> tuple[float, FloatArray]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / N."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_rows, n_classes = logits.shape
    if labels.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes}), got {labels}")

    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(n_rows)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    return float(loss), grad / n_rows


class Dense:
    """Fully-connected layer y = x @ weight + bias."""

    kind = "dense"

    def __init__(self, weight: FloatArray, bias: FloatArray) -> None:
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias of shape {self.bias.shape} does not fit weight "
                f"{self.weight.shape}"
            )

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: Rng) -> Dense:
        bound = math.sqrt(6 / (in_dim + out_dim))
        return cls(rng.uniform(-bound, bound, (in_dim, out_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def describe(self) -> str:
        return f"{self.in_dim} {self.out_dim}"

    def params(self) -> list[FloatArray]:
        return [self.weight, self.bias]

    def param_names(self) -> list[str]:
        return ["weight", "bias"]

    def forward(
        self, x: FloatArray, train: bool = False, rng: Rng | None = None
    ) -> tuple[FloatArray, Any]:
        return matmul(x, self.weight) + self.bias, x

    def backward(
        self, cache: Any, grad: FloatArray
    ) -> tuple[FloatArray, list[FloatArray]]:
        x = cache
        grad_w = matmul(x.T, grad)
        return matmul(grad, self.weight.T), [grad_w, grad.sum(axis=0)]


class KfcLayer:
    """KFC layer wrapping a `KfcSpec` and its `KfcWeights`."""

    kind = "kfc"

    def __init__(self, spec: kfc.KfcSpec, weights: kfc.KfcWeights) -> None:
        weights.check(spec)
        self.spec = spec
        self.weights = weights

    @classmethod
    def init(cls, spec: kfc.KfcSpec, rng: Rng) -> KfcLayer:
        return cls(spec, kfc.init_weights(spec, rng))

    @property
    def in_dim(self) -> int:
        return self.spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    def describe(self) -> str:
        return self.spec.describe()

    def params(self) -> list[FloatArray]:
        return self.weights.arrays()

    def param_names(self) -> list[str]:
        return self.weights.names()

    def forward(
        self, x: FloatArray, train: bool = False, rng: Rng | None = None
    ) -> tuple[FloatArray, Any]:
        return kfc.forward(self.spec, self.weights, x), x

    def backward(
        self, cache: Any, grad: FloatArray
    ) -> tuple[FloatArray, list[FloatArray]]:
        grad_w, grad_x, _ = kfc.backward(self.spec, self.weights, cache, grad)
        return grad_x, grad_w.arrays()


class AbsTanh:
    kind = "abs_tanh"
    in_dim = out_dim = None

    def describe(self) -> str:
        return ""

    def params(self) -> list[FloatArray]:
        return []

    def param_names(self) -> list[str]:
        return []

    def forward(
        self, x: FloatArray, train: bool = False, rng: Rng | None = None
    ) -> tuple[FloatArray, Any]:
        return abs_tanh(x), x

    def backward(
        self, cache: Any, grad: FloatArray
    ) -> tuple[FloatArray, list[FloatArray]]:
        return grad * abs_tanh_grad(cache), []


class Dropout:
    kind = "dropout"
    in_dim = out_dim = None

    def __init__(self, keep: float) -> None:
        if not 0 < keep <= 1:
            raise ArgumentError(f"keep probability must be in (0, 1], got {keep}")
        self.keep = keep

    def describe(self) -> str:
        return f"{self.keep!r}"

    def params(self) -> list[FloatArray]:
        return []

    def param_names(self) -> list[str]:
        return []

    def forward(
        self, x: FloatArray, train: bool = False, rng: Rng | None = None
    ) -> tuple[FloatArray, Any]:
        y, mask = dropout_forward(x, self.keep, rng, train)
        return y, mask / self.keep if train else mask

    def backward(
        self, cache: Any, grad: FloatArray
    ) -> tuple[FloatArray, list[FloatArray]]:
        return grad * cache, []


LAYER_KINDS = {"dense": Dense, "kfc": KfcLayer, "abs_tanh": AbsTanh, "dropout": Dropout}


class Model:
    """Chain of named layers ending in logits; the softmax cross-entropy head is
    applied by `train`.
    """

    def __init__(
        self, layers: Sequence[tuple[str, Any]], input_shape: tuple[int, ...]
    ) -> None:
        names = [name for name, _ in layers]
        if len(set(names)) != len(names):
            raise ArgumentError(f"layer names must be unique, got {names}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)

        width = math.prod(self.input_shape)
        for name, layer in self.layers:
            if layer.in_dim is not None:
                if layer.in_dim != width:
                    raise ShapeError(
                        f"layer {name} expects {layer.in_dim} inputs, previous layer "
                        f"gives {width}"
                    )
                width = layer.out_dim
        self.out_dim = width

    @property
    def in_dim(self) -> int:
        return math.prod(self.input_shape)

    def __getitem__(self, name: str) -> Any:
        for layer_name, layer in self.layers:
            if layer_name == name:
                return layer
        raise KeyError(f"no layer named {name!r}, have {[n for n, _ in self.layers]}")

    def topology(self) -> str:
        """Text description, one layer per line, prefixed by the input shape."""
        lines = ["input " + "x".join(map(str, self.input_shape))]
        for name, layer in self.layers:
            lines.append(f"{layer.kind} {name} {layer.describe()}".rstrip())
        return "\n".join(lines)

    @classmethod
    def from_topology(
        cls, text: str, blobs: dict[str, FloatArray] | None = None
    ) -> Model:
        """Rebuild a model from `topology()` text, filling parameters from `blobs`
        (name -> 2-D array, see `named_params`) or with zeros if blobs is None.
        """
        lines = [line for line in text.strip().splitlines() if line.strip()]
        if not lines or not lines[0].startswith("input "):
            raise ArgumentError("topology must start with an 'input' line")
        input_shape = tuple(int(d) for d in lines[0].split()[1].split("x"))
        layers: list[tuple[str, Any]] = []
        for line in lines[1:]:
            kind, name, *rest = line.split(maxsplit=2)
            args = rest[0] if rest else ""
            if kind == "dense":
                in_dim, out_dim = (int(d) for d in args.split())
                layer: Any = Dense(np.zeros((in_dim, out_dim)), np.zeros(out_dim))
            elif kind == "kfc":
                spec = kfc.KfcSpec.parse(args)
                zeros = [
                    [np.zeros((g.rank, r, c)) for r, c in g.shape.factors]
                    for g in spec.groups
                ]
                layer = KfcLayer(spec, kfc.KfcWeights(zeros, np.zeros(spec.out_dim)))
            elif kind == "abs_tanh":
                layer = AbsTanh()
            elif kind == "dropout":
                layer = Dropout(float(args))
            else:
                valid = ", ".join(LAYER_KINDS)
                raise ArgumentError(
                    f"unknown layer kind {kind!r}, valid kinds: {valid}"
                )
            layers.append((name, layer))
        model = cls(layers, input_shape)
        if blobs is not None:
            model.load_blobs(blobs)
        return model

    def named_params(self) -> list[tuple[str, FloatArray]]:
        return [
            (f"{name}.{pname}", arr)
            for name, layer in self.layers
            for pname, arr in zip(layer.param_names(), layer.params())
        ]

    def params(self) -> list[FloatArray]:
        return [arr for _, arr in self.named_params()]

    def n_params(self) -> int:
        return sum(arr.size for arr in self.params())

    def snapshot(self) -> list[FloatArray]:
        return [arr.copy() for arr in self.params()]

    def restore(self, arrays: Sequence[FloatArray]) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} arrays, got {len(arrays)}")
        for dst, src in zip(params, arrays):
            if dst.shape != np.shape(src):
                raise ShapeError(f"cannot restore {np.shape(src)} into {dst.shape}")
            dst[...] = src

    def load_blobs(self, blobs: dict[str, FloatArray]) -> None:
        for name, arr in self.named_params():
            if name not in blobs:
                raise KeyError(f"missing parameter blob {name!r}")
            blob = np.asarray(blobs[name], dtype=np.float64)
            if blob.size != arr.size:
                raise ShapeError(
                    f"blob {name!r} has {blob.size} entries, parameter has {arr.size}"
                )
            arr[...] = blob.reshape(arr.shape)

    def forward(
        self, x: FloatArray, train: bool = False, rng: Rng | None = None
    ) -> tuple[FloatArray, list[Any]]:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"model expects {self.in_dim} features, got {x.shape[1]}")
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x, train, rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list[Any], grad: FloatArray) -> list[FloatArray]:
        """Parameter gradients in `params()` order."""
        grads_per_layer = []
        for (_, layer), cache in zip(reversed(self.layers), reversed(caches)):
            grad, grads = layer.backward(cache, grad)
            grads_per_layer.append(grads)
        return [g for grads in reversed(grads_per_layer) for g in grads]

    def predict(self, x: FloatArray) -> FloatArray:
        return self.forward(x)[0]


@dataclass
class OptimState:
    """Optimizer hyperparameters plus per-parameter moments.

    kind is "sgd" or "adam". Weight decay is decoupled: parameters shrink by
    (1 - lr * weight_decay) before each update.
    """

    kind: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[FloatArray] = field(default_factory=list)
    v: list[FloatArray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ArgumentError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ArgumentError("lr must be positive and weight_decay non-negative")


def _check_grads(params: Sequence[FloatArray], grads: Sequence[FloatArray]) -> None:
    if len(params) != len(grads) or any(
        p.shape != np.shape(g) for p, g in zip(params, grads)
    ):
        raise ShapeError("gradients do not match parameter shapes")


def sgd_step(
    params: Sequence[FloatArray], grads: Sequence[FloatArray], state: OptimState
) -> OptimState:
    """Plain gradient descent with decoupled weight decay, in place."""
    _check_grads(params, grads)
    state.step += 1
    for p, g in zip(params, grads):
        if state.weight_decay:
            p *= 1 - state.lr * state.weight_decay
        p -= state.lr * g
    return state


def adam_step(
    params: Sequence[FloatArray], grads: Sequence[FloatArray], state: OptimState
) -> OptimState:
    """Bias-corrected Adam with decoupled weight decay, updating params in place.

    Args:
        params (list[array]): parameters, modified in place.
        grads (list[array]): gradients in the same order.
        state (OptimState): moments and step count, modified in place.

    Returns:
        OptimState: the same state object.
    """
    _check_grads(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    _check_grads(params, state.m)

    state.step += 1
    correction1 = 1 - state.beta1**state.step
    correction2 = 1 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p *= 1 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


OPTIMIZERS: dict[str, Callable[..., OptimState]] = {"sgd": sgd_step, "adam": adam_step}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and model preset of one run. Defaults follow the published
    MNIST setup: Adam, lr 1e-4, weight decay 1e-4, dropout keep 0.5.
    """

    model: str = "mnist-mlp-baseline"
    formulation: str = "II"
    k1: int = 64
    k2: int = 4
    k3: int | None = None
    c1: int | None = None
    rank: int = 1
    groups: str | None = None
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    dropout_keep: float = 0.5
    batch_size: int = 128
    epochs: int = 10
    seed: int = 1
    data_dir: str = "data"
    validation_size: int = 10_000
    hidden: int = 256
    patch: int = 4
    eval_workers: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.dropout_keep <= 1:
            raise ArgumentError(
                f"dropout_keep must be in (0, 1], got {self.dropout_keep}"
            )
        if self.epochs < 0 or self.rank < 1 or self.eval_workers < 1:
            raise ArgumentError("epochs must be >= 0, rank and eval_workers >= 1")
        if self.patch < 1 or self.hidden < 1:
            raise ArgumentError(
                f"patch and hidden must be >= 1, got {self.patch} and {self.hidden}"
            )
        if self.validation_size < 0:
            raise ArgumentError(
                f"validation_size must be >= 0, got {self.validation_size}"
            )


@dataclass
class TrainResult:
    """Per-epoch history plus the parameters of the min-validation epoch."""

    history: pd.DataFrame
    best_epoch: int
    best_val_error: float
    snapshot: list[FloatArray]


def _check_data(
    model: Model, data: Dataset, what: str
) -> tuple[FloatArray, np.ndarray]:
    labels = np.asarray(data.labels)
    if len(labels) == 0:
        raise ArgumentError(f"{what} data is empty")
    images = np.asarray(data.images, dtype=np.float64).reshape(len(labels), -1)
    if images.shape[1] != model.in_dim:
        raise ShapeError(
            f"{what} data has {images.shape[1]} features, model expects {model.in_dim}"
        )
    return images, labels


def train(
    model: Model,
    train_data: Dataset,
    val_data: Dataset,
    config: TrainConfig,
    rng: Rng | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
    progress: bool = False,
) -> TrainResult:
    """Mini-batch training with per-epoch validation.

    Shuffling and dropout draw from two streams split off `rng` (default
    Rng(config.seed)), so identical inputs give bit-identical parameters.

    Args:
        model (Model): model to train in place.
        train_data (Dataset): training images and labels.
        val_data (Dataset): validation set used to pick the snapshot.
        config (TrainConfig): hyperparameters.
        rng (Rng, optional): random stream. Defaults to Rng(config.seed).
        on_epoch (callable, optional): called as on_epoch(epoch, train_loss,
            val_error) after every epoch.
        progress (bool, optional): show a tqdm bar over batches. Defaults to False.

    Returns:
        TrainResult: history and the min-validation snapshot. The model keeps the
            parameters of the last epoch; call model.restore(result.snapshot) to
            switch to the snapshot.
    """
    x_train, y_train = _check_data(model, train_data, "training")
    _check_data(model, val_data, "validation")
    shuffle_rng, dropout_rng = (rng or Rng(config.seed)).split(2)
    state = OptimState(
        kind=config.optimizer, lr=config.lr, weight_decay=config.weight_decay
    )
    step = OPTIMIZERS[config.optimizer]
    params = model.params()

    records = []
    best_epoch, best_val, snapshot = 0, math.inf, model.snapshot()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(y_train))
        batches = range(0, len(order), config.batch_size)
        total_loss = 0.0
        bar = tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False)
        for start in bar:
            idx = order[start : start + config.batch_size]
            logits, caches = model.forward(x_train[idx], train=True, rng=dropout_rng)
            loss, grad = softmax_xent(logits, y_train[idx])
            step(params, model.backward(caches, grad), state)
            total_loss += loss * len(idx)

        train_loss = total_loss / len(y_train)
        val_error = evaluate(model, val_data, workers=config.eval_workers)
        records.append(
            {"epoch": epoch, "train_loss": train_loss, "val_error": val_error}
        )
        logger.info(
            "epoch %d: train loss %.6f, val error %.4f", epoch, train_loss, val_error
        )
        if val_error < best_val:
            best_epoch, best_val, snapshot = epoch, val_error, model.snapshot()
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_error)

    history = pd.DataFrame(records, columns=["epoch", "train_loss", "val_error"])
    return TrainResult(history, best_epoch, best_val, snapshot)


def evaluate(
    model: Model, data: Dataset, batch_size: int = 1000, workers: int = 1
) -> float:
    """Fraction of samples whose argmax logit differs from the label.

    Batches may run on `workers` threads; per-batch error counts are integers summed
    at the end, so the result does not depend on scheduling.
    """
    images, labels = _check_data(model, data, "evaluation")

    def count_errors(start: int) -> int:
        batch = slice(start, start + batch_size)
        preds = model.predict(images[batch]).argmax(axis=1)
        return int(zero_one_loss(labels[batch], preds, normalize=False))

    starts = range(0, len(labels), batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            n_errors = sum(pool.map(count_errors, starts))
    else:
        n_errors = sum(map(count_errors, starts))
    return n_errors / len(labels)
