"""External formats: IDX datasets, KFCCKPT checkpoints, key=value run configs and
the text report table.

IDX is big-endian (its published layout); the checkpoint container is little-endian.
"""
from __future__ import annotations

import dataclasses
import gzip
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from kron_fc.kfc import FORMULATIONS
from kron_fc.train import Model, TrainConfig
from kron_fc.utils import (
    MAX_ENTRIES,
    ArgumentError,
    CheckpointError,
    ConfigError,
    FloatArray,
    ParseError,
    ShapeError,
    reduction,
    si_format,
)


logger = logging.getLogger(__name__)

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

CKPT_MAGIC = b"KFCCKPT\0"
CKPT_VERSION = 1
META_SEPARATOR = "---"


@dataclass
class Dataset:
    """Images as reals in [0, 1] (any leading-N shape) and their integer labels."""

    images: FloatArray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: slice | np.ndarray) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx])


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX buffer of unsigned bytes.

    Args:
        data (bytes): big-endian IDX file contents, magic 0x00000803 (3-D images) or
            0x00000801 (1-D labels).

    Raises:
        ParseError: bad magic, truncated header or payload, trailing bytes or
            dimensions too large, with the byte offset of the problem.

    Returns:
        array: images as float64 scaled by 1/255, or labels as int64.
    """
    if len(data) < 4:
        raise ParseError(f"truncated header: {len(data)} bytes, need 4", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise ParseError(
            f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x} (images) or "
            f"0x{IDX_LABELS:08x} (labels)",
            0,
        )
    n_dims = magic & 0xFF
    header_len = 4 + 4 * n_dims
    if len(data) < header_len:
        raise ParseError(
            f"truncated header: {len(data)} bytes, need {header_len}", len(data)
        )
    dims = struct.unpack_from(f">{n_dims}I", data, 4)
    size = int(np.prod(dims, dtype=object))
    if size > MAX_ENTRIES:
        raise ParseError(
            f"dimensions {dims} hold {size} entries, limit {MAX_ENTRIES}", 4
        )

    payload = len(data) - header_len
    if payload < size:
        raise ParseError(
            f"truncated payload: expected {size} bytes for dims {dims}, got {payload}",
            len(data),
        )
    if payload > size:
        raise ParseError(
            f"{payload - size} trailing bytes after payload of dims {dims}",
            header_len + size,
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=header_len)
    raw = raw.reshape(dims)
    if magic == IDX_LABELS:
        return raw.astype(np.int64)
    return raw / 255.0


def write_idx(arr: np.ndarray) -> bytes:
    """Inverse of `parse_idx`: integer 1-D arrays become labels, float 3-D arrays in
    [0, 1] become images (rounded back to bytes).
    """
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer) and arr.ndim == 1:
        magic, payload = IDX_LABELS, arr
    elif np.issubdtype(arr.dtype, np.floating) and arr.ndim == 3:
        magic, payload = IDX_IMAGES, np.rint(arr * 255)
    else:
        raise ArgumentError(
            f"write_idx takes 1-D integer labels or 3-D float images, got "
            f"{arr.ndim}-D {arr.dtype}"
        )
    if payload.size and (payload.min() < 0 or payload.max() > 255):
        raise ArgumentError("IDX payload values must fit an unsigned byte")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + payload.astype(np.uint8).tobytes()


def _read_maybe_gz(path: str) -> bytes:
    for candidate in (path, path + ".gz"):
        if os.path.isfile(candidate):
            opener: Any = gzip.open if candidate.endswith(".gz") else open
            with opener(candidate, "rb") as file:
                return file.read()
    raise FileNotFoundError(f"{path} (or {path}.gz) not found")


def to_patches(images: FloatArray, patch: int) -> FloatArray:
    """Space-to-depth: (N, H, W) -> (N, patch*patch, H/patch, W/patch). Channel
    di*patch + dj holds pixel (i*patch + di, j*patch + dj) of block (i, j).
    """
    n_imgs, height, width = images.shape
    if patch < 1 or height % patch or width % patch:
        raise ShapeError(
            f"patch size {patch} does not divide images of {height}x{width}"
        )
    blocks = images.reshape(n_imgs, height // patch, patch, width // patch, patch)
    return blocks.transpose(0, 2, 4, 1, 3).reshape(
        n_imgs, patch * patch, height // patch, width // patch
    )


def load_mnist(
    data_dir: str, validation_size: int = 10_000, patch: int | None = None
) -> tuple[Dataset, Dataset, Dataset]:
    """MNIST train/validation/test split; the last `validation_size` training images
    form the validation set.

    Args:
        data_dir (str): directory holding the four IDX files, optionally gzipped.
        validation_size (int, optional): Defaults to 10_000.
        patch (int, optional): apply `to_patches` with this size. Defaults to None.

    Returns:
        tuple[Dataset, Dataset, Dataset]: train, validation, test.
    """
    missing = [
        name
        for name in MNIST_FILES.values()
        if not any(
            os.path.isfile(os.path.join(data_dir, name + ext)) for ext in ("", ".gz")
        )
    ]
    if missing:
        raise FileNotFoundError(f"MNIST files missing from {data_dir}: {missing}")

    arrays = {
        key: parse_idx(_read_maybe_gz(os.path.join(data_dir, name)))
        for key, name in MNIST_FILES.items()
    }
    train_images, test_images = arrays["train_images"], arrays["test_images"]
    if patch is not None:
        train_images = to_patches(train_images, patch)
        test_images = to_patches(test_images, patch)
    full = Dataset(train_images, arrays["train_labels"])
    if not 0 <= validation_size < len(full):
        raise ArgumentError(
            f"validation_size must be in [0, {len(full)}), got {validation_size}"
        )
    split = len(full) - validation_size
    logger.info(
        "loaded MNIST from %s: %d train, %d validation, %d test",
        data_dir,
        split,
        validation_size,
        len(test_images),
    )
    return full[:split], full[split:], Dataset(test_images, arrays["test_labels"])


def _blob_matrix(arr: FloatArray) -> FloatArray:
    return arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)


def save_checkpoint(
    path: str, model: Model, meta: Mapping[str, Any] | None = None
) -> None:
    """Write a KFCCKPT file atomically (temp file in the same directory, then rename).

    Layout: magic "KFCCKPT\\0", u32 version, u32-length-prefixed UTF-8 text (model
    topology, a "---" line, then key=value metadata lines), u32 blob count, and per
    blob a u32-length-prefixed name, u32 rows, u32 cols and rows*cols float64 values.
    All integers and reals are little-endian.
    """
    lines = [model.topology(), META_SEPARATOR]
    for key, value in (meta or {}).items():
        if "=" in str(key) or "\n" in f"{key}{value}":
            raise ArgumentError(
                f"metadata entry {key!r}={value!r} is not a plain value"
            )
        lines.append(f"{key}={value}")
    text = "\n".join(lines).encode("utf-8")

    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text]
    named = model.named_params()
    chunks.append(struct.pack("<I", len(named)))
    for name, arr in named:
        blob = _blob_matrix(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<II", *blob.shape))
        chunks.append(blob.astype("<f8").tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    with tempfile.NamedTemporaryFile(dir=directory, delete=False, suffix=".tmp") as tmp:
        try:
            tmp.write(b"".join(chunks))
            tmp.close()
            os.replace(tmp.name, path)
        except BaseException:
            tmp.close()
            os.unlink(tmp.name)
            raise
    logger.debug("wrote checkpoint %s (%d blobs)", path, len(named))


def _meta_value(text: str) -> int | float | str:
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {size} bytes at byte offset "
                f"{self.offset}, file has {len(self.data)}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(
    path: str, expect_topology: str | None = None
) -> tuple[Model, dict[str, int | float | str]]:
    """Read a checkpoint written by `save_checkpoint`.

    Args:
        path (str): checkpoint file.
        expect_topology (str, optional): topology the caller is about to use; a
            different stored topology raises CheckpointError listing both.

    Returns:
        tuple[Model, dict]: the rebuilt model and its metadata (numbers parsed).
    """
    with open(path, "rb") as file:
        reader = _Reader(file.read())
    if reader.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a KFCCKPT checkpoint (bad magic)")
    version = reader.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")

    text = reader.take(reader.u32()).decode("utf-8")
    topology, _, meta_text = text.partition("\n" + META_SEPARATOR)
    if expect_topology is not None and topology.strip() != expect_topology.strip():
        raise CheckpointError(
            f"topology mismatch:\ncheckpoint:\n{topology}\nexpected:\n{expect_topology}"
        )
    meta = {}
    for line in meta_text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = _meta_value(value)

    blobs = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rows, cols = reader.u32(), reader.u32()
        values = np.frombuffer(reader.take(8 * rows * cols), dtype="<f8")
        blobs[name] = values.reshape(rows, cols).astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointError(
            f"{len(reader.data) - reader.offset} trailing bytes after the last blob"
        )
    try:
        model = Model.from_topology(topology, blobs)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return model, meta


_CONVERTERS = {
    "int": int,
    "float": float,
    "str": str,
    "int | None": int,
    "str | None": str,
}
CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def _check_choice(key: str, value: Any) -> None:
    from kron_fc.presets import PRESETS

    choices = {
        "formulation": FORMULATIONS,
        "optimizer": ("sgd", "adam"),
        "model": tuple(PRESETS),
    }.get(key)
    if choices is not None and value not in choices:
        raise ArgumentError(
            f"unknown {key} {value!r}, valid values: {', '.join(choices)}"
        )


def parse_config(text: str, env: Mapping[str, str] | None = None) -> TrainConfig:
    """Build a TrainConfig from key=value lines.

    Blank lines and '#' comments are skipped. Missing keys keep their defaults; the
    default seed can be overridden through the KFC_SEED environment variable, while
    an explicit seed line still wins.

    Raises:
        ConfigError: unknown or duplicate key, missing '=', unparsable or out of
            range value, always with the 1-based line number.
    """
    env = os.environ if env is None else env
    config = TrainConfig()
    if "KFC_SEED" in env:
        try:
            config = dataclasses.replace(config, seed=int(env["KFC_SEED"]))
        except ValueError:
            raise ConfigError(f"KFC_SEED must be an integer, got {env['KFC_SEED']!r}")

    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", line_no)
        if key not in types:
            raise ConfigError(
                f"unknown key {key!r}, valid keys: {', '.join(CONFIG_KEYS)}", line_no
            )
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line_no)
        seen.add(key)
        try:
            typed = _CONVERTERS[str(types[key])](value)
            _check_choice(key, typed)
            config = dataclasses.replace(config, **{key: typed})
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line_no) from exc
    return config


@dataclass(frozen=True)
class ReportRow:
    """One method of a comparison table. test_error is a fraction or None."""

    method: str
    layer_params: int
    model_params: int
    test_error: float | None = None


def emit_report(
    rows: Sequence[ReportRow], fmt: str = "table", baseline: int = 0
) -> str:
    """Comparison table in the layout of the published results: method, layer
    params (% reduction), model params (% reduction), test error.

    Args:
        rows (list[ReportRow]): at least one row.
        fmt (str, optional): "table" for aligned text or "tsv" for tab-separated
            raw numbers. Defaults to "table".
        baseline (int, optional): index of the row reductions refer to. Defaults to 0.

    Returns:
        str: the rendered report.
    """
    if not rows:
        raise ArgumentError("a report needs at least one row")
    if fmt not in ("table", "tsv"):
        raise ArgumentError(f"fmt must be 'table' or 'tsv', got {fmt!r}")
    base = rows[baseline]
    df = pd.DataFrame(
        {
            "method": [row.method for row in rows],
            "layer_params": [row.layer_params for row in rows],
            "layer_reduction": [
                round(reduction(row.layer_params, base.layer_params), 1) for row in rows
            ],
            "model_params": [row.model_params for row in rows],
            "model_reduction": [
                round(reduction(row.model_params, base.model_params), 1) for row in rows
            ],
            "test_error": [row.test_error for row in rows],
        }
    )
    if fmt == "tsv":
        return df.to_csv(sep="\t", index=False, float_format="%.6g", na_rep="")

    def with_pct(count: int, pct: float) -> str:
        return f"{si_format(count)} ({pct:.1f}%)"

    table = pd.DataFrame(
        {
            "Method": df.method,
            "Layer Params": [
                with_pct(*pair) for pair in zip(df.layer_params, df.layer_reduction)
            ],
            "Model Params": [
                with_pct(*pair) for pair in zip(df.model_params, df.model_reduction)
            ],
            "Test Error": [
                "-" if pd.isna(err) else f"{100 * err:.2f}%" for err in df.test_error
            ],
        }
    )
    return table.to_string(index=False) + "\n"
