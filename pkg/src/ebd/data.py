"""Dataset ingestion (MNIST IDX, CIFAR-10 binary), synthetic generators,
preprocessing, and the checkpoint container format.

Loaders are byte-deterministic; paths are supplied by the caller. Pixel data
is scaled to [0,1] by dividing by 255, nothing else.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np


class FormatError(ValueError):
    """Malformed dataset or checkpoint bytes."""


IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


def load_idx(path: str) -> np.ndarray:
    """Parse a big-endian IDX file (unsigned byte payload): labels come back
    as [n], images as [n, rows, cols]."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic == IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension table at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"{path}: payload is {len(raw) - header} bytes, expected {count} at offset {header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(data_dir: str, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Return (images [n,28,28] uint8, labels [n] uint8) from the standard
    four IDX files under ``data_dir``."""
    prefix = "train" if split == "train" else "t10k"
    images = load_idx(os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx(os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{split}: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


def _load_cifar_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD != 0:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0]


def load_cifar10(data_dir: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read the binary distribution (data_batch_1..5.bin, test_batch.bin);
    images are channel-major [n,3,32,32] uint8."""
    xs, ys = [], []
    for i in range(1, 6):
        x, y = _load_cifar_batch(os.path.join(data_dir, f"data_batch_{i}.bin"))
        xs.append(x)
        ys.append(y)
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = _load_cifar_batch(os.path.join(data_dir, "test_batch.bin"))
    return train_x, train_y, test_x, test_y


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return out


@dataclass
class Dataset:
    X: np.ndarray            # [n x features] or [n x C x H x W], scaled to [0,1]
    Y: np.ndarray            # [n x classes] one-hot, or real targets
    split: str = "train"

    @property
    def n(self) -> int:
        return self.X.shape[0]


def to_dataset(images: np.ndarray, labels: np.ndarray, classes: int,
               flatten: bool, split: str, dtype=np.float32) -> Dataset:
    X = images.astype(dtype) / 255.0
    if flatten:
        X = X.reshape(X.shape[0], -1)
    elif X.ndim == 3:
        X = X[:, None]       # MNIST gains a channel axis
    return Dataset(X=X, Y=one_hot(labels, classes, dtype=dtype), split=split)


def synthetic_regression(seed: int, n: int, d_in: int, d_out: int,
                         teacher: str = "mlp", hidden: int = 16,
                         noise: float = 0.0, dtype=np.float32) -> Dataset:
    """Teacher-network targets with optional additive Gaussian noise.
    teacher='identity' requires d_in == d_out."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(997,)))
    X = rng.normal(size=(n, d_in))
    if teacher == "identity":
        if d_in != d_out:
            raise ValueError("identity teacher needs d_in == d_out")
        Y = X.copy()
    elif teacher == "mlp":
        W1 = rng.normal(size=(hidden, d_in)) / np.sqrt(d_in)
        W2 = rng.normal(size=(d_out, hidden)) / np.sqrt(hidden)
        Y = (W2 @ np.tanh(W1 @ X.T)).T
    else:
        raise ValueError(f"unknown teacher {teacher!r}")
    if noise > 0:
        Y = Y + noise * rng.normal(size=Y.shape)
    return Dataset(X=X.astype(dtype), Y=Y.astype(dtype), split="train")


# ---------------------------------------------------------------------------
# Checkpoints: magic "EBD1", version, then named little-endian tensors.
# Record: u16 name length, name, u8 dtype code, u8 ndim, i64 dims, payload.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EBD1"
CHECKPOINT_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
          np.dtype("int64"): 2, np.dtype("uint8"): 3}

RAW_CODE = 255  # opaque byte blobs (rng state JSON)


def save_checkpoint(state: dict, path: str) -> None:
    """``state`` maps names to ndarrays or raw ``bytes``."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
    for name in sorted(state):
        val = state[name]
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        if isinstance(val, bytes):
            buf.write(struct.pack("<BB", RAW_CODE, 0))
            buf.write(struct.pack("<q", len(val)))
            buf.write(val)
            continue
        arr = np.ascontiguousarray(val)
        if arr.dtype not in _CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.astype(_DTYPES[code]).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    off = 12
    out: dict = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            if code == RAW_CODE:
                (size,) = struct.unpack_from("<q", raw, off)
                off += 8
                out[name] = raw[off:off + size]
                off += size
                continue
            dims = struct.unpack_from(f"<{ndim}q", raw, off)
            off += 8 * ndim
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(dims)) * dt.itemsize
            arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=off)
            out[name] = arr.reshape(dims).copy()
            off += size
        except (struct.error, KeyError, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: corrupt record at offset {off}: {e}") from e
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return out


def rng_state_bytes(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state).encode()


def rng_from_state(blob: bytes) -> np.random.Generator:
    state = json.loads(blob.decode())
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
