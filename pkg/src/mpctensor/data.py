"""IDX image/label files, the weights container, fixtures and a small trainer.

Weights container layout (all integers little-endian)::

    offset 0   4 bytes   magic b"MPCW"
    offset 4   u32       manifest length L in bytes
    offset 8   L bytes   UTF-8 manifest, one line per tensor:
                         "<name> <dtype> <offset> <d0>x<d1>x...\n"
                         dtype is f8 (float64) or i8 (int64); offset is
                         relative to the blob start; a scalar has shape "-"
    offset 8+L           blob: tensors back to back, C order, little-endian

Offsets must be increasing and non-overlapping, and the blob length must
equal the sum of tensor sizes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import BadMagic, MissingWeights, TruncatedFile

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
WEIGHTS_MAGIC = b"MPCW"
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


# -- IDX ----------------------------------------------------------------------

def parse_idx(buf: bytes) -> np.ndarray:
    """Images as float64 in [0, 1]; labels as int64."""
    if len(buf) < 4:
        raise TruncatedFile("IDX header shorter than 4 bytes")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise BadMagic(f"unexpected IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise TruncatedFile("IDX dimension header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    need = math.prod(dims)
    if len(buf) - head < need:
        raise TruncatedFile(f"IDX payload has {len(buf) - head} bytes, expected {need}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=head).reshape(dims)
    if magic == IDX_IMAGES:
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.int64)


def load_idx(path: str | Path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def encode_idx(array: np.ndarray) -> bytes:
    """IDX bytes for labels (1-d) or images (3-d). Float images are scaled by 255."""
    a = np.asarray(array)
    if a.ndim == 1:
        magic, raw = IDX_LABELS, a.astype(np.uint8)
    elif a.ndim == 3:
        raw = np.rint(a * 255.0).clip(0, 255).astype(np.uint8) if a.dtype.kind == "f" else a.astype(np.uint8)
        magic = IDX_IMAGES
    else:
        raise ValueError("IDX fixtures are 1-d labels or 3-d images")
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + raw.tobytes()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


# -- synthetic digits ---------------------------------------------------------

def synthetic_digits(n: int, seed: int = 0, noise: float = 0.7, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Ten-class images in [0, 1]: a fixed smooth prototype per class plus noise.

    The prototypes depend only on the class, never on ``seed``, so train and
    test sets drawn with different seeds share the same distribution.
    """
    proto_rng = np.random.default_rng(0x5EED)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    protos = np.zeros((10, side, side))
    for k in range(10):
        for _ in range(3):
            cy, cx = proto_rng.uniform(0.2, 0.8, 2)
            s = proto_rng.uniform(0.08, 0.18)
            protos[k] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        protos[k] /= protos[k].max()
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    images = protos[labels] * rng.uniform(0.6, 1.0, (n, 1, 1)) + rng.normal(0, noise, (n, side, side))
    return np.clip(images, 0.0, 1.0), labels.astype(np.int64)


def make_fixtures(directory: str | Path, n_train: int = 2000, n_test: int = 1000,
                  seed: int = 0) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = synthetic_digits(n, s)
        paths[f"{split}_images"] = out / f"{split}-images-idx3-ubyte"
        paths[f"{split}_labels"] = out / f"{split}-labels-idx1-ubyte"
        write_idx(paths[f"{split}_images"], images)
        write_idx(paths[f"{split}_labels"], labels)
    return paths


# -- weights container --------------------------------------------------------

@dataclass
class WeightsContainer:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise MissingWeights(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def to_bytes(self) -> bytes:
        lines, blobs, offset = [], [], 0
        for name, value in self.tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"weight name {name!r} contains whitespace")
            arr = np.asarray(value)
            code = "i8" if arr.dtype.kind in "iu" else "f8"
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            dims = "x".join(map(str, arr.shape)) or "-"
            lines.append(f"{name} {code} {offset} {dims}\n")
            blobs.append(raw)
            offset += len(raw)
        manifest = "".join(lines).encode("utf-8")
        return WEIGHTS_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> WeightsContainer:
        if len(buf) < 8:
            raise TruncatedFile("weights header shorter than 8 bytes")
        if buf[:4] != WEIGHTS_MAGIC:
            raise BadMagic(f"unexpected weights magic {buf[:4]!r}")
        (mlen,) = struct.unpack("<I", buf[4:8])
        if len(buf) < 8 + mlen:
            raise TruncatedFile("weights manifest truncated")
        blob = memoryview(buf)[8 + mlen:]
        tensors, expect = {}, 0
        for line in bytes(buf[8:8 + mlen]).decode("utf-8").splitlines():
            name, code, off, dims = line.split()
            shape = () if dims == "-" else tuple(int(d) for d in dims.split("x"))
            dtype = _DTYPES[code]
            off = int(off)
            if off != expect:
                raise ValueError(f"weights offset for {name} is {off}, expected {expect}")
            size = math.prod(shape) * dtype.itemsize
            if off + size > len(blob):
                raise TruncatedFile(f"weights blob truncated at {name}")
            tensors[name] = np.frombuffer(blob[off:off + size], dtype=dtype).reshape(shape).copy()
            expect = off + size
        if expect != len(blob):
            raise ValueError(f"weights blob has {len(blob) - expect} trailing bytes")
        return cls(tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> WeightsContainer:
        return cls.from_bytes(Path(path).read_bytes())


# -- softmax regression -------------------------------------------------------

@dataclass
class TrainResult:
    weights: WeightsContainer
    losses: list[float]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_logreg_plaintext(images: np.ndarray, labels: np.ndarray, epochs: int = 5, lr: float = 0.5,
                           batch: int = 64, seed: int = 0, weight_decay: float = 1e-4,
                           classes: int = 10) -> TrainResult:
    """Minibatch SGD on softmax cross-entropy, zero-initialized.

    Returns weights under the names ``fc/w`` (784x10) and ``fc/b`` used by the
    logreg network, plus the mean training loss of every epoch.
    """
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    y = np.asarray(labels, dtype=np.int64)
    w = np.zeros((x.shape[1], classes))
    b = np.zeros(classes)
    onehot = np.eye(classes)[y]
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            p = _softmax(x[idx] @ w + b)
            total += -np.log(p[np.arange(len(idx)), y[idx]] + 1e-12).sum()
            g = (p - onehot[idx]) / len(idx)
            w -= lr * (x[idx].T @ g + weight_decay * w)
            b -= lr * g.sum(axis=0)
        losses.append(total / len(x))
    return TrainResult(WeightsContainer({"fc/w": w, "fc/b": b}), losses)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


def weights_for(names: Mapping[str, tuple[int, ...]], container: WeightsContainer) -> dict[str, np.ndarray]:
    return {name: container[name] for name in names}
