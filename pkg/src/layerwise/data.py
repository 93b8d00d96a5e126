"""Dataset sources and artifact writers."""
from __future__ import annotations

import contextlib
import gzip
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, IoFailure
from .rng import SplitMix64

DATASET_KINDS = ("synthetic_regression", "synthetic_classification", "csv", "idx")

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    classification: bool = False

    def __len__(self):
        return self.inputs.shape[0]

    def as_tuple(self):
        return self.inputs, self.targets


def synthetic_regression(n: int, input_dim: int, output_dim: int, seed: int, noise: float = 0.0) -> Dataset:
    """Linear teacher ``y = x W^T + noise`` with standard normal inputs."""
    rng = SplitMix64(seed)
    X = rng.normal((n, input_dim))
    W = rng.normal((output_dim, input_dim)) / np.sqrt(input_dim)
    Y = X @ W.T
    if noise:
        Y = Y + noise * rng.normal(Y.shape)
    return Dataset(X, Y)


def synthetic_classification(n: int, input_dim: int, classes: int, seed: int) -> Dataset:
    """Gaussian blobs around random class centres; integer labels."""
    rng = SplitMix64(seed)
    centres = rng.normal((classes, input_dim)) * 2.0
    labels = rng.integers(n, classes)
    X = centres[labels] + rng.normal((n, input_dim))
    return Dataset(X, labels.astype(np.int64), classification=True)


def load_csv(path, target_columns: int = 1, classification: bool = False) -> Dataset:
    """Numeric CSV; the last ``target_columns`` columns are targets.

    ``#`` lines are skipped and a first row that does not parse as numbers is
    taken as the header.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        parsed = [[float(v) for v in ln.split(",")] for ln in rows[1:]]
        try:
            parsed.insert(0, [float(v) for v in rows[0].split(",")])
        except ValueError:
            pass
        data = np.array(parsed, dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise IoFailure(f"malformed CSV {path}: {exc}") from exc
    if data.ndim != 2 or data.shape[0] == 0:
        raise IoFailure(f"{path} has no rectangular numeric rows")
    if data.shape[1] <= target_columns:
        raise ConfigInvalid(f"{path} has {data.shape[1]} columns; need more than {target_columns}")
    X = data[:, :-target_columns]
    T = data[:, -target_columns:]
    if classification:
        if target_columns != 1 or np.any(T != np.round(T)):
            raise ConfigInvalid("classification CSV needs one integer label column")
        return Dataset(X, T[:, 0].astype(np.int64), classification=True)
    return Dataset(X, T)


def read_idx(path) -> np.ndarray:
    """Array stored in the IDX container (big-endian magic, then dims, then data)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise IoFailure(f"{path} is not an IDX file")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IoFailure(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != count * dtype.itemsize:
        raise IoFailure(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v.newbyteorder("=").str[1:]: k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("=").str[1:])
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    payload = array.astype(_IDX_TYPES[code]).tobytes()
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    atomic_write_bytes(path, header + payload)


def load_idx_pair(images, labels, limit: int | None = None) -> Dataset:
    """Images flattened and scaled to [0, 1] (unsigned bytes) plus integer labels."""
    X = read_idx(images)
    y = read_idx(labels)
    if X.shape[0] != y.shape[0]:
        raise ConfigInvalid(f"{X.shape[0]} images but {y.shape[0]} labels")
    pixels = X.dtype.kind == "u" and X.dtype.itemsize == 1
    X = X.reshape(X.shape[0], -1).astype(np.float64)
    if pixels:
        X = X / 255.0
    if limit is not None:
        X, y = X[:limit], y[:limit]
    return Dataset(X, y.astype(np.int64).reshape(-1), classification=True)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(OSError):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_float(x: float) -> str:
    return "%.17g" % x


def csv_text(header: list[str], rows, comments: list[str] = ()) -> str:
    """CSV with ``# key = value`` comment lines, a header row and LF endings."""
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(lines) + "\n"
