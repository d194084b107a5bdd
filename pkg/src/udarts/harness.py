"""Datasets, train/valid splits and the input/parameter noise protocols."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

SYNTHETIC = ("two_moons", "blobs", "spirals")

# IDX type code -> big-endian element dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


class DataFormatError(ValueError):
    """A dataset file that does not parse."""


@dataclass(frozen=True)
class Dataset:
    """Features ``x`` (N, ...) float64 and integer labels ``y`` (N,); read-only."""

    x: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if x.ndim < 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x, self.y

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes)


# -- synthetic generators -----------------------------------------------------

def standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per feature (constant features are only centred)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu) / sd


def _counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (c < extra) for c in range(classes)]


def two_moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0, n1 = _counts(n, 2)
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return x, y


def blobs(n: int, noise: float, rng: np.random.Generator, classes: int) -> tuple[np.ndarray, np.ndarray]:
    angles = 2 * math.pi * np.arange(classes) / classes
    centres = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    counts = _counts(n, classes)
    y = np.repeat(np.arange(classes), counts)
    x = centres[y] + max(noise, 1e-12) * rng.standard_normal((n, 2))
    return x, y


def spirals(n: int, noise: float, rng: np.random.Generator, classes: int) -> tuple[np.ndarray, np.ndarray]:
    counts = _counts(n, classes)
    xs, ys = [], []
    for c, m in enumerate(counts):
        r = rng.uniform(0.1, 1.0, m)
        theta = 3.0 * math.pi * r + 2 * math.pi * c / classes
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
        ys.append(np.full(m, c, np.int64))
    x = np.concatenate(xs) + noise * rng.standard_normal((n, 2))
    return x, np.concatenate(ys)


def generate(source: str, n: int, noise: float = 0.1, seed: int = 0, classes: int = 2) -> Dataset:
    """Synthetic dataset with standardized features; deterministic in ``seed``."""
    if source not in SYNTHETIC:
        raise ValueError(f"unknown source {source!r}; expected one of {SYNTHETIC}")
    if source == "two_moons" and classes != 2:
        raise ValueError("two_moons has exactly 2 classes")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 4 * classes:
        raise ValueError(f"n={n} must be at least 4 * classes = {4 * classes}")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    if source == "two_moons":
        x, y = two_moons(n, noise, rng)
    elif source == "blobs":
        x, y = blobs(n, noise, rng, classes)
    else:
        x, y = spirals(n, noise, rng, classes)
    order = rng.permutation(n)
    return Dataset(standardize(x[order]), y[order], classes)


def split(data: Dataset, fraction: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint (train, valid) partition; ``fraction`` of the samples go to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(data)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


# -- file formats -------------------------------------------------------------

def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder(">") if array.dtype.byteorder != "|" else array.dtype
    if dt not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    if array.ndim == 0 or array.ndim > 255:
        raise ValueError("IDX needs 1 to 255 dimensions")
    header = struct.pack(">HBB", 0, _IDX_CODES[dt], array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dt).tobytes())


def read_idx(path) -> np.ndarray:
    """Parse an IDX file; errors name the byte offset where parsing failed."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise DataFormatError(f"{path}: malformed magic 0x{raw[:4].hex()} at byte offset 0")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataFormatError(f"{path}: truncated dimensions at byte offset {len(raw)}")
    shape = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = _IDX_TYPES[code]
    need = end + int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated data at byte offset {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise DataFormatError(f"{path}: trailing bytes after byte offset {need}")
    flat = np.frombuffer(raw, dtype=dt, count=(need - end) // dt.itemsize, offset=end)
    return flat.reshape(shape).astype(dt.newbyteorder("="))


def load_idx(images, labels, classes: int | None = None) -> Dataset:
    """Image/label IDX pair; pixels are scaled to [0, 1] when stored as bytes."""
    x = read_idx(images)
    y = read_idx(labels)
    if y.ndim != 1:
        raise DataFormatError(f"{labels}: labels must be one-dimensional, got {y.shape}")
    if len(x) != len(y):
        raise DataFormatError(f"{images}: {len(x)} images but {len(y)} labels")
    x = x.astype(np.float64) / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return Dataset(x, y.astype(np.int64), classes or int(y.max()) + 1)


def load_csv(path, classes: int | None = None) -> Dataset:
    """Headerless CSV: feature columns followed by an integer label."""
    rows, labels = [], []
    with open(path, newline="") as fh:
        width = None
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: ragged row with {len(row)} fields, expected {width}")
            try:
                feats = [float(c) for c in row[:-1]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            label = row[-1].strip()
            if not label.lstrip("-").isdigit():
                raise DataFormatError(f"{path}:{lineno}: non-integer label {label!r}")
            rows.append(feats)
            labels.append(int(label))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataFormatError(f"{path}: negative label")
    return Dataset(np.array(rows), y, classes or int(y.max()) + 1)


# -- perturbations ------------------------------------------------------------

def add_input_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise with power = (mean square of ``x``) / 10^(snr_db / 10).

    ``snr_db = inf`` returns an unchanged copy and draws nothing from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("batch must be nonempty")
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    if math.isnan(snr_db):
        raise ValueError("snr_db is NaN")
    noise_power = float(np.mean(x * x)) / 10.0 ** (snr_db / 10.0)
    return x + math.sqrt(noise_power) * rng.standard_normal(x.shape)


def perturb_params(params: Mapping[str, np.ndarray], sigma: float, rng: np.random.Generator,
                   names=None) -> dict:
    """Copy of ``params`` with i.i.d. N(0, sigma^2) added to the selected arrays."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    names = list(params) if names is None else list(names)
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    if sigma == 0:
        return out
    for k in names:
        out[k] = out[k] + sigma * rng.standard_normal(out[k].shape)
    return out
