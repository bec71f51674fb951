"""Dataset ingestion, normalization, one-class splits and anomaly synthesis.

Image pixels are scaled to [0, 1] at load time (divide by 255) and flattened
row-major; tabular features load raw and are normalized separately from
training statistics. Every loader has a matching writer so fixtures and
benchmarks round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3072 pixel bytes


class FormatError(Exception):
    """A file failed to parse; the message carries a byte offset or line."""


class ArgumentError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int
    name: str = ""
    kind: str = "tabular"  # tabular | image | synthetic
    image_dims: Optional[tuple] = None  # (rows, cols) or (channels, rows, cols)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ArgumentError("dataset needs a nonempty (n, d) feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ArgumentError("labels must align with feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ArgumentError("dataset features must be finite")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class OneClassSplit:
    """Normal-only training matrix plus a binary-labeled test set."""

    train: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.float64)
        self.test_features = np.asarray(self.test_features, dtype=np.float64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)


@dataclass
class SyntheticSpec:
    kind: str = "two_blobs"  # two_blobs | ring
    n: int = 200  # samples per component
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("two_blobs", "ring"):
            raise ArgumentError(f"unknown synthetic kind {self.kind!r}")
        if self.n < 10:
            raise ArgumentError("synthetic spec needs n >= 10")


def _read_exact(fh, count, path, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated {what} at byte {fh.tell() - len(buf)}")
    return buf


def load_idx_images(path):
    """Big-endian IDX image file -> (features scaled to [0,1], (rows, cols))."""
    with open(path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x} at byte 0")
        raw = _read_exact(fh, count * rows * cols, path, "pixel data")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes at byte {16 + count * rows * cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0, (rows, cols)


def load_idx_labels(path):
    with open(path, "rb") as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8, path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x} at byte 0")
        raw = _read_exact(fh, count, path, "label data")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes at byte {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, features, image_dims):
    """Inverse of load_idx_images; features must be u8-grid values / 255."""
    rows, cols = image_dims
    arr = np.asarray(features, dtype=np.float64) * 255.0
    pixels = np.rint(arr)
    if not np.allclose(arr, pixels, atol=1e-6) or pixels.min() < 0 or pixels.max() > 255:
        raise ArgumentError("features are not byte pixels scaled by 1/255")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(pixels), rows, cols))
        fh.write(pixels.astype(np.uint8).tobytes())


def save_idx_labels(path, labels):
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths):
    """Concatenated 3073-byte records across one or more batch files."""
    feats, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}"
                f" (short record at byte {len(blob) - len(blob) % CIFAR_RECORD})")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            bad = int(np.argmax(records[:, 0] > 9))
            raise FormatError(f"{path}: label {records[bad, 0]} out of range at byte {bad * CIFAR_RECORD}")
        labels.append(records[:, 0].astype(np.int64))
        feats.append(records[:, 1:].astype(np.float64) / 255.0)
    return np.concatenate(feats), np.concatenate(labels)


def save_cifar_binary(path, features, labels):
    arr = np.asarray(features, dtype=np.float64) * 255.0
    pixels = np.rint(arr)
    if not np.allclose(arr, pixels, atol=1e-6):
        raise ArgumentError("features are not byte pixels scaled by 1/255")
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        for row, lab in zip(pixels.astype(np.uint8), labels.astype(np.uint8)):
            fh.write(bytes([lab]) + row.tobytes())


def load_tabular_csv(path, has_header=False):
    """Feature columns plus a final integer label column."""
    feats, labels = [], []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and has_header:
                continue
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise FormatError(f"{path}:{lineno}: need at least one feature and a label")
            if len(row) != width:
                raise FormatError(f"{path}:{lineno}: ragged row ({len(row)} fields, expected {width})")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(float(row[-1])))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not feats:
        raise FormatError(f"{path}: no data rows")
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def save_tabular_csv(path, features, labels, header=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row, lab in zip(np.asarray(features, dtype=np.float64), labels):
            writer.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_dataset(fmt, paths, name="", has_header=False):
    """Dispatch on format; ``paths`` is format-specific (see each loader)."""
    if fmt == "tabular_csv":
        path = paths[0] if isinstance(paths, (list, tuple)) else paths
        feats, labels = load_tabular_csv(path, has_header=has_header)
        return Dataset(feats, labels, name=name or str(path), kind="tabular")
    if fmt == "idx_images":
        images_path, labels_path = paths
        feats, dims = load_idx_images(images_path)
        labels = load_idx_labels(labels_path)
        if len(labels) != len(feats):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(feats)} images")
        return Dataset(feats, labels, name=name or str(images_path), kind="image", image_dims=dims)
    if fmt == "cifar_binary":
        paths = [paths] if isinstance(paths, (str,)) else list(paths)
        feats, labels = load_cifar_binary(paths)
        return Dataset(feats, labels, name=name or str(paths[0]), kind="image",
                       image_dims=(3, 32, 32))
    raise ArgumentError(f"unknown dataset format {fmt!r}")


def normalize_features(train, others=()):
    """Min-max scale every matrix by per-feature stats of ``train`` only.

    Constant features map to 0. Values outside the train range map outside
    [0, 1]; nothing is clamped.
    """
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] < 1:
        raise ArgumentError("normalize_features needs a nonempty train matrix")
    lo = train.min(axis=0)
    hi = train.max(axis=0)
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)

    def apply(m):
        return (np.asarray(m, dtype=np.float64) - lo) / safe

    return apply(train), [apply(m) for m in others], (lo, hi)


def one_class_split(train_ds, test_ds, normal_class):
    """Train on one class only; test on everything with binary labels."""
    normal_class = int(normal_class)
    mask = train_ds.labels == normal_class
    if not np.any(mask):
        raise ArgumentError(f"class {normal_class} absent from training labels")
    return OneClassSplit(
        train=train_ds.features[mask].copy(),
        test_features=test_ds.features.copy(),
        test_labels=(test_ds.labels != normal_class).astype(np.int64),
    )


def tabular_ad_split(ds, train_fraction=0.5, seed=0):
    """Random fraction of normals for training; rest + all anomalies test."""
    if not 0 < train_fraction < 1:
        raise ArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = ds.labels
    if not np.all((labels == 0) | (labels == 1)):
        raise ArgumentError("tabular split needs binary labels {0 normal, 1 anomaly}")
    normal_idx = np.flatnonzero(labels == 0)
    anomaly_idx = np.flatnonzero(labels == 1)
    if len(normal_idx) < 2:
        raise ArgumentError("need at least 2 normal samples")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(normal_idx))
    n_train = int(round(train_fraction * len(normal_idx)))
    n_train = min(max(n_train, 1), len(normal_idx) - 1)
    train_idx = normal_idx[perm[:n_train]]
    heldout_idx = normal_idx[perm[n_train:]]
    test_idx = np.concatenate([heldout_idx, anomaly_idx])
    return OneClassSplit(
        train=ds.features[train_idx].copy(),
        test_features=ds.features[test_idx].copy(),
        test_labels=np.concatenate([np.zeros(len(heldout_idx), dtype=np.int64),
                                    np.ones(len(anomaly_idx), dtype=np.int64)]),
    )


def synthesize_multiclass_benchmark(train_ds, test_ds, n_train=10000, n_anom=10000, seed=0):
    """Multi-class-normal benchmark: pixel-midpoint pairs become anomalies.

    Training data: ``n_train`` samples drawn uniformly without replacement
    across all classes of the training split. Anomalies: ``n_anom``
    elementwise means of test-split pairs (drawn with replacement, possibly
    same-class). The final test set is the whole original test split
    (label 0) plus the synthesized anomalies (label 1).
    """
    if n_anom < 1:
        raise ArgumentError("n_anom must be positive")
    if n_train > train_ds.n:
        raise ArgumentError(f"n_train {n_train} exceeds training split size {train_ds.n}")
    if test_ds.n < 1:
        raise ArgumentError("test split is empty")
    rng = np.random.default_rng(seed)
    train_idx = rng.choice(train_ds.n, size=n_train, replace=False)
    a = rng.integers(0, test_ds.n, size=n_anom)
    b = rng.integers(0, test_ds.n, size=n_anom)
    anomalies = 0.5 * (test_ds.features[a] + test_ds.features[b])
    split = OneClassSplit(
        train=train_ds.features[train_idx].copy(),
        test_features=np.concatenate([test_ds.features, anomalies]),
        test_labels=np.concatenate([np.zeros(test_ds.n, dtype=np.int64),
                                    np.ones(n_anom, dtype=np.int64)]),
    )
    return split.train, split


def gen_synthetic_2d(spec):
    """Two fixtures for sweeps and smoke tests, deterministic per seed.

    two_blobs: n normals around the origin, n anomalies around (4, 4), both
    isotropic Gaussian with the spec's noise scale.
    ring: n normals on the unit circle with radial noise; n anomalies split
    between the center and a far field at radius 3.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "two_blobs":
        normals = rng.normal(0.0, spec.noise, size=(spec.n, 2))
        anomalies = rng.normal(0.0, spec.noise, size=(spec.n, 2)) + 4.0
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=spec.n)
        radius = 1.0 + spec.noise * rng.standard_normal(spec.n)
        normals = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        n_center = spec.n // 2
        n_far = spec.n - n_center
        center = rng.normal(0.0, spec.noise / 2.0, size=(n_center, 2))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n_far)
        far_r = 3.0 + spec.noise * rng.standard_normal(n_far)
        far = np.column_stack([far_r * np.cos(phi), far_r * np.sin(phi)])
        anomalies = np.concatenate([center, far])
    features = np.concatenate([normals, anomalies])
    labels = np.concatenate([np.zeros(spec.n, dtype=np.int64),
                             np.ones(len(anomalies), dtype=np.int64)])
    return Dataset(features, labels, name=f"synthetic-{spec.kind}", kind="synthetic")


def write_benchmark_manifest(path, entries):
    """Structured ``key: value`` record of how a benchmark was built."""
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}: {value}\n")


def read_benchmark_manifest(path):
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            entries[key.strip()] = value.strip()
    return entries
