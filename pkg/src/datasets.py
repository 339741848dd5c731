"""
Datasets Module
Desk-scale classification tasks (two moons, spirals), CSV feature vectors and
IDX image files, split deterministically and standardised with training
statistics.
"""

import csv
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DatasetError

logger = logging.getLogger(__name__)

KINDS = ('two_moons', 'spirals', 'csv_vectors', 'idx_images')


@dataclass
class Dataset:
    """Feature matrix (n x d) and integer labels (n,)"""
    x: np.ndarray
    y: np.ndarray
    name: str = 'dataset'

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DatasetError(self.name, f"features {self.x.shape} and labels {self.y.shape} do not align")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0

    def subset(self, index: np.ndarray, name: Optional[str] = None) -> 'Dataset':
        return Dataset(self.x[index], self.y[index], name or self.name)


@dataclass(frozen=True)
class DatasetSpec:
    """
    Which task to build

    Args:
        kind: two_moons | spirals | csv_vectors | idx_images
        n: sample count for the synthetic tasks
        noise: Gaussian jitter of the synthetic tasks
        classes: spiral arms
        label_noise: fraction of labels flipped to another class
        path: CSV file, or IDX image file
        labels_path: IDX label file
        subset_size: keep at most this many IDX images (0 keeps all)
        validation_fraction: share of samples held out
    """
    kind: str = 'two_moons'
    n: int = 1000
    noise: float = 0.1
    classes: int = 3
    label_noise: float = 0.0
    path: Optional[str] = None
    labels_path: Optional[str] = None
    subset_size: int = 0
    validation_fraction: float = 0.2


def two_moons(n: int, noise: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two interleaving half circles, labels 0 / 1"""
    n_outer = n // 2
    n_inner = n - n_outer
    outer = np.linspace(0.0, np.pi, n_outer)
    inner = np.linspace(0.0, np.pi, n_inner)
    x = np.vstack([np.column_stack([np.cos(outer), np.sin(outer)]),
                   np.column_stack([1.0 - np.cos(inner), 0.5 - np.sin(inner)])])
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    x = x + rng.normal(0.0, noise, x.shape)
    return x, y


def spirals(n: int, classes: int, noise: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """``classes`` interleaved Archimedean spiral arms in the plane"""
    if classes < 2:
        raise ValueError(f"spirals need at least 2 classes, got {classes}")
    per_class = np.full(classes, n // classes)
    per_class[:n % classes] += 1
    xs, ys = [], []
    for label, count in enumerate(per_class):
        radius = np.linspace(0.05, 1.0, count)
        angle = np.linspace(0.0, 4.0, count) + label * 2.0 * np.pi / classes
        angle = angle + rng.normal(0.0, noise, count)
        xs.append(np.column_stack([radius * np.sin(angle), radius * np.cos(angle)]))
        ys.append(np.full(count, label, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def flip_labels(y: np.ndarray, fraction: float, classes: int, rng: np.random.Generator) -> np.ndarray:
    """Reassign ``fraction`` of the labels to a different, uniformly drawn class"""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"label_noise must lie in [0, 1], got {fraction}")
    y = y.copy()
    count = int(round(fraction * len(y)))
    if count == 0:
        return y
    index = rng.choice(len(y), size=count, replace=False)
    shift = rng.integers(1, classes, size=count)
    y[index] = (y[index] + shift) % classes
    return y


def load_csv_vectors(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read numeric feature rows whose last column is the integer label

    A first row that is not numeric is treated as a header.

    Raises:
        DatasetError: missing file, ragged row, non-numeric cell or bad label,
            with the 1-based line number
    """
    if not os.path.exists(path):
        raise DatasetError(path, "file not found")
    rows, labels = [], []
    width = None
    with open(path, newline='') as handle:
        for line_no, row in enumerate(csv.reader(handle), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row[:-1]]
                label_value = float(row[-1])
            except ValueError:
                if line_no == 1 and not rows:
                    logger.debug("%s: treating first row as a header", path)
                    continue
                raise DatasetError(path, f"non-numeric cell in row {row}", line=line_no)
            if len(row) < 2:
                raise DatasetError(path, "row needs at least one feature and a label", line=line_no)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetError(path, f"expected {width} features, found {len(values)}", line=line_no)
            if label_value != int(label_value) or label_value < 0:
                raise DatasetError(path, f"label {row[-1]!r} is not a non-negative integer", line=line_no)
            rows.append(values)
            labels.append(int(label_value))
    if not rows:
        raise DatasetError(path, "no data rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def save_csv_vectors(dataset: Dataset, path: str) -> None:
    """Write features and label per row, with a header"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow([f"x{i}" for i in range(dataset.num_features)] + ['label'])
        for features, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in features] + [int(label)])


def _read_idx(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(path, "file not found")
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'rb') as handle:
        raw = handle.read()
    if len(raw) < 4:
        raise DatasetError(path, "truncated IDX header")
    zero, dtype_code, ndim = struct.unpack('>HBB', raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(path, "only unsigned-byte IDX files are supported")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(path, "truncated IDX header")
    shape = struct.unpack('>' + 'I' * ndim, raw[4:header_end])
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    if data.size != int(np.prod(shape)):
        raise DatasetError(path, f"payload holds {data.size} values, header promises {shape}")
    return data.reshape(shape)


def load_idx_images(path: str, labels_path: str, subset_size: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened images scaled to [0, 1] and their labels from an IDX pair"""
    if not labels_path:
        raise DatasetError(path, "idx_images needs labels_path")
    images = _read_idx(path)
    labels = _read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(labels_path, f"{labels.shape[0]} labels for {images.shape[0]} images")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64).reshape(-1)
    if subset_size:
        x, y = x[:subset_size], y[:subset_size]
    return x, y


def standardize(train: np.ndarray, *others: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Zero mean / unit variance using the training statistics only"""
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return tuple((a - mean) / std for a in (train,) + others)


def _raw(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if spec.kind == 'two_moons':
        return two_moons(spec.n, spec.noise, rng)
    if spec.kind == 'spirals':
        return spirals(spec.n, spec.classes, spec.noise, rng)
    if spec.kind == 'csv_vectors':
        if not spec.path:
            raise DatasetError('<config>', "csv_vectors needs a path")
        return load_csv_vectors(spec.path)
    if spec.kind == 'idx_images':
        if not spec.path:
            raise DatasetError('<config>', "idx_images needs a path")
        return load_idx_images(spec.path, spec.labels_path, spec.subset_size)
    raise DatasetError('<config>', f"unknown dataset kind {spec.kind!r}; expected one of {KINDS}")


def make_dataset(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """
    Build, split and standardise a dataset

    Args:
        spec: dataset description
        rng: the run's data stream; identical streams give identical splits

    Returns:
        (train, validation)
    """
    x, y = _raw(spec, rng)
    if spec.label_noise:
        y = flip_labels(y, spec.label_noise, int(y.max()) + 1, rng)
    order = rng.permutation(len(y))
    n_val = int(round(spec.validation_fraction * len(y)))
    val_index, train_index = order[:n_val], order[n_val:]
    if len(train_index) == 0:
        raise DatasetError(spec.path or spec.kind, "no samples left for training")
    x_train, x_val = standardize(x[train_index], x[val_index])
    train = Dataset(x_train, y[train_index], f"{spec.kind}/train")
    validation = Dataset(x_val, y[val_index], f"{spec.kind}/validation")
    logger.info("dataset %s: %d train / %d validation samples, %d features", spec.kind, len(train),
                len(validation), train.num_features)
    return train, validation
