"""Datasets of fixed-shape multivariate series: ingestion, normalisation,
splitting, balancing, label-ratio subsets and a synthetic generator.

Every operation that draws randomness takes an explicit ``seed`` and is a
pure function of its inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ParseError, SplitError


@dataclass(frozen=True)
class TimeSeriesSample:
    values: np.ndarray  # (c, d)
    label: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable stack of samples sharing one ``(c, d)`` shape."""

    values: np.ndarray  # (N, c, d) float64
    labels: Optional[np.ndarray]  # (N,) int64 or None
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.values, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
            raise DataError(f"{self.name}: expected (N, c, d) values, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError(f"{self.name}: non-finite values")
        object.__setattr__(self, "values", _readonly(x))
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise DataError(f"{self.name}: {y.shape[0]} labels for {x.shape[0]} samples")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DataError(f"{self.name}: labels must lie in [0, {self.n_classes})")
            object.__setattr__(self, "labels", _readonly(y))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> TimeSeriesSample:
        label = None if self.labels is None else int(self.labels[i])
        return TimeSeriesSample(self.values[i], label)

    @property
    def samples(self) -> list:
        return [self[i] for i in range(len(self))]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{self.name}: labels required")
        return self.labels

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.require_labels(), minlength=self.n_classes)

    def take(self, indices, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.values[idx],
            None if self.labels is None else self.labels[idx],
            self.n_classes,
            name or self.name,
        )

    @classmethod
    def from_samples(cls, samples: Sequence[TimeSeriesSample], n_classes: int, name: str = "dataset") -> "Dataset":
        if not samples:
            raise DataError("no samples")
        shapes = {s.values.shape for s in samples}
        if len(shapes) != 1:
            raise DataError(f"samples have differing shapes {sorted(shapes)}")
        labels = [s.label for s in samples]
        y = None if all(l is None for l in labels) else np.array(labels, dtype=np.int64)
        return cls(np.stack([s.values for s in samples]), y, n_classes, name)


# --- CSV -------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Row layout: optional label field first, then ``c*d`` channel-major values."""

    c: int
    d: int
    label_column: Optional[str] = "label"
    n_classes: Optional[int] = None


def csv_header(c: int, d: int, label_column: Optional[str] = "label") -> list:
    cols = [f"v{i}" for i in range(c * d)]
    return ([label_column] if label_column else []) + cols


def load_csv(path: Union[str, Path], schema: CsvSchema, name: Optional[str] = None) -> Dataset:
    """Read one sample per row. Errors name the 1-based file line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    n_values = schema.c * schema.d
    width = n_values + (1 if schema.label_column else 0)
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", row=1)
        if len(header) != width:
            raise ParseError(f"header has {len(header)} fields, expected {width}", row=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", row=line_no)
            try:
                nums = np.array([float(v) for v in row[width - n_values:]])
            except ValueError as exc:
                raise ParseError(str(exc), row=line_no) from None
            if not np.all(np.isfinite(nums)):
                raise DataError(f"row {line_no}: non-finite value")
            rows.append(nums.reshape(schema.c, schema.d))
            if schema.label_column:
                try:
                    label = int(row[0])
                except ValueError:
                    raise ParseError(f"bad label {row[0]!r}", row=line_no) from None
                if label < 0 or (schema.n_classes is not None and label >= schema.n_classes):
                    raise DataError(f"row {line_no}: label {label} out of range")
                labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64) if schema.label_column else None
    k = schema.n_classes if schema.n_classes is not None else (int(y.max()) + 1 if y is not None else 0)
    return Dataset(np.stack(rows), y, k, name or path.stem)


def save_csv(data: Dataset, path: Union[str, Path], label_column: Optional[str] = "label") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = data.values.reshape(len(data), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(data.n_channels, data.length, label_column))
        for i, row in enumerate(flat):
            vals = [repr(float(v)) for v in row]
            w.writerow(([int(data.labels[i])] if label_column else []) + vals)
    return path


# --- normalisation ---------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # (c,)
    std: np.ndarray  # (c,)

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise DataError("zero-variance channel; cannot z-score")


def compute_stats(data: Dataset) -> NormalizationStats:
    x = data.values
    return NormalizationStats(x.mean(axis=(0, 2)), x.std(axis=(0, 2)))


def _check_channels(data: Dataset, stats: NormalizationStats) -> None:
    if len(stats.mean) != data.n_channels:
        raise ConfigError(f"stats cover {len(stats.mean)} channels, data has {data.n_channels}")


def zscore_normalize(data: Dataset, stats: NormalizationStats) -> Dataset:
    _check_channels(data, stats)
    x = (data.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    return Dataset(x, data.labels, data.n_classes, data.name)


def denormalize(data: Dataset, stats: NormalizationStats) -> Dataset:
    _check_channels(data, stats)
    x = data.values * stats.std[None, :, None] + stats.mean[None, :, None]
    return Dataset(x, data.labels, data.n_classes, data.name)


# --- splitting -------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    pretrain_frac: float = 0.58
    valid_frac: float = 0.14
    test_frac: float = 0.28

    def __post_init__(self):
        fr = self.fractions
        if any(not 0.0 < f < 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {fr} must each be in (0,1) and sum to 1")

    @property
    def fractions(self) -> tuple:
        return (self.pretrain_frac, self.valid_frac, self.test_frac)


def allocate(n: int, fractions: Sequence[float]) -> list:
    """Largest-remainder apportionment of ``n`` items, at least one per part."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i, c in enumerate(counts):
        if c == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            if counts[donor] <= 1:
                raise SplitError(f"cannot give every split a sample from a class of {n}")
            counts[donor] -= 1
            counts[i] = 1
    return counts


def stratified_split(data: Dataset, spec: SplitSpec, seed: int) -> tuple:
    """Disjoint per-class proportional (pretrain, valid, test) partition.

    Each split keeps the original sample order.
    """
    y = data.require_labels()
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for k in range(data.n_classes):
        members = np.flatnonzero(y == k)
        if members.size == 0:
            continue
        if members.size < 3:
            raise SplitError(f"class {k} has {members.size} samples; need at least 3")
        counts = allocate(members.size, spec.fractions)
        perm = rng.permutation(members)
        start = 0
        for part, c in zip(parts, counts):
            part.extend(perm[start:start + c])
            start += c
    names = ("pretrain", "valid", "test")
    return tuple(data.take(np.sort(np.array(p, dtype=np.int64)), f"{data.name}/{n}") for p, n in zip(parts, names))


def balance_upsample(data: Dataset, seed: int) -> Dataset:
    """Resample minority classes with replacement up to the largest class.

    Every original sample is kept (in order); the extra draws are appended
    class by class.
    """
    y = data.require_labels()
    counts = data.class_counts()
    if np.any(counts == 0):
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    rng = np.random.default_rng(seed)
    target = counts.max()
    extra = []
    for k in range(data.n_classes):
        members = np.flatnonzero(y == k)
        if members.size < target:
            extra.append(rng.choice(members, size=target - members.size, replace=True))
    idx = np.concatenate([np.arange(len(data))] + extra)
    return data.take(idx, f"{data.name}/balanced")


def per_class_quota(count: int, ratio: float) -> int:
    # rounding guards against 0.1 * 60 == 6.000000000000001
    return int(math.ceil(round(ratio * count, 9)))


def label_ratio_subset(data: Dataset, ratio: float, seed: int) -> Dataset:
    """Stratified sample of ``ceil(ratio * n_k)`` items per class.

    For a fixed seed the subsets are nested: a larger ratio extends the
    selection made at a smaller one.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"label ratio {ratio} outside (0, 1]")
    y = data.require_labels()
    if ratio == 1.0:
        return data
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(data.n_classes):
        members = np.flatnonzero(y == k)
        perm = rng.permutation(members)
        keep.append(perm[: per_class_quota(members.size, ratio)])
    return data.take(np.sort(np.concatenate(keep)), f"{data.name}@{ratio:g}")


# --- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    n_classes: int = 6
    c: int = 3
    d: int = 200
    noise_std: float = 0.1
    base_freq: float = 0.01
    phase_jitter: float = math.pi / 4
    seed: int = 0


def synth_generate(
    n_per_class: int = 100,
    n_classes: int = 6,
    c: int = 3,
    d: int = 200,
    noise_std: float = 0.1,
    seed: int = 0,
    base_freq: float = 0.01,
    phase_jitter: float = math.pi / 4,
) -> Dataset:
    """Class ``k`` is a sinusoid of frequency ``(k+1) * base_freq`` (cycles
    per step) on every channel. Channel ``ch`` carries a fixed phase offset
    ``ch * 2pi / c`` plus a uniform random phase in ``±phase_jitter``;
    Gaussian noise of ``noise_std`` is added on top. Samples are ordered
    class by class.
    """
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if n_per_class < 1 or c < 1 or d < 1 or noise_std < 0:
        raise ConfigError("invalid synthetic dataset parameters")
    rng = np.random.default_rng(seed)
    t = np.arange(d, dtype=np.float64)
    offsets = 2 * np.pi * np.arange(c) / c
    xs = []
    for k in range(n_classes):
        phase = offsets[None, :] + rng.uniform(-phase_jitter, phase_jitter, size=(n_per_class, c))
        freq = (k + 1) * base_freq
        wave = np.sin(2 * np.pi * freq * t[None, None, :] + phase[:, :, None])
        xs.append(wave + noise_std * rng.standard_normal((n_per_class, c, d)))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(np.concatenate(xs), labels, n_classes, "synthetic")
