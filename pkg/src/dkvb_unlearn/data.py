"""Embedding datasets: the EMB1 file format, synthetic class blobs and
retain/forget splitting.

Everything downstream of the frozen encoder only ever sees a
:class:`LabeledEmbeddings` instance, so this module is the single point
where raw features enter the package.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sIII")


class EmbeddingFormatError(ValueError):
    """Raised for malformed EMB1 payloads. ``offset`` is the byte position
    at which the problem was detected."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LabeledEmbeddings:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be a vector with one entry per feature row")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if feats.shape[1] == 0:
            raise ValueError("feature dimension must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledEmbeddings":
        return LabeledEmbeddings(self.features[index], self.labels[index], self.num_classes)

    @classmethod
    def concat(cls, parts: Sequence["LabeledEmbeddings"]) -> "LabeledEmbeddings":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.num_classes for p in parts),
        )


@dataclass(frozen=True)
class DatasetBundle:
    train_retain: LabeledEmbeddings
    train_forget: LabeledEmbeddings
    test_retain: LabeledEmbeddings
    test_forget: LabeledEmbeddings
    forget_classes: frozenset

    @property
    def train(self) -> LabeledEmbeddings:
        return LabeledEmbeddings.concat([self.train_retain, self.train_forget])

    @property
    def test(self) -> LabeledEmbeddings:
        return LabeledEmbeddings.concat([self.test_retain, self.test_forget])


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional Gaussian blobs standing in for frozen-backbone features.

    Class ``c`` draws ``mean_c + noise_std * eps`` with ``eps ~ N(0, I)``;
    ``mean_c`` has Euclidean norm ``mean_scale``.
    """

    num_classes: int = 10
    dim: int = 64
    train_per_class: int = 200
    test_per_class: int = 50
    mean_scale: float = 4.0
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "dim", "train_per_class", "test_per_class"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


# --------------------------------------------------------------------- EMB1 io

def write_embeddings(path, data: LabeledEmbeddings) -> None:
    n, d = data.features.shape
    header = _HEADER.pack(EMB1_MAGIC, n, d, data.num_classes)
    payload = np.ascontiguousarray(data.features, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(data.labels, dtype="<u4").tobytes()
    Path(path).write_bytes(header + payload + labels)


def load_embeddings(path) -> LabeledEmbeddings:
    return parse_embeddings(Path(path).read_bytes())


def parse_embeddings(buf: bytes) -> LabeledEmbeddings:
    if len(buf) < _HEADER.size:
        raise EmbeddingFormatError("truncated header", len(buf))
    magic, n, d, num_classes = _HEADER.unpack_from(buf, 0)
    if magic != EMB1_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}", 0)
    if n == 0 or d == 0 or num_classes == 0:
        raise EmbeddingFormatError("N, D and num_classes must be positive", 4)
    feat_end = _HEADER.size + 4 * n * d
    label_end = feat_end + 4 * n
    if len(buf) < feat_end:
        raise EmbeddingFormatError("truncated feature payload", len(buf))
    if len(buf) < label_end:
        raise EmbeddingFormatError("truncated label payload", len(buf))
    if len(buf) > label_end:
        raise EmbeddingFormatError("trailing bytes after label payload", label_end)
    features = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=feat_end)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise EmbeddingFormatError(
            f"label out of range: {labels[i]} >= num_classes={num_classes}", feat_end + 4 * i
        )
    finite = np.isfinite(features)
    if not finite.all():
        i = int(np.flatnonzero(~finite.ravel())[0])
        raise EmbeddingFormatError("non-finite feature value", _HEADER.size + 4 * i)
    return LabeledEmbeddings(features.astype(np.float32), labels.astype(np.int64), int(num_classes))


def read_csv_embeddings(path, num_classes: int | None = None) -> LabeledEmbeddings:
    """Read a ``d0,...,dK,label`` CSV with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise ValueError("CSV header must end with a 'label' column")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError("CSV contains no data rows")
    table = np.asarray(rows, dtype=np.float64)
    labels = table[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ValueError("labels must be non-negative integers")
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return LabeledEmbeddings(table[:, :-1].astype(np.float32), labels, k)


# ------------------------------------------------------------------ synthetic

def class_means(spec: SyntheticSpec) -> np.ndarray:
    # One Philox stream per class id: adding classes never moves existing means.
    means = np.empty((spec.num_classes, spec.dim))
    for c in range(spec.num_classes):
        rng = np.random.Generator(np.random.Philox(key=spec.seed, counter=[0, 0, 0, c]))
        g = rng.standard_normal(spec.dim)
        means[c] = spec.mean_scale * g / np.linalg.norm(g)
    return means


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledEmbeddings, LabeledEmbeddings]:
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, 0x5EED])

    def draw(per_class):
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        eps = rng.standard_normal((labels.size, spec.dim))
        feats = (means[labels] + spec.noise_std * eps).astype(np.float32)
        return LabeledEmbeddings(feats, labels, spec.num_classes)

    train = draw(spec.train_per_class)
    test = draw(spec.test_per_class)
    return train, test


# ------------------------------------------------------------------ splitting

def split_by_classes(
    train: LabeledEmbeddings, test: LabeledEmbeddings, forget_classes: Iterable[int]
) -> DatasetBundle:
    forget = frozenset(int(c) for c in forget_classes)
    if not forget:
        raise ValueError("forget_classes must be nonempty")
    k = max(train.num_classes, test.num_classes)
    unknown = [c for c in forget if not 0 <= c < k]
    if unknown:
        raise ValueError(f"unknown class id(s): {sorted(unknown)}")
    ids = np.fromiter(sorted(forget), dtype=np.int64)

    def part(data):
        is_forget = np.isin(data.labels, ids)
        return data.subset(~is_forget), data.subset(is_forget)

    train_retain, train_forget = part(train)
    test_retain, test_forget = part(test)
    return DatasetBundle(train_retain, train_forget, test_retain, test_forget, forget)


def select_forget_class(misclass_counts: Sequence[int]) -> int:
    """Best-learned class: fewest misclassifications, lowest id on ties."""
    counts = np.asarray(misclass_counts)
    if counts.size == 0:
        raise ValueError("misclassification counts are empty")
    if np.any(counts < 0):
        raise ValueError("misclassification counts must be non-negative")
    return int(np.argmin(counts))


def misclassification_counts(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    wrong = np.asarray(labels)[np.asarray(predictions) != np.asarray(labels)]
    return np.bincount(wrong, minlength=num_classes)
