"""Paired image/text feature datasets, label oracles, splits and their binary file formats."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"UKDF"
LABEL_MAGIC = b"UKDL"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")
_LABEL_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Malformed UKDF/UKDL file. ``code`` identifies the failure kind."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class UnsupportedVersionError(FormatError):
    code = "bad_version"


class TruncatedPayloadError(FormatError):
    code = "truncated"


class DimensionMismatchError(FormatError):
    code = "dim_mismatch"


class NonFiniteValueError(FormatError):
    code = "non_finite"


@dataclass(eq=False)
class PairedDataset:
    """N aligned (image feature, text feature) rows; row i of both matrices is one instance."""

    image_features: np.ndarray
    text_features: np.ndarray

    def __post_init__(self):
        img = np.ascontiguousarray(self.image_features, dtype="<f4")
        txt = np.ascontiguousarray(self.text_features, dtype="<f4")
        if img.ndim != 2 or txt.ndim != 2:
            raise ValueError("feature matrices must be 2-D")
        if img.shape[0] != txt.shape[0]:
            raise DimensionMismatchError(
                f"image rows {img.shape[0]} != text rows {txt.shape[0]}"
            )
        if img.shape[0] < 1 or img.shape[1] < 1 or txt.shape[1] < 1:
            raise ValueError("dataset needs N >= 1 and non-empty feature dims")
        if not (np.isfinite(img).all() and np.isfinite(txt).all()):
            raise NonFiniteValueError("features contain NaN or Inf")
        self.image_features = img
        self.text_features = txt

    @property
    def n(self) -> int:
        return self.image_features.shape[0]

    @property
    def d_image(self) -> int:
        return self.image_features.shape[1]

    @property
    def d_text(self) -> int:
        return self.text_features.shape[1]

    def features(self, modality: str) -> np.ndarray:
        if modality == "image":
            return self.image_features
        if modality == "text":
            return self.text_features
        raise ValueError(f"unknown modality {modality!r}")

    def subset(self, indices) -> PairedDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return PairedDataset(self.image_features[idx], self.text_features[idx])

    def __eq__(self, other):
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return np.array_equal(self.image_features, other.image_features) and np.array_equal(
            self.text_features, other.text_features
        )


@dataclass(eq=False)
class LabelSet:
    """Multi-label ground truth, N x C boolean. Only evaluation code may look at it."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("labels must be an N x C matrix")
        lab = lab.astype(bool)
        if not lab.any(axis=1).all():
            raise ValueError("every instance needs at least one label")
        self.labels = lab

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, indices) -> LabelSet:
        return LabelSet(self.labels[np.asarray(indices, dtype=np.int64)])

    def relevance(self, rows=None, cols=None) -> np.ndarray:
        """Boolean relevance matrix between ``rows`` and ``cols`` (default: all)."""
        a = self.labels if rows is None else self.labels[np.asarray(rows)]
        b = self.labels if cols is None else self.labels[np.asarray(cols)]
        return (a.astype(np.int32) @ b.T.astype(np.int32)) > 0

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass
class SplitSpec:
    query_indices: np.ndarray
    retrieval_indices: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        self.retrieval_indices = np.asarray(self.retrieval_indices, dtype=np.int64)
        if np.intersect1d(self.query_indices, self.retrieval_indices).size:
            raise ValueError("query and retrieval sets overlap")
        for idx in (self.query_indices, self.retrieval_indices):
            if idx.size and idx.min() < 0:
                raise ValueError("negative index in split")

    def validate(self, n: int) -> None:
        for idx in (self.query_indices, self.retrieval_indices):
            if idx.size and idx.max() >= n:
                raise IndexError(f"split index {idx.max()} out of range for N={n}")

    def to_dict(self) -> dict:
        return {
            "query_indices": self.query_indices.tolist(),
            "retrieval_indices": self.retrieval_indices.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SplitSpec:
        return cls(d["query_indices"], d["retrieval_indices"], d.get("seed"))


def make_split(n: int, n_query: int, seed: int) -> SplitSpec:
    """Seeded query/retrieval split; every non-query index goes to retrieval."""
    if not 0 < n_query < n:
        raise ValueError(f"n_query must be in (0, {n}), got {n_query}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(np.sort(perm[:n_query]), np.sort(perm[n_query:]), seed)


# ---------------------------------------------------------------------------
# file formats


def save_features(dataset: PairedDataset, path) -> None:
    path = Path(path)
    if not str(path) or path == Path(""):
        raise OSError("empty output path")
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, dataset.n, dataset.d_image, dataset.d_text
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.image_features.astype("<f4").tobytes())
        fh.write(dataset.text_features.astype("<f4").tobytes())


def load_features(path) -> PairedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a UKDF file")
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, d_i, d_t = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    if n < 1 or d_i < 1 or d_t < 1:
        raise DimensionMismatchError(f"{path}: degenerate header N={n} D_I={d_i} D_T={d_t}")
    expected = 4 * (n * d_i + n * d_t)
    payload = raw[_FEATURE_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise DimensionMismatchError(
            f"{path}: {len(payload) - expected} bytes beyond the declared image/text sections"
        )
    values = np.frombuffer(payload, dtype="<f4")
    img = values[: n * d_i].reshape(n, d_i)
    txt = values[n * d_i:].reshape(n, d_t)
    if not (np.isfinite(img).all() and np.isfinite(txt).all()):
        raise NonFiniteValueError(f"{path}: non-finite feature value")
    return PairedDataset(img.copy(), txt.copy())


def save_labels(labels: LabelSet, path) -> None:
    n, c = labels.labels.shape
    bits = np.packbits(labels.labels, axis=1, bitorder="little")
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, n, c))
        fh.write(bits.tobytes())


def load_labels(path) -> LabelSet:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != LABEL_MAGIC:
        raise BadMagicError(f"{path}: not a UKDL file")
    if len(raw) < _LABEL_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, n, c = _LABEL_HEADER.unpack_from(raw)
    row_bytes = (c + 7) // 8
    payload = raw[_LABEL_HEADER.size:]
    if len(payload) < n * row_bytes:
        raise TruncatedPayloadError(f"{path}: label payload truncated")
    if len(payload) > n * row_bytes:
        raise DimensionMismatchError(f"{path}: trailing bytes after label payload")
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(n, row_bytes)
    return LabelSet(np.unpackbits(bits, axis=1, count=c, bitorder="little").astype(bool))


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(
    n_pairs: int,
    n_classes: int,
    d_image: int,
    d_text: int,
    noise: float,
    seed: int,
    max_labels: int = 2,
) -> tuple[PairedDataset, LabelSet]:
    """Class-prototype paired data with multi-label ground truth.

    Each instance owns 1..``max_labels`` latent classes (uniformly many, distinct).
    Every modality has its own random unit prototype per class; an instance's feature is
    the mean of its prototypes plus isotropic Gaussian noise of std ``noise``, drawn
    independently per modality.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if d_image < 2 or d_text < 2:
        raise ValueError("feature dims must be >= 2")
    if noise < 0 or not np.isfinite(noise):
        raise ValueError("noise must be a finite value >= 0")
    if not 1 <= max_labels <= n_classes:
        raise ValueError("max_labels must be in [1, n_classes]")

    rng = np.random.default_rng(seed)
    protos = []
    for d in (d_image, d_text):
        p = rng.standard_normal((n_classes, d))
        protos.append(p / np.linalg.norm(p, axis=1, keepdims=True))

    labels = np.zeros((n_pairs, n_classes), dtype=bool)
    counts = rng.integers(1, max_labels + 1, size=n_pairs)
    for i, c in enumerate(counts):
        labels[i, rng.choice(n_classes, size=c, replace=False)] = True

    weights = labels / labels.sum(axis=1, keepdims=True)
    feats = []
    for p in protos:
        f = weights @ p
        if noise > 0:
            f = f + noise * rng.standard_normal(f.shape)
        feats.append(f)
    return PairedDataset(feats[0], feats[1]), LabelSet(labels)


def oracle_relevant(labels: LabelSet, i: int, j: int) -> bool:
    n = labels.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"index out of range for N={n}: ({i}, {j})")
    return bool(np.any(labels.labels[i] & labels.labels[j]))
