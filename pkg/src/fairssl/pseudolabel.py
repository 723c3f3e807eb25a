"""Zero-shot binary pseudo-labels from positive/negative text-template embeddings.

Each attribute is scored by comparing an image embedding against a positive
and a negative template embedding: the two scaled similarities go through a
softmax, giving a probability pair. Multiple template pairs are aggregated by
averaging the probabilities, which keeps confidences bounded and independent
of the template count. A high-confidence, class-balanced subset of the
resulting table doubles as a label-free validation set for later training
stages.

Table file layout (little-endian)::

    magic "FSPL" | u32 version=1 | u64 n | u32 a | n*a * (u8 label, f32 confidence)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FileSizeError, FormatError, SelectionError
from .seeding import substream
from .store import EmbeddingMatrix, load_embeddings

MAGIC = b"FSPL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")
_ENTRY_DTYPE = np.dtype([("label", "u1"), ("conf", "<f4")])

DEFAULT_SCALE = 100.0

_UNIT_TOL = 1e-5


@dataclass
class AttributeTemplates:
    """Template embeddings for one attribute: T positive and T negative rows."""

    name: str
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self) -> None:
        self.pos = np.atleast_2d(np.asarray(self.pos, dtype=np.float64))
        self.neg = np.atleast_2d(np.asarray(self.neg, dtype=np.float64))
        if self.pos.shape != self.neg.shape:
            raise DataError(
                f"attribute {self.name!r}: template count/shape mismatch "
                f"{self.pos.shape} vs {self.neg.shape}"
            )
        if self.pos.shape[0] < 1:
            raise DataError(f"attribute {self.name!r}: needs at least one template pair")
        for which, rows in (("pos", self.pos), ("neg", self.neg)):
            norms = np.linalg.norm(rows, axis=1)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise DataError(f"attribute {self.name!r}: {which} templates must be unit rows")


@dataclass
class TemplateBank:
    attributes: list[AttributeTemplates]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @classmethod
    def load(cls, index_path: str | Path) -> "TemplateBank":
        """Read a JSON index mapping attribute name -> {pos, neg} embedding files.

        Paths in the index are resolved relative to the index file.
        """
        index_path = Path(index_path)
        try:
            index = json.loads(index_path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read template index {index_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index_path}: invalid JSON: {exc}") from exc
        attributes = []
        for name, entry in index.items():
            try:
                pos_path = index_path.parent / entry["pos"]
                neg_path = index_path.parent / entry["neg"]
            except (TypeError, KeyError) as exc:
                raise FormatError(f"{index_path}: attribute {name!r} needs pos/neg paths") from exc
            attributes.append(
                AttributeTemplates(
                    name=name,
                    pos=load_embeddings(pos_path).data,
                    neg=load_embeddings(neg_path).data,
                )
            )
        return cls(attributes)


@dataclass
class PseudoLabelTable:
    """n x a binary labels with confidences in [0.5, 1]."""

    labels: np.ndarray
    confidences: np.ndarray
    attribute_names: list[str]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.confidences = np.asarray(self.confidences, dtype=np.float32)
        if self.labels.shape != self.confidences.shape or self.labels.ndim != 2:
            raise DataError("labels and confidences must be matching 2-D arrays")
        if self.labels.shape[1] != len(self.attribute_names):
            raise DataError("attribute name count does not match table width")
        if self.labels.size and (self.confidences.min() < 0.5 - 1e-6 or self.confidences.max() > 1 + 1e-6):
            raise DataError("confidences must lie in [0.5, 1]")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_attributes(self) -> int:
        return self.labels.shape[1]

    def attribute_index(self, name: str) -> int:
        try:
            return self.attribute_names.index(name)
        except ValueError:
            raise DataError(f"unknown attribute {name!r}") from None

    def save(self, path: str | Path) -> None:
        entries = np.empty(self.labels.shape, dtype=_ENTRY_DTYPE)
        entries["label"] = self.labels
        entries["conf"] = self.confidences
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, self.n, self.num_attributes)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(entries.tobytes())
        Path(str(path) + ".attrs.json").write_text(
            json.dumps(self.attribute_names, sort_keys=True)
        )

    @classmethod
    def load(cls, path: str | Path) -> "PseudoLabelTable":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: file shorter than header")
        magic, version, n, a = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        expected = _HEADER.size + n * a * _ENTRY_DTYPE.itemsize
        if len(raw) != expected:
            raise FileSizeError(f"{path}: expected {expected} bytes, found {len(raw)}")
        entries = np.frombuffer(raw, dtype=_ENTRY_DTYPE, offset=_HEADER.size).reshape(n, a)
        attrs_path = Path(str(path) + ".attrs.json")
        if attrs_path.exists():
            names = list(json.loads(attrs_path.read_text()))
        else:
            names = [f"attr{i}" for i in range(a)]
        return cls(entries["label"].copy(), entries["conf"].copy(), names)


def _check_unit(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > _UNIT_TOL:
        raise DataError(f"{what} must be a unit vector (norm {norm:.6f})")
    return v


def _pair_probabilities(pos_sim: np.ndarray, neg_sim: np.ndarray, scale: float) -> np.ndarray:
    """Two-class softmax over scaled (positive, negative) similarities."""
    logits = scale * np.stack([pos_sim, neg_sim], axis=-1)
    shift = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - shift)
    return ex / ex.sum(axis=-1, keepdims=True)


def zero_shot_label(
    img: np.ndarray, pos: np.ndarray, neg: np.ndarray, scale: float = DEFAULT_SCALE
) -> tuple[int, float]:
    """Label an embedding against one positive/negative template pair.

    Returns (label, confidence) where label is 1 iff the positive probability
    is at least the negative one (ties resolve to 1) and confidence is the
    larger probability, hence always >= 0.5.
    """
    if scale <= 0:
        raise DataError(f"scale must be positive, got {scale}")
    img = _check_unit(img, "image embedding")
    pos = _check_unit(pos, "positive template")
    neg = _check_unit(neg, "negative template")
    probs = _pair_probabilities(np.dot(img, pos), np.dot(img, neg), scale)
    label = 1 if probs[0] >= probs[1] else 0
    return label, float(probs.max())


def attribute_probabilities(
    images: EmbeddingMatrix, templates: AttributeTemplates, scale: float = DEFAULT_SCALE
) -> np.ndarray:
    """Averaged (positive, negative) class probabilities per sample, one
    softmax per template pair; each returned row sums to 1."""
    if scale <= 0:
        raise DataError(f"scale must be positive, got {scale}")
    if not images.normalized:
        raise DataError("image embeddings must be row-normalized for zero-shot labeling")
    data = images.data.astype(np.float64)
    pos_sims = data @ templates.pos.T  # (n, T)
    neg_sims = data @ templates.neg.T
    probs = _pair_probabilities(pos_sims, neg_sims, scale)  # (n, T, 2)
    return probs.mean(axis=1)


def label_attribute(
    images: EmbeddingMatrix, templates: AttributeTemplates, scale: float = DEFAULT_SCALE
) -> tuple[np.ndarray, np.ndarray]:
    """Label every row of ``images`` for one attribute, averaging the
    per-template probability pairs before thresholding. Ties go to label 1."""
    mean_probs = attribute_probabilities(images, templates, scale)
    labels = (mean_probs[:, 0] >= mean_probs[:, 1]).astype(np.uint8)
    confidences = mean_probs.max(axis=1)
    return labels, confidences


def build_pseudolabel_table(
    images: EmbeddingMatrix, bank: TemplateBank, scale: float = DEFAULT_SCALE
) -> PseudoLabelTable:
    """Apply :func:`label_attribute` across every attribute in the bank."""
    n = images.n
    a = len(bank.attributes)
    labels = np.zeros((n, a), dtype=np.uint8)
    confidences = np.zeros((n, a), dtype=np.float32)
    for col, templates in enumerate(bank.attributes):
        if templates.pos.shape[1] != images.d:
            raise DataError(
                f"attribute {templates.name!r}: template dim {templates.pos.shape[1]} "
                f"does not match embedding dim {images.d}"
            )
        lab, conf = label_attribute(images, templates, scale)
        labels[:, col] = lab
        confidences[:, col] = conf
    return PseudoLabelTable(labels, confidences, bank.names)


def select_validation_subset(
    table: PseudoLabelTable,
    attribute: str,
    conf_threshold: float,
    m: int,
    seed: int,
) -> np.ndarray:
    """Seeded, class-balanced draw of m high-confidence samples for one attribute.

    Both pseudo-classes contribute equally when they can; any shortfall is
    filled from the class with more qualifying samples. Returns sorted indices.
    """
    col = table.attribute_index(attribute)
    conf = table.confidences[:, col].astype(np.float64)
    qualifying = np.flatnonzero(conf >= conf_threshold)
    if qualifying.size < m:
        raise SelectionError(
            f"attribute {attribute!r}: only {qualifying.size} samples reach "
            f"confidence {conf_threshold}, need {m}"
        )
    labels = table.labels[qualifying, col]
    class0 = qualifying[labels == 0]
    class1 = qualifying[labels == 1]
    small, big = sorted([class0, class1], key=lambda idx: idx.size)
    want_small = min(m // 2, small.size)
    want_big = m - want_small
    rng = substream(seed, "validation-subset", attribute)
    pick_small = rng.choice(small, size=want_small, replace=False) if want_small else np.empty(0, dtype=np.int64)
    pick_big = rng.choice(big, size=want_big, replace=False)
    return np.sort(np.concatenate([pick_small, pick_big]).astype(np.int64))
