"""Conditioning embeddings: class vocabulary, embedding matrix, encoders.

The 1-hot pathway is a plain column lookup in a D x N matrix whose columns
are per-class embeddings. The enrollment pathway runs the enrollment encoder
network and averages over time; K-shot embeddings are the arithmetic mean of
K single-shot embeddings. Registering a new class appends a column without
perturbing any existing one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import EnrollmentEncoder
from .signal import Waveform

_EMB_MAGIC = b"SXEMB001"


class ClassVocabulary:
    """Ordered, unique class labels with stable index lookup."""

    def __init__(self, labels: Sequence[str]):
        labels = list(labels)
        if len(set(labels)) != len(labels):
            raise ValueError("vocabulary labels must be unique")
        self._labels = labels
        self._index = {label: i for i, label in enumerate(labels)}

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def index(self, label: str) -> int:
        if label not in self._index:
            raise KeyError(f"unknown class label {label!r}")
        return self._index[label]

    def label(self, index: int) -> str:
        return self._labels[index]

    def with_label(self, label: str) -> "ClassVocabulary":
        if label in self._index:
            raise ValueError(f"label {label!r} already registered")
        return ClassVocabulary(self._labels + [label])


@dataclass
class EmbeddingMatrix:
    """D x N matrix of class embeddings plus a per-column trainable flag."""

    values: np.ndarray
    trainable: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("embedding matrix contains non-finite entries")
        self.values = values
        if self.trainable is None:
            self.trainable = np.ones(values.shape[1], dtype=bool)
        else:
            self.trainable = np.asarray(self.trainable, dtype=bool)
            if self.trainable.shape != (values.shape[1],):
                raise ValueError("trainable flags must have one entry per column")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


def init_embedding_matrix(dim: int, num_classes: int, seed: int = 0) -> EmbeddingMatrix:
    """Uniform init in [-1/sqrt(D), 1/sqrt(D)]."""
    bound = 1.0 / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    values = rng.uniform(-bound, bound, size=(dim, num_classes)).astype(np.float32)
    return EmbeddingMatrix(values)


def encode_one_hot(class_index: int, matrix: EmbeddingMatrix) -> np.ndarray:
    """Column lookup: the embedding of class n is the n-th column."""
    if not 0 <= class_index < matrix.num_classes:
        raise IndexError(
            f"class index {class_index} out of range [0, {matrix.num_classes})"
        )
    return matrix.values[:, class_index].copy()


class WaveformEmbedder:
    """Adapter running the torch enrollment encoder on Waveform inputs."""

    def __init__(self, encoder: EnrollmentEncoder):
        self.encoder = encoder

    def __call__(self, enrollment: Waveform) -> np.ndarray:
        dtype = next(self.encoder.parameters()).dtype
        batch = torch.from_numpy(np.ascontiguousarray(enrollment.samples)).to(dtype).unsqueeze(0)
        with torch.no_grad():
            emb = self.encoder(batch)
        return emb.squeeze(0).to(torch.float32).numpy().copy()


def encode_enrollment(enrollment: Waveform, encoder: EnrollmentEncoder) -> np.ndarray:
    """Embedding of one enrollment sample; length may differ from the mixture."""
    return WaveformEmbedder(encoder)(enrollment)


def average_embeddings(
    samples: Sequence[Waveform], embed: Callable[[Waveform], np.ndarray]
) -> np.ndarray:
    """Arithmetic mean of the per-sample embeddings (K-shot averaging)."""
    if len(samples) == 0:
        raise ValueError("average_embeddings: empty sample list")
    vectors = [np.asarray(embed(s), dtype=np.float64) for s in samples]
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"embeddings disagree in shape: {sorted(dims)}")
    return (np.sum(vectors, axis=0) / len(vectors)).astype(np.float32)


def register_class(
    matrix: EmbeddingMatrix, vocab: ClassVocabulary, label: str, embedding: np.ndarray
) -> tuple[EmbeddingMatrix, ClassVocabulary]:
    """Append one column for a new label; existing columns stay bit-identical."""
    embedding = np.asarray(embedding, dtype=matrix.values.dtype).reshape(-1)
    if embedding.shape[0] != matrix.dim:
        raise ValueError(
            f"embedding dimension {embedding.shape[0]} != matrix dimension {matrix.dim}"
        )
    new_vocab = vocab.with_label(label)  # raises on duplicates
    values = np.concatenate([matrix.values, embedding[:, None]], axis=1)
    trainable = np.concatenate([matrix.trainable, [True]])
    return EmbeddingMatrix(values, trainable), new_vocab


def export_embedding_matrix(matrix: EmbeddingMatrix, vocab: ClassVocabulary, path: str | Path) -> None:
    """Versioned binary block (magic, dims, float32 column-major data) + label sidecar."""
    if len(vocab) != matrix.num_classes:
        raise ValueError("vocabulary size does not match matrix columns")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = matrix.values.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.dim, matrix.num_classes))
        fh.write(np.asfortranarray(data).tobytes(order="F"))
    sidecar = path.with_suffix(path.suffix + ".labels.txt")
    sidecar.write_text("".join(f"{label}\n" for label in vocab.labels), encoding="utf-8")


def import_embedding_matrix(path: str | Path) -> tuple[EmbeddingMatrix, ClassVocabulary]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(_EMB_MAGIC)] != _EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding-matrix block (bad magic)")
    dim, num = struct.unpack("<II", raw[len(_EMB_MAGIC) : len(_EMB_MAGIC) + 8])
    body = raw[len(_EMB_MAGIC) + 8 :]
    expected = dim * num * 4
    if len(body) != expected:
        raise ValueError(f"{path}: payload size {len(body)} != expected {expected}")
    values = np.frombuffer(body, dtype=np.float32).reshape((dim, num), order="F").copy()
    sidecar = path.with_suffix(path.suffix + ".labels.txt")
    labels = [line for line in sidecar.read_text(encoding="utf-8").splitlines() if line]
    if len(labels) != num:
        raise ValueError(f"{sidecar}: {len(labels)} labels for {num} columns")
    return EmbeddingMatrix(values), ClassVocabulary(labels)
