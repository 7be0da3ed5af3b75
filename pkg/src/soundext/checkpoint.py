"""Versioned checkpoint container.

A checkpoint is a directory:

    config.json          model config, vocabulary, column flags, metadata
    weights/<key>.npy    one array per trainable tensor (stable key scheme:
                         extraction.*, enrollment.*, embedding.matrix)

Storing one array per file keeps byte-level diffs between checkpoints
localized: adaptation must change only embedding.matrix.npy and config.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import ClassVocabulary, EmbeddingMatrix, init_embedding_matrix
from .model import ModelConfig, TargetSoundModel, build_model

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab: ClassVocabulary
    embedding: EmbeddingMatrix
    extraction_state: dict[str, np.ndarray]
    enrollment_state: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.vocab) != self.embedding.num_classes:
            raise ValueError(
                f"vocabulary size {len(self.vocab)} != embedding columns {self.embedding.num_classes}"
            )
        if self.embedding.dim != self.model_config.embed_dim:
            raise ValueError("embedding matrix dimension != model embed_dim")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        weights_dir = path / "weights"
        weights_dir.mkdir(parents=True, exist_ok=True)
        header = {
            "format_version": FORMAT_VERSION,
            "model_config": self.model_config.to_dict(),
            "vocab": self.vocab.labels,
            "column_trainable": self.embedding.trainable.tolist(),
            "metadata": self.metadata,
        }
        (path / "config.json").write_text(
            json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        np.save(weights_dir / "embedding.matrix.npy", self.embedding.values)
        for prefix, state in (("extraction", self.extraction_state),
                              ("enrollment", self.enrollment_state)):
            for key, value in state.items():
                np.save(weights_dir / f"{prefix}.{key}.npy", value)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        header_path = path / "config.json"
        if not header_path.exists():
            raise FileNotFoundError(f"not a checkpoint directory: {path}")
        header = json.loads(header_path.read_text(encoding="utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")
        weights_dir = path / "weights"
        extraction_state: dict[str, np.ndarray] = {}
        enrollment_state: dict[str, np.ndarray] = {}
        embedding_values = None
        for npy in sorted(weights_dir.glob("*.npy")):
            key = npy.name[: -len(".npy")]
            array = np.load(npy)
            if key == "embedding.matrix":
                embedding_values = array
            elif key.startswith("extraction."):
                extraction_state[key[len("extraction."):]] = array
            elif key.startswith("enrollment."):
                enrollment_state[key[len("enrollment."):]] = array
            else:
                raise ValueError(f"{path}: unrecognized weight file {npy.name}")
        if embedding_values is None:
            raise ValueError(f"{path}: missing embedding.matrix.npy")
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            vocab=ClassVocabulary(header["vocab"]),
            embedding=EmbeddingMatrix(embedding_values, np.asarray(header["column_trainable"])),
            extraction_state=extraction_state,
            enrollment_state=enrollment_state,
            metadata=header.get("metadata", {}),
        )

    def to_model(self, dtype: torch.dtype = torch.float32) -> TargetSoundModel:
        """Materialize a torch model carrying this checkpoint's weights."""
        model = TargetSoundModel(self.model_config, len(self.vocab))
        state = {f"extraction.{k}": torch.from_numpy(v.copy()) for k, v in self.extraction_state.items()}
        state.update({f"enrollment.{k}": torch.from_numpy(v.copy()) for k, v in self.enrollment_state.items()})
        state["embedding"] = torch.from_numpy(self.embedding.values.copy())
        model.load_state_dict({k: v.to(torch.float32) for k, v in state.items()})
        return model.to(dtype)

    @classmethod
    def from_model(
        cls,
        model: TargetSoundModel,
        vocab: ClassVocabulary,
        metadata: dict | None = None,
        column_trainable: np.ndarray | None = None,
    ) -> "Checkpoint":
        def grab(module: torch.nn.Module) -> dict[str, np.ndarray]:
            return {
                k: v.detach().to(torch.float32).cpu().numpy().copy()
                for k, v in module.state_dict().items()
            }

        embedding = EmbeddingMatrix(
            model.embedding.detach().to(torch.float32).cpu().numpy().copy(),
            column_trainable,
        )
        return cls(
            model_config=model.cfg,
            vocab=vocab,
            embedding=embedding,
            extraction_state=grab(model.extraction),
            enrollment_state=grab(model.enrollment),
            metadata=metadata or {},
        )


def init_checkpoint(cfg: ModelConfig, labels: list[str], seed: int = 0) -> Checkpoint:
    """Fresh, deterministic initialization for a given vocabulary."""
    model = build_model(cfg, num_classes=len(labels), seed=seed)
    vocab = ClassVocabulary(labels)
    ckpt = Checkpoint.from_model(model, vocab, metadata={"seed": seed, "epoch": None, "dev_loss": None})
    # embedding init spec: uniform in +-1/sqrt(D) from a numpy stream, so the
    # matrix is reproducible independently of torch layer-init ordering
    ckpt.embedding = init_embedding_matrix(cfg.embed_dim, len(labels), seed=seed)
    return ckpt
