"""Few-shot extension to new classes.

A new class is registered from K enrollment clips: its initial embedding is
either the K-shot average or random, the embedding matrix gains one column,
and only that column is retrained on an adaptation set (scenes of seen-class
interference plus the new class, built solely from the K-shot pool). Every
other parameter is carried over bit-identically, so seen-class behavior on
the 1-hot path cannot change.

Each registered class trains against its own scenes with its own optimizer
state and label-derived seeds, so adapting classes jointly or one at a time
yields identical columns.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bank import EventBank
from .checkpoint import Checkpoint
from .conditioning import (
    ClassVocabulary,
    EmbeddingMatrix,
    WaveformEmbedder,
    average_embeddings,
    encode_one_hot,
)
from .scenes import GeneratorConfig, SceneStore, generate_new_class_dataset
from .signal import Waveform
from .training import clip_gradients, neg_snr_loss_batch


@dataclass(frozen=True)
class AdaptationConfig:
    k_shots: int = 5
    epochs: int = 10
    lr: float = 1e-3
    init: str = "avg"  # avg: K-shot mean embedding; random: matrix-init distribution
    adaptation_mixtures: int = 100
    seed: int = 0
    batch_size: int = 8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init not in ("avg", "random"):
            raise ValueError(f"init must be avg|random, got {self.init!r}")


@dataclass
class NewClassRegistration:
    label: str
    shot_source_ids: list[str]
    initial: np.ndarray
    init_kind: str
    adapted: np.ndarray | None = None


def register_new_classes(
    checkpoint: Checkpoint,
    shots: dict[str, list[str]],
    bank: EventBank,
    cfg: AdaptationConfig,
) -> list[NewClassRegistration]:
    """Build registrations with initial embeddings from the K-shot pools."""
    embed = WaveformEmbedder(checkpoint.to_model().enrollment)
    registrations = []
    for label in sorted(shots):
        if label in checkpoint.vocab:
            raise ValueError(f"label {label!r} already in the vocabulary")
        source_ids = list(shots[label])
        if not source_ids:
            raise ValueError(f"empty K-shot pool for {label!r}")
        if cfg.init == "avg":
            clips = [bank.clip(s).waveform for s in source_ids]
            initial = average_embeddings(clips, embed)
        else:
            bound = 1.0 / np.sqrt(checkpoint.model_config.embed_dim)
            rng = np.random.default_rng([cfg.seed, zlib.crc32(label.encode())])
            initial = rng.uniform(-bound, bound, size=checkpoint.model_config.embed_dim).astype(np.float32)
        registrations.append(
            NewClassRegistration(label, source_ids, initial, cfg.init)
        )
    return registrations


def build_adaptation_set(
    bank: EventBank,
    noise_bank: EventBank,
    gen_cfg: GeneratorConfig,
    seen_labels: list[str],
    registrations: list[NewClassRegistration],
    cfg: AdaptationConfig,
    out_dir: str | Path,
    split: str = "adapt",
) -> SceneStore:
    """Scenes of seen-class interference plus one new class drawn from its K-shot pool."""
    pools = {r.label: list(r.shot_source_ids) for r in registrations}
    for label, pool in pools.items():
        if not pool:
            raise ValueError(f"empty K-shot pool for {label!r}")
    generate_new_class_dataset(
        bank,
        noise_bank,
        gen_cfg,
        cfg.adaptation_mixtures,
        split,
        out_dir,
        seen_labels=seen_labels,
        new_labels=sorted(pools),
        new_source_pools=pools,
    )
    return SceneStore(Path(out_dir) / split)


def _adapt_one_column(
    model, store: SceneStore, label: str, initial: np.ndarray, cfg: AdaptationConfig
) -> tuple[np.ndarray, list[float]]:
    """Train one embedding column on its scenes; everything else stays frozen."""
    manifests = [m for m in store.manifests if m.target_class == label]
    if not manifests:
        raise ValueError(f"adaptation set has no scenes targeting {label!r}")
    column = torch.tensor(np.asarray(initial, dtype=np.float32), requires_grad=True)
    optimizer = torch.optim.Adam([column], lr=cfg.lr)
    label_key = zlib.crc32(label.encode())
    epoch_losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, label_key, epoch])
        order = rng.permutation(len(manifests))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [manifests[int(i)] for i in order[start : start + cfg.batch_size]]
            mixture = torch.stack(
                [torch.from_numpy(store.mixture(m).samples) for m in chunk]
            )
            target = torch.stack(
                [torch.from_numpy(store.stem(m, m.target_index()).samples) for m in chunk]
            )
            emb = column.unsqueeze(0).expand(len(chunk), -1)
            loss = neg_snr_loss_batch(model.extraction(mixture, emb), target)
            optimizer.zero_grad()
            loss.backward()
            clip_gradients([column], cfg.clip_norm)
            optimizer.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))
    return column.detach().numpy().copy(), epoch_losses


def adapt(
    checkpoint: Checkpoint,
    registrations: list[NewClassRegistration],
    adaptation_store: SceneStore,
    cfg: AdaptationConfig,
) -> tuple[Checkpoint, dict]:
    """Retrain only the newly registered embedding columns.

    Returns the augmented checkpoint (all pre-existing arrays bit-identical)
    and a per-label adaptation report.
    """
    if checkpoint.metadata.get("mode") == "enrollment":
        raise ValueError("adaptation requires a model with a 1-hot pathway")
    for reg in registrations:
        if reg.label in checkpoint.vocab:
            raise ValueError(f"label {reg.label!r} collides with the vocabulary")

    model = checkpoint.to_model(torch.float32)
    model.requires_grad_(False)
    model.eval()

    report: dict = {"labels": {}}
    new_columns = []
    for reg in registrations:
        adapted, losses = _adapt_one_column(model, adaptation_store, reg.label, reg.initial, cfg)
        reg.adapted = adapted
        new_columns.append(adapted.astype(checkpoint.embedding.values.dtype))
        report["labels"][reg.label] = {
            "init": reg.init_kind,
            "shots": list(reg.shot_source_ids),
            "epoch_losses": losses,
            "column_delta_norm": float(np.linalg.norm(adapted - reg.initial)),
        }

    values = np.concatenate(
        [checkpoint.embedding.values] + [c[:, None] for c in new_columns], axis=1
    )
    trainable = np.concatenate(
        [np.zeros(checkpoint.embedding.num_classes, dtype=bool), np.ones(len(new_columns), dtype=bool)]
    )
    vocab = checkpoint.vocab
    for reg in registrations:
        vocab = vocab.with_label(reg.label)

    metadata = dict(checkpoint.metadata)
    metadata["adapted_labels"] = list(metadata.get("adapted_labels", [])) + [
        r.label for r in registrations
    ]
    metadata["adaptation"] = {
        "k_shots": cfg.k_shots, "epochs": cfg.epochs, "lr": cfg.lr,
        "init": cfg.init, "seed": cfg.seed,
    }
    adapted_ckpt = Checkpoint(
        model_config=checkpoint.model_config,
        vocab=vocab,
        embedding=EmbeddingMatrix(values, trainable),
        extraction_state={k: v.copy() for k, v in checkpoint.extraction_state.items()},
        enrollment_state={k: v.copy() for k, v in checkpoint.enrollment_state.items()},
        metadata=metadata,
    )
    return adapted_ckpt, report


def embed_for_class(
    checkpoint: Checkpoint,
    label: str | None = None,
    shots: list[Waveform] | None = None,
) -> np.ndarray:
    """Embedding dispatch: vocabulary column for known labels, K-shot average otherwise."""
    if label is not None and label in checkpoint.vocab:
        return encode_one_hot(checkpoint.vocab.index(label), checkpoint.embedding)
    if shots:
        embed = WaveformEmbedder(checkpoint.to_model().enrollment)
        return average_embeddings(shots, embed)
    raise KeyError(f"unknown label {label!r} and no enrollment shots provided")


def write_registration_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
