"""Single-branch and mixed multi-task training.

Modes:
    one_hot     extraction loss with 1-hot embeddings only
    enrollment  extraction loss with enrollment embeddings only
    mixed       both extraction losses, no embedding loss
    mixed_el    both extraction losses + alpha * cosine embedding loss

Both branches drive the same extraction network. The per-branch loss is the
negative scale-dependent SNR. Model selection is by lowest dev loss; training
runs in float32 while reported metrics are plain Python floats.

Determinism: every random draw (target choice, enrollment choice, crop
windows, shuffling) derives from (config seed, epoch, index), so a repeated
run on one worker reproduces the loss trace exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .bank import EventBank
from .checkpoint import Checkpoint
from .scenes import SceneManifest, SceneStore, pick_enrollment_ids
from .signal import Waveform

MODES = ("one_hot", "enrollment", "mixed", "mixed_el")


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears; names the offending batch seed."""


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "mixed_el"
    alpha: float = 3.0
    lr: float = 1e-4
    clip_norm: float = 5.0
    max_epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    branch_schedule: str = "joint"  # joint: both branches per step; alternate: swap per step
    crop_s: float | None = None  # train on random excerpts of this length (speed knob)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.branch_schedule not in ("joint", "alternate"):
            raise ValueError(f"branch_schedule must be joint|alternate, got {self.branch_schedule!r}")

    @property
    def uses_enrollment(self) -> bool:
        return self.mode in ("enrollment", "mixed", "mixed_el")

    @property
    def uses_one_hot(self) -> bool:
        return self.mode in ("one_hot", "mixed", "mixed_el")


@dataclass(frozen=True)
class LossReport:
    """Per-batch loss components; total is the exact float sum of the parts.

    total = l_ext_enrl + l_ext_onehot + alpha * l_emb, with absent parts
    skipped, evaluated in this order on the stored Python floats so the
    recomposition is reproducible bit for bit.
    """

    l_ext_enrl: float | None
    l_ext_onehot: float | None
    l_emb: float | None
    alpha: float
    total: float

    @classmethod
    def combine(cls, *, enrl: float | None, onehot: float | None,
                emb: float | None, alpha: float) -> "LossReport":
        total = 0.0
        if enrl is not None:
            total = total + enrl
        if onehot is not None:
            total = total + onehot
        if emb is not None:
            total = total + alpha * emb
        return cls(l_ext_enrl=enrl, l_ext_onehot=onehot, l_emb=emb, alpha=alpha, total=total)


@dataclass(frozen=True)
class TrainingExample:
    mixture: Waveform
    target_stem: Waveform
    target_class_index: int
    target_class: str
    target_source_id: str
    enrollment: Waveform | None


@dataclass
class Batch:
    mixture: torch.Tensor  # (B, T)
    target: torch.Tensor  # (B, T)
    class_index: torch.Tensor  # (B,)
    enrollment: torch.Tensor | None  # (B, Ta)
    seed: int = 0


def select_target(
    manifest: SceneManifest,
    store: SceneStore,
    bank: EventBank,
    class_index_of,
    seed,
    with_enrollment: bool = True,
) -> TrainingExample:
    """Uniformly pick one event of the scene as target and attach enrollment.

    The remaining stems plus noise form the interference implicitly: the loss
    reference is the target stem. class_index_of maps label -> vocab index.
    """
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(manifest.events)))
    event = manifest.events[idx]
    target = store.stem(manifest, idx)
    enrollment = None
    if with_enrollment:
        enroll_seed = int(rng.integers(0, 2**62))
        enroll_id = pick_enrollment_ids(bank, event.class_label, event.source_id, 1, enroll_seed)[0]
        enrollment = bank.clip(enroll_id).waveform
    return TrainingExample(
        mixture=store.mixture(manifest),
        target_stem=target,
        target_class_index=class_index_of(event.class_label),
        target_class=event.class_label,
        target_source_id=event.source_id,
        enrollment=enrollment,
    )


def _crop_window(rng: np.random.Generator, total: int, crop: int,
                 ev_start: int, ev_len: int) -> int:
    """Crop start guaranteeing the window overlaps the target event substantially."""
    if crop >= total:
        return 0
    ev_end = ev_start + ev_len
    need = min(ev_len, crop)
    lo = max(0, ev_start - crop + (need + 1) // 2)
    hi = min(total - crop, ev_end - (need + 1) // 2)
    if hi < lo:
        return int(np.clip(ev_start, 0, total - crop))
    return int(rng.integers(lo, hi + 1))


def make_batch(
    examples: list[TrainingExample],
    manifests: list[SceneManifest] | None = None,
    crop_s: float | None = None,
    crop_seed=None,
    batch_seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Stack examples into tensors, optionally cropping around the target event."""
    sr = examples[0].mixture.sample_rate_hz
    mixtures, targets, enrollments = [], [], []
    rng = np.random.default_rng(crop_seed) if crop_seed is not None else None
    for i, ex in enumerate(examples):
        mix = ex.mixture.samples
        tgt = ex.target_stem.samples
        enr = ex.enrollment.samples if ex.enrollment is not None else None
        if crop_s is not None:
            crop = int(round(crop_s * sr))
            if manifests is None:
                raise ValueError("cropping requires manifests for event positions")
            man = manifests[i]
            event = next(e for e in man.events if e.source_id == ex.target_source_id)
            start = _crop_window(
                rng, len(mix), crop,
                int(round(event.onset_s * sr)), int(round(event.excerpt_len_s * sr)),
            )
            mix = mix[start : start + crop]
            tgt = tgt[start : start + crop]
            if enr is not None and len(enr) > crop:
                e0 = int(rng.integers(0, len(enr) - crop + 1))
                enr = enr[e0 : e0 + crop]
        mixtures.append(torch.from_numpy(np.ascontiguousarray(mix)))
        targets.append(torch.from_numpy(np.ascontiguousarray(tgt)))
        if enr is not None:
            enrollments.append(torch.from_numpy(np.ascontiguousarray(enr)))

    if enrollments and len({e.shape[-1] for e in enrollments}) != 1:
        raise ValueError("enrollment clips in one batch must share a length")
    return Batch(
        mixture=torch.stack(mixtures).to(dtype),
        target=torch.stack(targets).to(dtype),
        class_index=torch.tensor([ex.target_class_index for ex in examples], dtype=torch.long),
        enrollment=torch.stack(enrollments).to(dtype) if enrollments else None,
        seed=batch_seed,
    )


def neg_snr_loss_batch(estimate: torch.Tensor, reference: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differentiable negative SNR per example, mean over the batch."""
    ref_power = (reference**2).sum(dim=-1)
    err_power = ((reference - estimate) ** 2).sum(dim=-1)
    ratio = ref_power / torch.maximum(err_power, eps * ref_power)
    return (-10.0 * torch.log10(ratio)).mean()


def cosine_distance_batch(u: torch.Tensor, v: torch.Tensor, tiny: float = 1e-12) -> torch.Tensor:
    """Differentiable mean cosine distance between paired rows of u and v."""
    dot = (u * v).sum(dim=-1)
    norms = u.norm(dim=-1) * v.norm(dim=-1)
    return (1.0 - dot / torch.clamp(norms, min=tiny)).mean()


def compute_loss(
    model, batch: Batch, cfg: TrainingConfig, step: int = 0, eps: float = 1e-8
) -> tuple[torch.Tensor, LossReport]:
    """Mode-dependent multi-task loss; returns the backward tensor and a report."""
    if cfg.uses_enrollment and batch.enrollment is None:
        raise ValueError(f"mode {cfg.mode!r} requires enrollment audio in the batch")

    e_onehot = model.embed_one_hot(batch.class_index) if cfg.uses_one_hot else None
    e_enrl = model.embed_enrollment(batch.enrollment) if cfg.uses_enrollment else None

    run_onehot = cfg.uses_one_hot
    run_enrl = cfg.uses_enrollment
    if cfg.mode in ("mixed", "mixed_el") and cfg.branch_schedule == "alternate":
        # swap the active extraction branch per step; embeddings (and the
        # embedding loss in mixed_el) are still computed from both encoders
        run_onehot = step % 2 == 0
        run_enrl = not run_onehot

    l_onehot_t = l_enrl_t = None
    if run_onehot and run_enrl:
        # single concatenated pass through the shared extraction network
        doubled = torch.cat([batch.mixture, batch.mixture], dim=0)
        est = model.extraction(doubled, torch.cat([e_onehot, e_enrl], dim=0))
        n = batch.mixture.shape[0]
        l_onehot_t = neg_snr_loss_batch(est[:n], batch.target, eps)
        l_enrl_t = neg_snr_loss_batch(est[n:], batch.target, eps)
    elif run_onehot:
        est = model.extraction(batch.mixture, e_onehot)
        l_onehot_t = neg_snr_loss_batch(est, batch.target, eps)
    elif run_enrl:
        est = model.extraction(batch.mixture, e_enrl)
        l_enrl_t = neg_snr_loss_batch(est, batch.target, eps)

    l_emb_t = None
    if cfg.mode == "mixed_el":
        l_emb_t = cosine_distance_batch(e_enrl, e_onehot)

    total_t = None
    for term, weight in ((l_enrl_t, 1.0), (l_onehot_t, 1.0), (l_emb_t, cfg.alpha)):
        if term is not None:
            total_t = weight * term if total_t is None else total_t + weight * term

    report = LossReport.combine(
        enrl=None if l_enrl_t is None else float(l_enrl_t.detach()),
        onehot=None if l_onehot_t is None else float(l_onehot_t.detach()),
        emb=None if l_emb_t is None else float(l_emb_t.detach()),
        alpha=cfg.alpha if cfg.mode == "mixed_el" else 0.0,
    )
    return total_t, report


def clip_gradients(parameters, max_norm: float) -> tuple[float, float]:
    """Clip by global norm; returns (pre-clip norm, post-clip norm)."""
    params = [p for p in parameters if p.grad is not None]
    pre = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
    post = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    return pre, post


def _batch_indices(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


def _mean_report(reports: list[LossReport]) -> dict:
    def mean_of(name):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "l_ext_enrl": mean_of("l_ext_enrl"),
        "l_ext_onehot": mean_of("l_ext_onehot"),
        "l_emb": mean_of("l_emb"),
        "total": mean_of("total"),
    }


def train(
    train_store: SceneStore,
    dev_store: SceneStore,
    bank: EventBank,
    init: Checkpoint,
    cfg: TrainingConfig,
    out_dir: str | Path,
    epoch_callback=None,
) -> Checkpoint:
    """Minimize the mode's loss; return (and persist) the lowest-dev-loss model.

    epoch_callback(model, epoch, train_row, dev_row) -> bool may stop training
    early. The trace (one JSONL row per split per epoch) lands in
    out_dir/trace.jsonl; the selected checkpoint in out_dir/best; a resumable
    snapshot with optimizer state in out_dir/resume.pt.
    """
    if len(train_store) == 0 or len(dev_store) == 0:
        raise ValueError("train and dev sets must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = init.to_model(torch.float32)
    vocab = init.vocab
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    best_dev = math.inf
    best_ckpt: Checkpoint | None = None
    trace_rows: list[dict] = []
    trace_path = out_dir / "trace.jsonl"
    step = 0

    with open(trace_path, "w", encoding="utf-8") as trace_fh:
        for epoch in range(cfg.max_epochs):
            model.train()
            order_rng = np.random.default_rng([cfg.seed, 101, epoch])
            order = order_rng.permutation(len(train_store))
            reports = []
            grad_pre = []
            grad_post_engaged = []
            for batch_idx, chunk in enumerate(_batch_indices(order, cfg.batch_size)):
                manifests = [train_store.manifests[i] for i in chunk]
                examples = [
                    select_target(
                        man, train_store, bank, vocab.index,
                        seed=[cfg.seed, 11, epoch, int(i)],
                        with_enrollment=cfg.uses_enrollment,
                    )
                    for man, i in zip(manifests, chunk)
                ]
                batch_seed = (cfg.seed * 1_000_003 + epoch) * 100_003 + batch_idx
                batch = make_batch(
                    examples, manifests, cfg.crop_s,
                    crop_seed=[cfg.seed, 12, epoch, batch_idx], batch_seed=batch_seed,
                )
                loss_t, report = compute_loss(model, batch, cfg, step=step)
                if not math.isfinite(report.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step} (batch seed {batch_seed})"
                    )
                optimizer.zero_grad()
                loss_t.backward()
                pre, post = clip_gradients(model.parameters(), cfg.clip_norm)
                optimizer.step()
                step += 1
                reports.append(report)
                grad_pre.append(pre)
                if pre > cfg.clip_norm:
                    grad_post_engaged.append(post)

            train_row = {"epoch": epoch, "split": "train", **_mean_report(reports),
                         "grad_norm_pre_mean": float(np.mean(grad_pre)),
                         "grad_norm_post_max_engaged": max(grad_post_engaged, default=None)}

            model.eval()
            dev_reports = []
            # dev targets use epoch-independent draws so the loss is
            # comparable across epochs
            with torch.no_grad():
                for chunk in _batch_indices(np.arange(len(dev_store)), cfg.batch_size):
                    manifests = [dev_store.manifests[i] for i in chunk]
                    examples = [
                        select_target(
                            man, dev_store, bank, vocab.index,
                            seed=[cfg.seed, 909, int(i)],
                            with_enrollment=cfg.uses_enrollment,
                        )
                        for man, i in zip(manifests, chunk)
                    ]
                    batch = make_batch(examples, manifests, cfg.crop_s,
                                       crop_seed=[cfg.seed, 908, int(chunk[0])])
                    _, report = compute_loss(model, batch, cfg, step=0)
                    dev_reports.append(report)
            dev_row = {"epoch": epoch, "split": "dev", **_mean_report(dev_reports)}

            for row in (train_row, dev_row):
                trace_rows.append(row)
                trace_fh.write(json.dumps(row, sort_keys=True) + "\n")
            trace_fh.flush()

            if dev_row["total"] < best_dev:
                best_dev = dev_row["total"]
                best_ckpt = Checkpoint.from_model(
                    model, vocab,
                    metadata={"epoch": epoch, "dev_loss": best_dev, "mode": cfg.mode,
                              "seed": cfg.seed, "adapted_labels": []},
                )

            torch.save(
                {"model": model.state_dict(), "optimizer": optimizer.state_dict(),
                 "epoch": epoch, "step": step},
                out_dir / "resume.pt",
            )
            if epoch_callback is not None and epoch_callback(model, epoch, train_row, dev_row):
                break

    assert best_ckpt is not None
    best_ckpt.save(out_dir / "best")
    return best_ckpt
