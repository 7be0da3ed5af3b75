"""Deterministic scene synthesis: event placement, SNR-controlled noise, datasets.

A scene is a fixed-duration mixture of event excerpts pasted at random onsets
onto background noise. Rendering is float32 end to end and the mixture is the
left-to-right float32 sum of the stems, so `mixture == sum(stems)` holds
bit-exactly and a manifest regenerates its scene byte-identically.

The background noise gain is chosen so the ratio between the summed event
stems and the noise over the full clip hits the drawn SNR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bank import EventBank
from .signal import Waveform, gain_for_snr, read_wav, write_wav

# Scene seeds are master_seed * 2**30 + scene_index; keep counts below 2**30.
_SEED_STRIDE = 2**30


@dataclass(frozen=True)
class GeneratorConfig:
    n_events: int = 3
    clip_min_s: float = 2.0
    clip_max_s: float = 5.0
    duration_s: float = 6.0
    snr_lo_db: float = 15.0
    snr_hi_db: float = 25.0
    event_gain_lo_db: float = -6.0
    event_gain_hi_db: float = 0.0
    sample_rate_hz: int = 8000
    master_seed: int = 0

    def __post_init__(self):
        if self.n_events < 1:
            raise ValueError("n_events must be >= 1")
        if not (self.clip_min_s <= self.clip_max_s <= self.duration_s):
            raise ValueError("need clip_min_s <= clip_max_s <= duration_s")
        if self.snr_lo_db > self.snr_hi_db:
            raise ValueError("snr_lo_db must not exceed snr_hi_db")


@dataclass(frozen=True)
class SceneEvent:
    source_id: str
    class_label: str
    onset_s: float
    excerpt_start_s: float
    excerpt_len_s: float
    gain: float


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    duration_s: float
    sample_rate_hz: int
    events: tuple[SceneEvent, ...]
    noise_source_id: str
    noise_snr_db: float
    target_class: str
    seed: int

    def __post_init__(self):
        labels = [e.class_label for e in self.events]
        if len(set(labels)) != len(labels):
            raise ValueError(f"{self.scene_id}: event classes must be pairwise distinct: {labels}")
        if labels.count(self.target_class) != 1:
            raise ValueError(f"{self.scene_id}: target_class {self.target_class!r} not among events")
        for e in self.events:
            if e.onset_s + e.excerpt_len_s > self.duration_s + 1e-9:
                raise ValueError(f"{self.scene_id}: event {e.source_id} exceeds scene duration")

    def target_index(self) -> int:
        for i, e in enumerate(self.events):
            if e.class_label == self.target_class:
                return i
        raise AssertionError("unreachable: validated in __post_init__")

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "duration_s": self.duration_s,
            "sample_rate_hz": self.sample_rate_hz,
            "events": [vars(e) for e in self.events],
            "noise_source_id": self.noise_source_id,
            "noise_snr_db": self.noise_snr_db,
            "target_class": self.target_class,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneManifest":
        return cls(
            scene_id=data["scene_id"],
            duration_s=float(data["duration_s"]),
            sample_rate_hz=int(data["sample_rate_hz"]),
            events=tuple(SceneEvent(**e) for e in data["events"]),
            noise_source_id=data["noise_source_id"],
            noise_snr_db=float(data["noise_snr_db"]),
            target_class=data["target_class"],
            seed=int(data["seed"]),
        )


def scene_seed(master_seed: int, scene_index: int) -> int:
    if not 0 <= scene_index < _SEED_STRIDE:
        raise ValueError(f"scene_index out of range: {scene_index}")
    return master_seed * _SEED_STRIDE + scene_index


def _render_event_stem(manifest: SceneManifest, event: SceneEvent, bank: EventBank) -> Waveform:
    sr = manifest.sample_rate_hz
    n_total = int(round(manifest.duration_s * sr))
    clip = bank.clip(event.source_id)
    start = int(round(event.excerpt_start_s * sr))
    length = int(round(event.excerpt_len_s * sr))
    onset = int(round(event.onset_s * sr))
    segment = clip.waveform.samples[start : start + length]
    if segment.size != length:
        raise ValueError(f"{manifest.scene_id}: excerpt exceeds clip {event.source_id}")
    stem = np.zeros(n_total, dtype=np.float32)
    stem[onset : onset + length] = (segment * event.gain).astype(np.float32)
    return Waveform(stem, sr)


def render_scene(
    manifest: SceneManifest, bank: EventBank, noise_bank: EventBank
) -> tuple[Waveform, list[Waveform], Waveform]:
    """Render (mixture, event stems, noise stem) from a manifest, bit-exactly."""
    sr = manifest.sample_rate_hz
    n_total = int(round(manifest.duration_s * sr))
    stems = [_render_event_stem(manifest, e, bank) for e in manifest.events]

    event_sum = stems[0].samples.copy()
    for stem in stems[1:]:
        event_sum = event_sum + stem.samples
    event_power = float(np.sum(event_sum.astype(np.float64) ** 2))
    if event_power <= 0.0:
        raise ValueError(f"{manifest.scene_id}: event stems carry no energy")

    noise_clip = noise_bank.clip(manifest.noise_source_id).waveform
    if len(noise_clip) < n_total:
        raise ValueError(f"{manifest.scene_id}: noise clip shorter than scene")
    noise_slice = noise_clip.samples[:n_total]
    noise_power = float(np.sum(noise_slice.astype(np.float64) ** 2))
    gain = gain_for_snr(event_power, noise_power, manifest.noise_snr_db)
    noise_stem = Waveform((noise_slice * gain).astype(np.float32), sr)

    mixture = Waveform(event_sum + noise_stem.samples, sr)
    return mixture, stems, noise_stem


def generate_scene(
    bank: EventBank,
    noise_bank: EventBank,
    cfg: GeneratorConfig,
    seed: int,
    *,
    scene_id: str = "scene",
    event_classes: Sequence[str] | None = None,
    class_pool: Sequence[str] | None = None,
    target_class: str | None = None,
    source_pools: dict[str, list[str]] | None = None,
) -> tuple[SceneManifest, Waveform, list[Waveform], Waveform]:
    """Draw one scene and render it.

    event_classes pins the class line-up (otherwise drawn without replacement
    from class_pool, default the whole bank), target_class pins the designated
    target (otherwise uniform among the events), and source_pools restricts
    clip choice per class.
    """
    rng = np.random.default_rng(seed)
    sr = cfg.sample_rate_hz
    n_total = int(round(cfg.duration_s * sr))

    labels = sorted(class_pool) if class_pool is not None else bank.labels
    if event_classes is None:
        if len(labels) < cfg.n_events:
            raise ValueError(
                f"bank has {len(labels)} classes; need >= {cfg.n_events} distinct"
            )
        chosen = [labels[i] for i in rng.choice(len(labels), size=cfg.n_events, replace=False)]
    else:
        chosen = list(event_classes)
        if len(set(chosen)) != len(chosen):
            raise ValueError(f"event_classes must be distinct: {chosen}")

    events = []
    for label in chosen:
        pool = sorted(source_pools[label]) if source_pools and label in source_pools else bank.source_ids(label)
        if not pool:
            raise ValueError(f"empty source pool for class {label!r}")
        source_id = pool[int(rng.integers(len(pool)))]
        clip_len = len(bank.clip(source_id).waveform)
        lo = int(round(cfg.clip_min_s * sr))
        hi = min(int(round(cfg.clip_max_s * sr)), clip_len)
        if lo > hi:
            raise ValueError(f"clip {source_id} shorter than clip_min_s")
        excerpt_len = int(rng.integers(lo, hi + 1))
        excerpt_start = int(rng.integers(0, clip_len - excerpt_len + 1))
        onset = int(rng.integers(0, n_total - excerpt_len + 1))
        gain_db = float(rng.uniform(cfg.event_gain_lo_db, cfg.event_gain_hi_db))
        events.append(
            SceneEvent(
                source_id=source_id,
                class_label=label,
                onset_s=onset / sr,
                excerpt_start_s=excerpt_start / sr,
                excerpt_len_s=excerpt_len / sr,
                gain=10.0 ** (gain_db / 20.0),
            )
        )

    noise_ids = noise_bank.source_ids("noise")
    noise_source_id = noise_ids[int(rng.integers(len(noise_ids)))]
    noise_snr_db = float(rng.uniform(cfg.snr_lo_db, cfg.snr_hi_db))
    if target_class is None:
        target_class = chosen[int(rng.integers(len(chosen)))]

    manifest = SceneManifest(
        scene_id=scene_id,
        duration_s=cfg.duration_s,
        sample_rate_hz=sr,
        events=tuple(events),
        noise_source_id=noise_source_id,
        noise_snr_db=noise_snr_db,
        target_class=target_class,
        seed=seed,
    )
    mixture, stems, noise_stem = render_scene(manifest, bank, noise_bank)
    return manifest, mixture, stems, noise_stem


def pick_enrollment_ids(
    bank: EventBank, class_label: str, exclude_source_id: str | None, k: int, seed: int
) -> list[str]:
    """k distinct clip ids of a class, never the excluded one."""
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = [s for s in bank.source_ids(class_label) if s != exclude_source_id]
    if len(candidates) < k:
        raise ValueError(
            f"class {class_label!r} has {len(candidates)} eligible clip(s); need {k}"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[int(i)] for i in picks]


def pick_enrollment(
    bank: EventBank, class_label: str, exclude_source_id: str | None, k: int, seed: int
) -> list[Waveform]:
    ids = pick_enrollment_ids(bank, class_label, exclude_source_id, k, seed)
    return [bank.clip(s).waveform for s in ids]


def _write_scene(split_dir: Path, manifest: SceneManifest, mixture, stems, noise_stem, include_stems: bool) -> None:
    scene_dir = split_dir / manifest.scene_id
    write_wav(scene_dir / "mixture.wav", mixture)
    write_wav(scene_dir / "target.wav", stems[manifest.target_index()])
    if include_stems:
        for k, stem in enumerate(stems):
            write_wav(scene_dir / f"stem_{k}.wav", stem)
        write_wav(scene_dir / "noise.wav", noise_stem)


def _generate_split(
    bank: EventBank,
    noise_bank: EventBank,
    cfg: GeneratorConfig,
    count: int,
    split: str,
    out_dir: str | Path,
    scene_plan,
    include_stems: bool,
    workers: int = 1,
) -> Path:
    """Render `count` scenes into out_dir/split; scene_plan(i) -> generate_scene kwargs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    split_dir = Path(out_dir) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = split_dir / "manifest.jsonl"

    indices = list(range(count))
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            results = pool.starmap(
                _render_one,
                [(bank, noise_bank, cfg, split, i, scene_plan(i)) for i in indices],
            )
    else:
        results = [_render_one(bank, noise_bank, cfg, split, i, scene_plan(i)) for i in indices]

    with open(manifest_path, "w", encoding="utf-8") as fh:
        for manifest, mixture, stems, noise_stem in results:
            _write_scene(split_dir, manifest, mixture, stems, noise_stem, include_stems)
            fh.write(json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
    return manifest_path


def _render_one(bank, noise_bank, cfg, split, index, kwargs):
    return generate_scene(
        bank,
        noise_bank,
        cfg,
        scene_seed(cfg.master_seed, index),
        scene_id=f"{split}_{index:06d}",
        **kwargs,
    )


def generate_dataset(
    bank: EventBank,
    noise_bank: EventBank,
    cfg: GeneratorConfig,
    count: int,
    split: str,
    out_dir: str | Path,
    *,
    class_pool: Sequence[str] | None = None,
    include_stems: bool = True,
    workers: int = 1,
) -> Path:
    """Uniform dataset: classes drawn from class_pool (default whole bank)."""
    pool = sorted(class_pool) if class_pool is not None else None
    return _generate_split(
        bank, noise_bank, cfg, count, split, out_dir,
        lambda i: {"class_pool": pool}, include_stems, workers,
    )


def generate_new_class_dataset(
    bank: EventBank,
    noise_bank: EventBank,
    cfg: GeneratorConfig,
    count: int,
    split: str,
    out_dir: str | Path,
    seen_labels: Sequence[str],
    new_labels: Sequence[str],
    *,
    new_source_pools: dict[str, list[str]] | None = None,
    include_stems: bool = True,
    workers: int = 1,
) -> Path:
    """Scenes of (n_events - 1) seen classes plus one new class, target = new.

    new_source_pools optionally restricts the new-class clips, e.g. to a
    K-shot enrollment pool when building an adaptation set.
    """
    seen = sorted(seen_labels)
    news = sorted(new_labels)
    if cfg.n_events - 1 > len(seen):
        raise ValueError("not enough seen classes for the requested scene shape")
    if not news:
        raise ValueError("need at least one new class")

    def plan(i: int) -> dict:
        rng = np.random.default_rng([cfg.master_seed, 77_000, i])
        new_label = news[int(rng.integers(len(news)))]
        picked = [seen[j] for j in rng.choice(len(seen), size=cfg.n_events - 1, replace=False)]
        return {
            "event_classes": picked + [new_label],
            "target_class": new_label,
            "source_pools": new_source_pools,
        }

    return _generate_split(bank, noise_bank, cfg, count, split, out_dir, plan, include_stems, workers)


class SceneStore:
    """Read access to one rendered split: manifests plus lazily loaded WAVs."""

    def __init__(self, split_dir: str | Path, cache: bool = False):
        self.split_dir = Path(split_dir)
        manifest_path = self.split_dir / "manifest.jsonl"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest at {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            self.manifests = [SceneManifest.from_dict(json.loads(line)) for line in fh if line.strip()]
        self._cache: dict[tuple[str, str], Waveform] = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifests)

    def _load(self, scene_id: str, name: str) -> Waveform:
        key = (scene_id, name)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        wf = read_wav(self.split_dir / scene_id / f"{name}.wav")
        if self._cache is not None:
            self._cache[key] = wf
        return wf

    def mixture(self, manifest: SceneManifest) -> Waveform:
        return self._load(manifest.scene_id, "mixture")

    def target_stem(self, manifest: SceneManifest) -> Waveform:
        return self._load(manifest.scene_id, "target")

    def stem(self, manifest: SceneManifest, event_index: int) -> Waveform:
        path = self.split_dir / manifest.scene_id / f"stem_{event_index}.wav"
        if not path.exists():
            raise FileNotFoundError(f"missing stem: {path}")
        return self._load(manifest.scene_id, f"stem_{event_index}")

    def has_stems(self, manifest: SceneManifest) -> bool:
        return (self.split_dir / manifest.scene_id / "stem_0.wav").exists()

    def noise(self, manifest: SceneManifest) -> Waveform:
        return self._load(manifest.scene_id, "noise")
