"""Synthetic event-clip bank and background-noise bank.

Stands in for a real labeled corpus: each class is a parametric recipe
(tones, chirps, band-limited noise, amplitude-modulated noise) rendered into
several clips with per-clip random variation. Banks are a pure function of
their spec, so the same spec always yields bit-identical clips.

Recipes produce sustained textures (no long silent stretches) so that any
2-5 s excerpt carries target energy. All clips are RMS-normalized.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .signal import Waveform, read_wav, write_wav

CLIP_RMS = 0.1


def _band_noise(rng: np.random.Generator, n: int, sr: int, low_hz: float, high_hz: float) -> np.ndarray:
    """White noise bandpassed to [low_hz, high_hz] via FFT masking."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spectrum[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    return np.fft.irfft(spectrum, n=n)


def _slow_am(rng: np.random.Generator, n: int, sr: int, rate_lo: float, rate_hi: float, depth: float) -> np.ndarray:
    """Sinusoidal amplitude envelope that never drops below 1 - depth."""
    rate = rng.uniform(rate_lo, rate_hi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n) / sr
    return 1.0 - depth * 0.5 * (1.0 + np.sin(2.0 * np.pi * rate * t + phase))


def _edge_ramp(n: int, sr: int, ramp_s: float = 0.02) -> np.ndarray:
    env = np.ones(n)
    k = min(int(ramp_s * sr), n // 2)
    if k > 0:
        ramp = np.linspace(0.0, 1.0, k)
        env[:k] = ramp
        env[-k:] = ramp[::-1]
    return env


def recipe_tone(rng: np.random.Generator, n: int, sr: int, params: dict) -> np.ndarray:
    """Harmonic tone with random fundamental, vibrato, and slow AM."""
    f0 = rng.uniform(params["f_lo"], params["f_hi"])
    partial_amps = params.get("partials", [1.0, 0.5])
    vib_rate = rng.uniform(3.0, 6.0)
    vib_depth = rng.uniform(0.0, 0.01) * f0
    t = np.arange(n) / sr
    inst_freq_dev = vib_depth * np.sin(2.0 * np.pi * vib_rate * t)
    phase0 = np.cumsum(2.0 * np.pi * (f0 + inst_freq_dev) / sr)
    out = np.zeros(n)
    for k, amp in enumerate(partial_amps, start=1):
        if k * (f0 + vib_depth) >= sr / 2:
            break
        out += amp * np.sin(k * phase0 + rng.uniform(0.0, 2.0 * np.pi))
    return out * _slow_am(rng, n, sr, 0.3, 1.2, 0.3)


def recipe_chirp(rng: np.random.Generator, n: int, sr: int, params: dict) -> np.ndarray:
    """Repeated linear sweeps inside a fixed band, random direction and period."""
    f_lo, f_hi = params["f_lo"], params["f_hi"]
    period_s = rng.uniform(0.6, 1.5)
    upward = rng.random() < 0.5
    t = np.arange(n) / sr
    pos = (t % period_s) / period_s
    if not upward:
        pos = 1.0 - pos
    inst_freq = f_lo + (f_hi - f_lo) * pos
    phase = np.cumsum(2.0 * np.pi * inst_freq / sr)
    return np.sin(phase) * _slow_am(rng, n, sr, 0.2, 0.8, 0.2)


def recipe_band_noise(rng: np.random.Generator, n: int, sr: int, params: dict) -> np.ndarray:
    """Stationary noise confined to a band, with slight random edge jitter."""
    jitter = (params["f_hi"] - params["f_lo"]) * 0.1
    low = params["f_lo"] + rng.uniform(-jitter, jitter)
    high = params["f_hi"] + rng.uniform(-jitter, jitter)
    return _band_noise(rng, n, sr, low, high) * _slow_am(rng, n, sr, 0.2, 1.0, 0.25)


def recipe_am_noise(rng: np.random.Generator, n: int, sr: int, params: dict) -> np.ndarray:
    """Band-limited noise with a strong amplitude modulation signature."""
    carrier = _band_noise(rng, n, sr, params["f_lo"], params["f_hi"])
    rate = rng.uniform(params.get("am_lo", 3.0), params.get("am_hi", 6.0))
    t = np.arange(n) / sr
    env = 0.5 * (1.0 + np.sin(2.0 * np.pi * rate * t + rng.uniform(0.0, 2.0 * np.pi)))
    return carrier * (0.15 + 0.85 * env)


RECIPES: dict[str, Callable[[np.random.Generator, int, int, dict], np.ndarray]] = {
    "tone": recipe_tone,
    "chirp": recipe_chirp,
    "band_noise": recipe_band_noise,
    "am_noise": recipe_am_noise,
}


@dataclass(frozen=True)
class ClassSpec:
    label: str
    recipe: str
    count: int
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BankSpec:
    """Full generative description of the event and noise banks."""

    seed: int = 1234
    sample_rate_hz: int = 8000
    clip_duration_s: float = 5.0
    noise_duration_s: float = 6.0
    noise_count: int = 8
    classes: tuple[ClassSpec, ...] = ()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "sample_rate_hz": self.sample_rate_hz,
            "clip_duration_s": self.clip_duration_s,
            "noise_duration_s": self.noise_duration_s,
            "noise_count": self.noise_count,
            "classes": [
                {"label": c.label, "recipe": c.recipe, "count": c.count, "params": dict(c.params)}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BankSpec":
        known = {"seed", "sample_rate_hz", "clip_duration_s", "noise_duration_s", "noise_count", "classes"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"bank spec: unknown keys {sorted(unknown)}")
        classes = tuple(
            ClassSpec(c["label"], c["recipe"], int(c["count"]), dict(c.get("params", {})))
            for c in data.get("classes", [])
        )
        return cls(
            seed=int(data.get("seed", 1234)),
            sample_rate_hz=int(data.get("sample_rate_hz", 8000)),
            clip_duration_s=float(data.get("clip_duration_s", 5.0)),
            noise_duration_s=float(data.get("noise_duration_s", 6.0)),
            noise_count=int(data.get("noise_count", 8)),
            classes=classes,
        )


def default_bank_spec(clips_per_class: int = 12, seed: int = 1234) -> BankSpec:
    """Six acoustically distinct classes occupying disjoint frequency bands."""
    classes = (
        ClassSpec("rumble_low", "band_noise", clips_per_class, {"f_lo": 60.0, "f_hi": 180.0}),
        ClassSpec("tone_mid", "tone", clips_per_class, {"f_lo": 280.0, "f_hi": 400.0, "partials": [1.0, 0.5]}),
        ClassSpec("chirp_sweep", "chirp", clips_per_class, {"f_lo": 1000.0, "f_hi": 1600.0}),
        ClassSpec("tone_high", "tone", clips_per_class, {"f_lo": 1900.0, "f_hi": 2300.0, "partials": [1.0]}),
        ClassSpec("am_band", "am_noise", clips_per_class, {"f_lo": 2600.0, "f_hi": 3200.0}),
        ClassSpec("hiss_top", "band_noise", clips_per_class, {"f_lo": 3400.0, "f_hi": 3900.0}),
    )
    return BankSpec(seed=seed, classes=classes)


def load_bank_spec(path: str | Path) -> BankSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return BankSpec.from_dict(yaml.safe_load(fh))


def save_bank_spec(spec: BankSpec, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class EventClip:
    class_label: str
    source_id: str
    waveform: Waveform


class EventBank:
    """Immutable collection of labeled clips with per-class lookup."""

    def __init__(self, clips: list[EventClip]):
        self._clips: dict[str, EventClip] = {}
        self._by_class: dict[str, list[str]] = {}
        for clip in clips:
            if clip.source_id in self._clips:
                raise ValueError(f"duplicate source_id {clip.source_id!r}")
            self._clips[clip.source_id] = clip
            self._by_class.setdefault(clip.class_label, []).append(clip.source_id)
        for ids in self._by_class.values():
            ids.sort()

    @property
    def labels(self) -> list[str]:
        return sorted(self._by_class)

    def __len__(self) -> int:
        return len(self._clips)

    def clip(self, source_id: str) -> EventClip:
        if source_id not in self._clips:
            raise KeyError(f"unknown source_id {source_id!r}")
        return self._clips[source_id]

    def source_ids(self, class_label: str) -> list[str]:
        if class_label not in self._by_class:
            raise KeyError(f"unknown class label {class_label!r}")
        return list(self._by_class[class_label])


def _rms_normalize(samples: np.ndarray, target_rms: float = CLIP_RMS) -> np.ndarray:
    rms = float(np.sqrt(np.mean(samples**2)))
    if rms <= 0.0:
        raise ValueError("cannot normalize an all-zero clip")
    return (samples * (target_rms / rms)).astype(np.float32)


def build_event_bank(spec: BankSpec) -> EventBank:
    """Render every class recipe into its clips.

    Every class must yield at least 2 clips so an enrollment sample distinct
    from the target clip always exists.
    """
    if not spec.classes:
        raise ValueError("bank spec has no classes")
    n = int(round(spec.clip_duration_s * spec.sample_rate_hz))
    clips = []
    for cspec in spec.classes:
        if cspec.count < 2:
            raise ValueError(
                f"class {cspec.label!r} has {cspec.count} clip(s); need >= 2 for enrollment"
            )
        if cspec.recipe not in RECIPES:
            raise ValueError(f"class {cspec.label!r}: unknown recipe {cspec.recipe!r}")
        render = RECIPES[cspec.recipe]
        # clips are seeded by label, not class position, so removing one class
        # from a spec leaves every other class's clips bit-identical
        label_key = zlib.crc32(cspec.label.encode())
        for clip_idx in range(cspec.count):
            rng = np.random.default_rng([spec.seed, label_key, clip_idx])
            samples = _rms_normalize(render(rng, n, spec.sample_rate_hz, cspec.params))
            samples *= _edge_ramp(n, spec.sample_rate_hz).astype(np.float32)
            clips.append(
                EventClip(
                    class_label=cspec.label,
                    source_id=f"{cspec.label}_{clip_idx:03d}",
                    waveform=Waveform(samples, spec.sample_rate_hz),
                )
            )
    return EventBank(clips)


def build_noise_bank(spec: BankSpec) -> EventBank:
    """Seeded stationary colored-noise clips (1/f^a spectral tilt)."""
    n = int(round(spec.noise_duration_s * spec.sample_rate_hz))
    clips = []
    for idx in range(spec.noise_count):
        rng = np.random.default_rng([spec.seed, 10_000, idx])
        tilt = rng.uniform(0.8, 1.6)  # between pink and brown
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / spec.sample_rate_hz)
        shaping = np.ones_like(freqs)
        nz = freqs > 0
        shaping[nz] = freqs[nz] ** (-tilt / 2.0)
        shaping[0] = 0.0
        colored = np.fft.irfft(spectrum * shaping, n=n)
        clips.append(
            EventClip(
                class_label="noise",
                source_id=f"noise_{idx:03d}",
                waveform=Waveform(_rms_normalize(colored), spec.sample_rate_hz),
            )
        )
    return EventBank(clips)


def load_bank_from_directory(root: str | Path, sample_rate_hz: int = 8000) -> EventBank:
    """Loader hook for real corpora: one subdirectory per class, WAVs inside."""
    root = Path(root)
    clips = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav_path in sorted(class_dir.glob("*.wav")):
            wf = read_wav(wav_path, expect_sample_rate_hz=sample_rate_hz)
            clips.append(EventClip(class_dir.name, f"{class_dir.name}/{wav_path.stem}", wf))
    if not clips:
        raise ValueError(f"no clips found under {root}")
    return EventBank(clips)


def export_bank(bank: EventBank, out_dir: str | Path) -> None:
    """Write every clip as <label>/<source_id>.wav for inspection."""
    out_dir = Path(out_dir)
    for label in bank.labels:
        for source_id in bank.source_ids(label):
            clip = bank.clip(source_id)
            write_wav(out_dir / label / f"{source_id}.wav", clip.waveform)
