"""Waveform primitives, the mixing model, and scalar signal/embedding metrics.

All metrics are computed in double precision regardless of the dtype of the
inputs, so that closed-form expectations hold exactly. Functions here are
pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile


class SignalMismatchError(ValueError):
    """Raised when waveforms that must agree in length or rate do not."""


@dataclass(frozen=True)
class Waveform:
    """A finite, mono, fixed-rate audio signal.

    Attributes:
        samples: 1-D float array (float32 or float64).
        sample_rate_hz: positive sampling rate; 8000 throughout this project.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("waveform must be non-empty")
        if samples.dtype not in (np.float32, np.float64):
            raise ValueError(f"waveform dtype must be float32/float64, got {samples.dtype}")
        if not np.isfinite(samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def power(self) -> float:
        """Sum of squared samples, in double precision."""
        return float(np.sum(np.square(self.samples, dtype=np.float64)))

    def is_silent(self) -> bool:
        return not np.any(self.samples)


@dataclass(frozen=True)
class MetricConfig:
    """Clamping constants shared by the dB-scaled metrics.

    eps floors power ratios so exact reconstruction yields a finite loss;
    sdr_cap_db bounds SI-SDR for numerically perfect (or absent) estimates.
    """

    eps: float = 1e-8
    sdr_cap_db: float = 60.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not np.isfinite(self.sdr_cap_db):
            raise ValueError("sdr_cap_db must be finite")


def _check_compatible(a: Waveform, b: Waveform, what: str) -> None:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise SignalMismatchError(
            f"{what}: sample rates differ ({a.sample_rate_hz} vs {b.sample_rate_hz})"
        )
    if len(a) != len(b):
        raise SignalMismatchError(f"{what}: lengths differ ({len(a)} vs {len(b)})")


def mix(components: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum of equal-length, equal-rate waveforms.

    Accumulates left to right, so summing in the same order reproduces the
    result bit-exactly; reordering agrees only to floating-point tolerance.
    """
    if len(components) == 0:
        raise ValueError("mix requires at least one component")
    first = components[0]
    acc = first.samples.copy()
    for i, comp in enumerate(components[1:], start=1):
        if comp.sample_rate_hz != first.sample_rate_hz:
            raise SignalMismatchError(
                f"mix: component {i} sample rate {comp.sample_rate_hz} != {first.sample_rate_hz}"
            )
        if len(comp) != len(first):
            raise SignalMismatchError(
                f"mix: component {i} length {len(comp)} != {len(first)}"
            )
        acc = acc + comp.samples
    return Waveform(acc, first.sample_rate_hz)


def neg_snr_loss(estimate: Waveform, reference: Waveform, cfg: MetricConfig = MetricConfig()) -> float:
    """Negative scale-dependent SNR in dB; lower is better.

    Returns -10*log10(||x||^2 / max(||x - x_hat||^2, eps*||x||^2)); exact
    reconstruction therefore returns the eps-clamped floor 10*log10(eps).
    """
    _check_compatible(estimate, reference, "neg_snr_loss")
    ref = reference.samples.astype(np.float64)
    est = estimate.samples.astype(np.float64)
    ref_power = float(np.sum(ref * ref))
    if ref_power == 0.0:
        raise ValueError("neg_snr_loss: reference is all-zero (ratio undefined)")
    err_power = float(np.sum((ref - est) ** 2))
    return -10.0 * np.log10(ref_power / max(err_power, cfg.eps * ref_power))


def si_sdr(estimate: Waveform, reference: Waveform, cfg: MetricConfig = MetricConfig()) -> float:
    """Scale-invariant SDR in dB, by projection onto the reference.

    No mean subtraction is applied. The estimate is decomposed as
    s_target = alpha*x with alpha = <x_hat, x>/||x||^2 and e = x_hat - s_target;
    the ratio ||s_target||^2 / ||e||^2 is reported in dB, clipped to
    [-sdr_cap_db, sdr_cap_db] so degenerate estimates stay finite.
    """
    _check_compatible(estimate, reference, "si_sdr")
    ref = reference.samples.astype(np.float64)
    est = estimate.samples.astype(np.float64)
    ref_power = float(np.sum(ref * ref))
    if ref_power == 0.0:
        raise ValueError("si_sdr: reference is all-zero")
    alpha = float(np.sum(est * ref)) / ref_power
    s_target = alpha * ref
    err = est - s_target
    p_target = float(np.sum(s_target * s_target))
    p_err = float(np.sum(err * err))
    if p_target <= cfg.eps * p_err:
        return -cfg.sdr_cap_db
    if p_err <= cfg.eps * p_target:
        return cfg.sdr_cap_db
    value = 10.0 * np.log10(p_target / p_err)
    return float(np.clip(value, -cfg.sdr_cap_db, cfg.sdr_cap_db))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v), in [0, 2]. Raises on zero-norm inputs."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"cosine_distance: dimensions differ ({u.size} vs {v.size})")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_distance: zero-norm input")
    return 1.0 - float(np.dot(u, v)) / (nu * nv)


def gain_for_snr(signal_power: float, noise_power: float, target_snr_db: float) -> float:
    """Gain g for the noise so that 10*log10(signal_power/(g^2*noise_power)) hits the target."""
    if signal_power <= 0.0:
        raise ValueError(f"gain_for_snr: signal_power must be positive, got {signal_power}")
    if noise_power <= 0.0:
        raise ValueError(f"gain_for_snr: noise_power must be positive, got {noise_power}")
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (target_snr_db / 10.0))))


def read_wav(path: str | Path, expect_sample_rate_hz: int | None = None) -> Waveform:
    """Load a mono WAV file (PCM 16-bit or 32-bit float).

    int16 data is scaled to [-1, 1) float32; float32 data is returned as is.
    """
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = (data / 32768.0).astype(np.float32)
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ValueError(f"{path}: unsupported WAV dtype {data.dtype} (want int16 or float32)")
    if expect_sample_rate_hz is not None and rate != expect_sample_rate_hz:
        raise ValueError(f"{path}: sample rate {rate} != expected {expect_sample_rate_hz}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, waveform: Waveform) -> None:
    """Write a mono 32-bit float WAV file (bit-exact round trip for float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), waveform.sample_rate_hz, waveform.samples.astype(np.float32))
