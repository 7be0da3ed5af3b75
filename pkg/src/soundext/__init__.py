"""Target sound extraction toolkit.

Extract one designated sound class from a single-channel mixture, conditioned
either on a class identity (1-hot over a learned embedding matrix) or on
enrollment audio. Ships the full desk-scale pipeline: synthetic event banks,
scene simulation, mixed multi-task training, few-shot class adaptation, and
SDR-improvement evaluation.
"""

__version__ = "0.1.0"

from .signal import MetricConfig, Waveform, cosine_distance, gain_for_snr, mix, neg_snr_loss, si_sdr

__all__ = [
    "MetricConfig",
    "Waveform",
    "cosine_distance",
    "gain_for_snr",
    "mix",
    "neg_snr_loss",
    "si_sdr",
    "__version__",
]
