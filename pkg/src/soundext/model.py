"""Mask-based time-domain extraction network and the enrollment encoder.

Architecture: learned analysis filterbank (strided 1-D conv), a bottleneck,
R repeats of X dilated depthwise-separable conv units with residual
connections, a sigmoid mask over the filterbank representation, and
transposed-conv overlap-add synthesis. The conditioning embedding multiplies
every frame of the stream element-wise after the first repeat, which forces
the embedding dimension to equal the bottleneck width.

The enrollment encoder reuses the same front-end and block structure with a
single repeat, followed by an unweighted mean over frames.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .signal import Waveform


@dataclass(frozen=True)
class ModelConfig:
    enc_filters: int = 256
    win_len: int = 20
    bottleneck: int = 256
    conv_channels: int = 512
    kernel: int = 3
    blocks_per_repeat: int = 8
    repeats: int = 4
    embed_dim: int = 256
    hop: int = 10
    mask_activation: str = "sigmoid"
    norm_kind: str = "gln"
    sample_rate_hz: int = 8000

    def __post_init__(self):
        for name in ("enc_filters", "win_len", "bottleneck", "conv_channels", "kernel",
                     "blocks_per_repeat", "repeats", "embed_dim", "hop"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.hop > self.win_len:
            raise ValueError("hop must not exceed win_len")
        if self.embed_dim != self.bottleneck:
            raise ValueError(
                "embed_dim must equal bottleneck: the embedding multiplies the "
                f"bottleneck stream element-wise (got {self.embed_dim} vs {self.bottleneck})"
            )
        if self.mask_activation != "sigmoid":
            raise ValueError(f"unsupported mask_activation {self.mask_activation!r}")
        if self.norm_kind != "gln":
            raise ValueError(f"unsupported norm_kind {self.norm_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**data)


def micro_config() -> ModelConfig:
    """Smallest config that still exercises every layer; used by gradient checks."""
    return ModelConfig(enc_filters=16, win_len=20, bottleneck=8, conv_channels=16,
                       kernel=3, blocks_per_repeat=2, repeats=1, embed_dim=8, hop=10)


def toy_config() -> ModelConfig:
    """Desk-scale config small enough to train on a single CPU core."""
    return ModelConfig(enc_filters=64, win_len=20, bottleneck=64, conv_channels=128,
                       kernel=3, blocks_per_repeat=4, repeats=2, embed_dim=64, hop=10)


class GlobalLayerNorm(nn.Module):
    """Normalize over channels and time jointly; zero input stays zero when beta is zero."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return self.gamma * (x - mean) / torch.sqrt(var + self.eps) + self.beta


class DilatedUnit(nn.Module):
    """1x1 conv -> PReLU -> gLN -> dilated depthwise conv -> PReLU -> gLN -> 1x1 conv, residual."""

    def __init__(self, bottleneck: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        self.conv_in = nn.Conv1d(bottleneck, hidden, 1)
        self.prelu_in = nn.PReLU()
        self.norm_in = GlobalLayerNorm(hidden)
        self.dconv = nn.Conv1d(
            hidden, hidden, kernel,
            padding=(kernel - 1) * dilation // 2, dilation=dilation, groups=hidden,
        )
        self.prelu_out = nn.PReLU()
        self.norm_out = GlobalLayerNorm(hidden)
        self.conv_out = nn.Conv1d(hidden, bottleneck, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm_in(self.prelu_in(self.conv_in(x)))
        y = self.norm_out(self.prelu_out(self.dconv(y)))
        return x + self.conv_out(y)


class ConvStack(nn.Module):
    """One repeat: X dilated units with dilations 1, 2, 4, ..."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.units = nn.ModuleList(
            DilatedUnit(cfg.bottleneck, cfg.conv_channels, cfg.kernel, 2**i)
            for i in range(cfg.blocks_per_repeat)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class _FrontEnd(nn.Module):
    """Strided filterbank analysis followed by gLN and the bottleneck projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Conv1d(1, cfg.enc_filters, cfg.win_len, stride=cfg.hop, bias=False)
        self.norm = GlobalLayerNorm(cfg.enc_filters)
        self.bottleneck = nn.Conv1d(cfg.enc_filters, cfg.bottleneck, 1)

    def pad(self, signal: torch.Tensor) -> torch.Tensor:
        # zero-pad the tail to a whole number of hops (and at least one window)
        cfg = self.cfg
        n = signal.shape[-1]
        target = max(n, cfg.win_len)
        rem = (target - cfg.win_len) % cfg.hop
        if rem:
            target += cfg.hop - rem
        if target > n:
            signal = nn.functional.pad(signal, (0, target - n))
        return signal

    def forward(self, signal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = self.encoder(signal.unsqueeze(1))
        return encoded, self.bottleneck(self.norm(encoded))


class ExtractionNet(nn.Module):
    """f(y, e): estimate the target waveform from the mixture and an embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front = _FrontEnd(cfg)
        self.repeats = nn.ModuleList(ConvStack(cfg) for _ in range(cfg.repeats))
        self.mask_prelu = nn.PReLU()
        self.mask_conv = nn.Conv1d(cfg.bottleneck, cfg.enc_filters, 1)
        self.decoder = nn.ConvTranspose1d(cfg.enc_filters, 1, cfg.win_len, stride=cfg.hop, bias=False)

    def forward(
        self, mixture: torch.Tensor, embedding: torch.Tensor, trace: dict | None = None
    ) -> torch.Tensor:
        """mixture: (batch, T); embedding: (batch, D). Returns (batch, T).

        When `trace` is a dict it receives the named intermediates:
        encoded, conditioned_input (the stream right before the embedding
        multiply), mask, and masked.
        """
        if mixture.shape[-1] < self.cfg.win_len:
            raise ValueError(
                f"input length {mixture.shape[-1]} shorter than analysis window {self.cfg.win_len}"
            )
        if embedding.shape[-1] != self.cfg.embed_dim:
            raise ValueError(
                f"embedding dimension {embedding.shape[-1]} != model embed_dim {self.cfg.embed_dim}"
            )
        n_samples = mixture.shape[-1]
        padded = self.front.pad(mixture)
        encoded, stream = self.front(padded)

        stream = self.repeats[0](stream)
        if trace is not None:
            trace["encoded"] = encoded
            trace["conditioned_input"] = stream
        stream = stream * embedding.unsqueeze(-1)
        for stack in self.repeats[1:]:
            stream = stack(stream)

        mask = torch.sigmoid(self.mask_conv(self.mask_prelu(stream)))
        masked = mask * encoded
        if trace is not None:
            trace["mask"] = mask
            trace["masked"] = masked
        estimate = self.decoder(masked).squeeze(1)
        return estimate[..., :n_samples]


class EnrollmentEncoder(nn.Module):
    """g(a): map enrollment audio of any length >= one window to a D-vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front = _FrontEnd(cfg)
        self.stack = ConvStack(cfg)
        self.call_count = 0  # instrumentation: how many forward passes ran

    def forward(self, enrollment: torch.Tensor) -> torch.Tensor:
        """enrollment: (batch, T_a) -> (batch, D) by temporal average pooling."""
        if enrollment.shape[-1] < self.cfg.win_len:
            raise ValueError(
                f"enrollment length {enrollment.shape[-1]} shorter than analysis window {self.cfg.win_len}"
            )
        self.call_count += 1
        _, stream = self.front(self.front.pad(enrollment))
        return self.stack(stream).mean(dim=-1)


class TargetSoundModel(nn.Module):
    """Extraction network, enrollment encoder, and the class-embedding matrix."""

    def __init__(self, cfg: ModelConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.extraction = ExtractionNet(cfg)
        self.enrollment = EnrollmentEncoder(cfg)
        bound = 1.0 / np.sqrt(cfg.embed_dim)
        self.embedding = nn.Parameter(
            torch.empty(cfg.embed_dim, num_classes).uniform_(-bound, bound)
        )

    @property
    def num_classes(self) -> int:
        return self.embedding.shape[1]

    def embed_one_hot(self, class_index: torch.Tensor) -> torch.Tensor:
        """Columns of the embedding matrix for a batch of class indices."""
        if class_index.numel() and (class_index.min() < 0 or class_index.max() >= self.num_classes):
            raise IndexError(f"class index out of range [0, {self.num_classes})")
        return self.embedding[:, class_index].transpose(0, 1)

    def embed_enrollment(self, enrollment: torch.Tensor) -> torch.Tensor:
        return self.enrollment(enrollment)


def build_model(cfg: ModelConfig, num_classes: int, seed: int = 0) -> TargetSoundModel:
    """Deterministic construction: identical seeds yield identical weights."""
    torch.manual_seed(seed)
    return TargetSoundModel(cfg, num_classes)


def count_params(cfg: ModelConfig) -> int:
    """Trainable parameter count of the extraction network alone."""
    net = ExtractionNet(cfg)
    return sum(p.numel() for p in net.parameters())


def frame_count(cfg: ModelConfig, n_samples: int) -> int:
    """Number of analysis frames after tail padding."""
    target = max(n_samples, cfg.win_len)
    rem = (target - cfg.win_len) % cfg.hop
    if rem:
        target += cfg.hop - rem
    return (target - cfg.win_len) // cfg.hop + 1


def _as_batch(model_dtype: torch.dtype, waveform: Waveform) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(waveform.samples)).to(model_dtype).unsqueeze(0)


def extract(mixture: Waveform, embedding: np.ndarray, model: TargetSoundModel) -> Waveform:
    """Run the extraction network on one waveform with a fixed embedding."""
    dtype = next(model.parameters()).dtype
    emb = torch.from_numpy(np.ascontiguousarray(embedding)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        est = model.extraction(_as_batch(dtype, mixture), emb)
    return Waveform(est.squeeze(0).to(torch.float32).numpy(), mixture.sample_rate_hz)


def forward_traced(
    mixture: Waveform, embedding: np.ndarray, model: TargetSoundModel
) -> tuple[Waveform, dict[str, np.ndarray]]:
    """Same estimate as `extract`, plus named intermediate activations."""
    dtype = next(model.parameters()).dtype
    emb = torch.from_numpy(np.ascontiguousarray(embedding)).to(dtype).unsqueeze(0)
    trace: dict = {}
    with torch.no_grad():
        est = model.extraction(_as_batch(dtype, mixture), emb, trace=trace)
    arrays = {k: v.squeeze(0).to(torch.float32).numpy() for k, v in trace.items()}
    return Waveform(est.squeeze(0).to(torch.float32).numpy(), mixture.sample_rate_hz), arrays
