"""Convolutional waveform encoder and mirror decoder.

Strided residual conv stacks with snake activations and weight-normalized
convolutions. Tensors are channels-first: waveforms ``(B, 1, T)``, latents
``(B, D, F)``.
"""

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
from torch.nn.utils.parametrizations import weight_norm

from .errors import ConfigError, NumericError
from .mixing import SOURCES, check_sources


@dataclass
class CodecConfig:
    latent_dim: int = 64
    code_dim: int = 4
    n_layers: int = 4
    shared_tail: int = 0
    codebook_bits: int = 6
    strides: tuple = (2, 4, 8)
    sources: tuple = SOURCES
    sample_rate: int = 16000
    encoder_channels: int = 8
    decoder_channels: int = 64

    @property
    def hop_length(self):
        return math.prod(self.strides)

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop_length

    @property
    def codebook_size(self):
        return 2**self.codebook_bits

    @property
    def bits_per_frame(self):
        """Bits per latent frame for one source path."""
        return self.n_layers * self.codebook_bits

    def validate(self, prefix="codec"):
        self.strides = tuple(int(s) for s in self.strides)
        self.sources = tuple(self.sources)
        for name in ("latent_dim", "code_dim", "n_layers", "codebook_bits", "sample_rate",
                     "encoder_channels", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{prefix}.{name}")
        if not 0 <= self.shared_tail <= self.n_layers:
            raise ConfigError(f"must lie in [0, n_layers={self.n_layers}]", f"{prefix}.shared_tail")
        if self.codebook_bits > 16:
            raise ConfigError("at most 16 bits per code", f"{prefix}.codebook_bits")
        if not self.strides or any(s < 1 for s in self.strides):
            raise ConfigError("strides must be positive", f"{prefix}.strides")
        if self.sample_rate % self.hop_length:
            raise ConfigError(
                f"stride product {self.hop_length} does not divide sample rate {self.sample_rate}",
                f"{prefix}.strides",
            )
        unknown = [s for s in self.sources if s not in SOURCES]
        if not self.sources or unknown or list(self.sources) != check_sources(self.sources):
            raise ConfigError(f"must be a non-empty ordered subset of {SOURCES}", f"{prefix}.sources")
        return self

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["strides"] = list(self.strides)
        d["sources"] = list(self.sources)
        return d


PRESETS = {
    "toy": dict(latent_dim=64, code_dim=4, n_layers=4, codebook_bits=6, strides=(2, 4, 8),
                encoder_channels=8, decoder_channels=64),
    "paper": dict(latent_dim=1024, code_dim=8, n_layers=12, codebook_bits=10, strides=(2, 4, 5, 8),
                  encoder_channels=64, decoder_channels=1536),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", "preset")
    return CodecConfig(**{**PRESETS[name], **overrides}).validate()


def WNConv1d(*args, **kwargs):
    return weight_norm(nn.Conv1d(*args, **kwargs))


def WNConvTranspose1d(*args, **kwargs):
    return weight_norm(nn.ConvTranspose1d(*args, **kwargs))


class Snake(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(1, channels, 1))

    def forward(self, x):
        return x + (self.alpha + 1e-9).reciprocal() * torch.sin(self.alpha * x).pow(2)


class ResidualUnit(nn.Module):
    def __init__(self, channels, dilation):
        super().__init__()
        self.block = nn.Sequential(
            Snake(channels),
            WNConv1d(channels, channels, 7, dilation=dilation, padding=3 * dilation),
            Snake(channels),
            WNConv1d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.block(x)


class EncoderBlock(nn.Sequential):
    def __init__(self, channels, stride):
        super().__init__(
            ResidualUnit(channels // 2, 1),
            ResidualUnit(channels // 2, 3),
            ResidualUnit(channels // 2, 9),
            Snake(channels // 2),
            WNConv1d(channels // 2, channels, 2 * stride, stride=stride, padding=math.ceil(stride / 2)),
        )


class DecoderBlock(nn.Sequential):
    def __init__(self, in_channels, out_channels, stride):
        super().__init__(
            Snake(in_channels),
            WNConvTranspose1d(
                in_channels, out_channels, 2 * stride, stride=stride,
                padding=math.ceil(stride / 2), output_padding=stride % 2,
            ),
            ResidualUnit(out_channels, 1),
            ResidualUnit(out_channels, 3),
            ResidualUnit(out_channels, 9),
        )


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.encoder_channels
        layers = [WNConv1d(1, ch, 7, padding=3)]
        for stride in cfg.strides:
            ch *= 2
            layers.append(EncoderBlock(ch, stride))
        layers += [Snake(ch), WNConv1d(ch, cfg.latent_dim, 3, padding=1)]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.decoder_channels
        layers = [WNConv1d(cfg.latent_dim, ch, 7, padding=3)]
        for i, stride in enumerate(reversed(cfg.strides)):
            layers.append(DecoderBlock(ch // 2**i, ch // 2 ** (i + 1), stride))
        out_ch = ch // 2 ** len(cfg.strides)
        layers += [Snake(out_ch), WNConv1d(out_ch, 1, 7, padding=3)]
        self.block = nn.Sequential(*layers)
        self.bound_output = True

    def forward(self, z):
        y = self.block(z)
        return torch.tanh(y) if self.bound_output else y


def pad_to_hop(x, hop):
    """Right-pad the last axis with zeros to a multiple of ``hop``; returns ``(x, pad)``."""
    pad = (-x.shape[-1]) % hop
    if pad:
        x = nn.functional.pad(x, (0, pad))
    return x, pad


def check_finite(t, what):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
