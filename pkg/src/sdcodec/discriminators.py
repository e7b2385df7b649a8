"""Multi-period waveform discriminator and complex-STFT discriminator."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .dsp import stft_torch
from .errors import InputTooShort


@dataclass
class DiscConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    stft_windows: tuple = (2048, 1024, 512)
    mpd_channels: tuple = (8, 16, 32, 32)
    stft_channels: int = 4

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


PAPER_DISC = DiscConfig(mpd_channels=(32, 128, 512, 1024), stft_channels=32)


@dataclass
class DiscOutputs:
    logits: list = field(default_factory=list)  # one score map per sub-discriminator
    features: list = field(default_factory=list)  # per sub-discriminator, list of feature maps

    def __len__(self):
        return len(self.logits)


def _wn2d(*args, **kwargs):
    return weight_norm(nn.Conv2d(*args, **kwargs))


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels):
        super().__init__()
        self.period = period
        chans = (1, *channels)
        self.convs = nn.ModuleList(
            _wn2d(chans[i], chans[i + 1], (5, 1), (3, 1), padding=(2, 0)) for i in range(len(channels))
        )
        self.convs.append(_wn2d(chans[-1], chans[-1], (5, 1), 1, padding=(2, 0)))
        self.post = _wn2d(chans[-1], 1, (3, 1), 1, padding=(1, 0))

    def forward(self, x):
        b, _, t = x.shape
        pad = (-t) % self.period
        if pad:
            x = F.pad(x, (0, pad), mode="reflect" if pad < t else "constant")
        x = x.view(b, 1, -1, self.period)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            features.append(x)
        x = self.post(x)
        features.append(x)
        return x, features


class STFTDiscriminator(nn.Module):
    """Conv stack over the (real, imaginary) spectrogram; time is dilated, frequency strided."""

    def __init__(self, window, channels):
        super().__init__()
        self.window = window
        ch = channels
        self.convs = nn.ModuleList([
            _wn2d(2, ch, (3, 9), padding=(1, 4)),
            _wn2d(ch, ch, (3, 9), (1, 2), dilation=(1, 1), padding=(1, 4)),
            _wn2d(ch, ch, (3, 9), (1, 2), dilation=(2, 1), padding=(2, 4)),
            _wn2d(ch, ch, (3, 9), (1, 2), dilation=(4, 1), padding=(4, 4)),
            _wn2d(ch, ch, (3, 3), padding=(1, 1)),
        ])
        self.post = _wn2d(ch, 1, (3, 3), padding=(1, 1))

    def forward(self, x):
        spec = stft_torch(x[:, 0], self.window)  # (B, freq, frames)
        x = torch.stack([spec.real, spec.imag], 1).transpose(2, 3)  # (B, 2, frames, freq)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            features.append(x)
        x = self.post(x)
        features.append(x)
        return x, features


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), channels=(8, 16, 32, 32)):
        super().__init__()
        self.periods = tuple(periods)
        self.discs = nn.ModuleList(PeriodDiscriminator(p, channels) for p in self.periods)

    def forward(self, x):
        if x.shape[-1] < max(self.periods):
            raise InputTooShort(f"need at least {max(self.periods)} samples, got {x.shape[-1]}")
        out = DiscOutputs()
        for d in self.discs:
            logits, feats = d(x)
            out.logits.append(logits)
            out.features.append(feats)
        return out


class MultiSTFTDiscriminator(nn.Module):
    def __init__(self, windows=(2048, 1024, 512), channels=8):
        super().__init__()
        self.windows = tuple(windows)
        self.discs = nn.ModuleList(STFTDiscriminator(w, channels) for w in self.windows)

    def forward(self, x):
        if x.shape[-1] < max(self.windows):
            raise InputTooShort(f"need at least {max(self.windows)} samples, got {x.shape[-1]}")
        out = DiscOutputs()
        for d in self.discs:
            logits, feats = d(x)
            out.logits.append(logits)
            out.features.append(feats)
        return out


class Discriminator(nn.Module):
    """Both discriminator families; outputs are concatenated sub-discriminator lists."""

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or DiscConfig()
        self.cfg = cfg
        self.mpd = MultiPeriodDiscriminator(cfg.periods, cfg.mpd_channels)
        self.stft = MultiSTFTDiscriminator(cfg.stft_windows, cfg.stft_channels)

    def forward(self, x):
        a, b = self.mpd(x), self.stft(x)
        return DiscOutputs(a.logits + b.logits, a.features + b.features)
