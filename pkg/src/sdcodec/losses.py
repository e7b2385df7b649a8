"""Generator and discriminator losses.

Least-squares adversarial terms, L1 feature matching, multi-scale log-mel
distance, and the codebook/commitment terms reported by the quantizer.
"""

from dataclasses import dataclass, fields

import torch

from .dsp import SAMPLE_RATE, log_mel_torch
from .errors import ConfigError, ContractError, ShapeError

MEL_WINDOWS = (32, 64, 128, 256, 512, 1024, 2048)
MEL_BINS = (5, 10, 20, 40, 80, 160, 320)
TERMS = ("mel", "feature_match", "adversarial", "codebook", "commitment")


@dataclass
class LossWeights:
    mel: float = 15.0
    feature_match: float = 2.0
    adversarial: float = 1.0
    codebook: float = 1.0
    commitment: float = 0.25
    mel_windows: tuple = MEL_WINDOWS
    mel_bins: tuple = MEL_BINS

    def validate(self, prefix="losses"):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ConfigError("loss weights must be >= 0", f"{prefix}.{name}")
        self.mel_windows, self.mel_bins = tuple(self.mel_windows), tuple(self.mel_bins)
        if len(self.mel_windows) != len(self.mel_bins) or not self.mel_windows:
            raise ConfigError("mel_windows and mel_bins must pair up", f"{prefix}.mel_bins")
        return self

    def to_dict(self):
        return {f.name: list(getattr(self, f.name)) if f.name.startswith("mel_") else getattr(self, f.name)
                for f in fields(self)}


def multiscale_mel_loss(x_hat, x, windows=MEL_WINDOWS, bins=MEL_BINS, sample_rate=SAMPLE_RATE):
    """Mean over scales of the mean absolute log-mel difference. Sign-blind: ``x_hat = -x`` scores 0."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    total = 0.0
    for w, n in zip(windows, bins):
        total = total + (log_mel_torch(x_hat, w, n, sample_rate) - log_mel_torch(x, w, n, sample_rate)).abs().mean()
    return total / len(windows)


def _check_structure(real, fake):
    if len(real.logits) != len(fake.logits) or any(
        len(a) != len(b) for a, b in zip(real.features, fake.features)
    ):
        raise ShapeError("real and fake discriminator outputs differ in structure")


def discriminator_loss(real, fake):
    _check_structure(real, fake)
    terms = [((1 - r) ** 2).mean() + (f**2).mean() for r, f in zip(real.logits, fake.logits)]
    return sum(terms) / len(terms)


def generator_adv_loss(fake):
    terms = [((1 - f) ** 2).mean() for f in fake.logits]
    return sum(terms) / len(terms)


def feature_matching_loss(real, fake):
    _check_structure(real, fake)
    per_disc = []
    for fr, fg in zip(real.features, fake.features):
        per_disc.append(sum((a.detach() - b).abs().mean() for a, b in zip(fr, fg)) / len(fr))
    return sum(per_disc) / len(per_disc)


def gan_losses(real, fake):
    """``(d_loss, g_adv_loss, fm_loss)`` for matching discriminator outputs."""
    return discriminator_loss(real, fake), generator_adv_loss(fake), feature_matching_loss(real, fake)


def total_generator_loss(terms, weights, required=None):
    """Weighted sum over reconstruction targets of the generator loss.

    ``terms`` maps a target name (``"mix"`` or a source) to a dict of raw loss
    values keyed by :data:`TERMS`; missing keys count as zero. Returns
    ``(total, breakdown)`` where ``breakdown`` holds each raw term summed over
    targets.
    """
    if required is not None:
        missing = sorted(set(required) - set(terms))
        if missing:
            raise ContractError(f"missing reconstruction(s) for {missing}")
    total = 0.0
    breakdown = {name: 0.0 for name in TERMS}
    for values in terms.values():
        for name in TERMS:
            v = values.get(name)
            if v is None:
                continue
            total = total + getattr(weights, name) * v
            breakdown[name] = breakdown[name] + v
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    return total, breakdown
