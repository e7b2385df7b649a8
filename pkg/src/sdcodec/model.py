"""The source-disentangled codec: shared encoder, per-source quantizers, shared decoder."""

import numpy as np
import torch
import torch.nn as nn

from .codec import Decoder, Encoder, check_finite, pad_to_hop
from .rvq import MultiRVQ


class SDCodec(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg.validate()
        self.encoder = Encoder(cfg)
        self.quantizer = MultiRVQ(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, x):
        """Waveform (B, 1, T) -> latent (B, D, ceil(T / hop)); input is right-padded with zeros."""
        check_finite(x, "encoder input")
        x, _ = pad_to_hop(x, self.cfg.hop_length)
        return self.encoder(x)

    def quantize(self, z, active=None):
        return self.quantizer(z, active)

    def decode(self, zq, length=None):
        """Latent (B, D, F) -> waveform (B, 1, F * hop), trimmed to ``length`` if given."""
        check_finite(zq, "decoder input")
        y = self.decoder(zq)
        return y if length is None else y[..., :length]

    def forward(self, x, active=None):
        """Encode, quantize and decode the mixture path plus every active source path."""
        z = self.encode(x)
        q = self.quantize(z, active)
        length = x.shape[-1]
        recon = {s: self.decode(zq, length) for s, zq in q.zq.items()}
        recon["mix"] = self.decode(q.zq_mix, length)
        return recon, q

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


@torch.no_grad()
def resynthesize(model, w, sources=None):
    """Numpy convenience: encode ``w`` (T,), decode the mixture and each requested source path."""
    model.eval()
    sources = list(sources or model.cfg.sources)
    x = torch.from_numpy(np.asarray(w, dtype=np.float32))[None, None]
    recon, _ = model(x, set(sources))
    return {k: v[0, 0].numpy() for k, v in recon.items()}
