"""Training loop: linear warmup then exponential decay, latent shuffling,
alternating discriminator/generator updates, dead-code reseeding."""

import json
import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from .discriminators import Discriminator, DiscOutputs
from .errors import ConfigError, ContractError, NumericError
from .losses import (
    discriminator_loss,
    feature_matching_loss,
    generator_adv_loss,
    multiscale_mel_loss,
    total_generator_loss,
)
from .model import SDCodec

log = logging.getLogger(__name__)

PAPER_TOTAL_STEPS = 400_000
PAPER_GAMMA = 0.999996


def scaled_gamma(total_steps):
    """Per-step decay giving the same overall decay over ``total_steps`` as the paper-scale run."""
    return PAPER_GAMMA ** (PAPER_TOTAL_STEPS / total_steps)


@dataclass
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 8
    segment_s: float = 0.5
    lr: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.99
    warmup_steps: int = 200
    gamma: float = None  # None: scaled_gamma(total_steps)
    seed: int = 0
    checkpoint_every: int = 500
    shuffle_latent_prob: float = 0.5
    grad_clip: float = 10.0
    weight_decay: float = 0.0

    def validate(self, prefix="train"):
        if self.total_steps < 1:
            raise ConfigError("must be >= 1", f"{prefix}.total_steps")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", f"{prefix}.batch_size")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("must satisfy 0 <= warmup_steps < total_steps", f"{prefix}.warmup_steps")
        if self.gamma is None:
            self.gamma = scaled_gamma(self.total_steps)
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.gamma}", f"{prefix}.gamma")
        if self.lr <= 0:
            raise ConfigError("must be > 0", f"{prefix}.lr")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError("must lie in [0, 1)", f"{prefix}.{name}")
        if not 0 <= self.shuffle_latent_prob <= 1:
            raise ConfigError("must lie in [0, 1]", f"{prefix}.shuffle_latent_prob")
        if self.segment_s <= 0:
            raise ConfigError("must be > 0", f"{prefix}.segment_s")
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", f"{prefix}.checkpoint_every")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def lr_at(step, cfg):
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * cfg.gamma ** (step - cfg.warmup_steps)


def shuffle_latents(zq, stems, perms):
    """Recombine per-source latents and stems across the batch.

    ``zq`` and ``stems`` map source -> (B, ...) tensors, zero where a source is
    absent; ``perms`` maps source -> permutation of ``range(B)``. New item ``i``
    is ``sum_s zq[s][perms[s][i]]`` with target ``sum_s stems[s][perms[s][i]]``.
    """
    missing = sorted(set(zq) - set(stems))
    if missing:
        raise ContractError(f"no target stems for quantized source(s) {missing}")
    zq_mix, x_mix = None, None
    for s in zq:
        p = perms[s]
        z_s, x_s = zq[s][p], stems[s][p]
        zq_mix = z_s if zq_mix is None else zq_mix + z_s
        x_mix = x_s if x_mix is None else x_mix + x_s
    return zq_mix, x_mix


class TrainState:
    def __init__(self, codec_cfg, train_cfg, loss_weights, disc_cfg):
        self.codec_cfg = codec_cfg
        self.train_cfg = train_cfg.validate()
        self.weights = loss_weights.validate()
        self.disc_cfg = disc_cfg
        torch.manual_seed(train_cfg.seed)
        self.model = SDCodec(codec_cfg)
        self.disc = Discriminator(disc_cfg)
        betas = (train_cfg.beta1, train_cfg.beta2)
        self.opt_g = torch.optim.AdamW(self.model.parameters(), lr=0.0, betas=betas,
                                       weight_decay=train_cfg.weight_decay)
        self.opt_d = torch.optim.AdamW(self.disc.parameters(), lr=0.0, betas=betas,
                                       weight_decay=train_cfg.weight_decay)
        self.generator = torch.Generator().manual_seed(train_cfg.seed)
        self.step = 0

    @property
    def sources(self):
        return tuple(self.codec_cfg.sources)


def collate(items, sources):
    """MixItems -> mixture (B, 1, T), stems source -> (B, 1, T) (zeros if absent), mask (B, S)."""
    mix = torch.from_numpy(np.stack([it.mixture for it in items]))[:, None]
    stems, mask = {}, torch.zeros(len(items), len(sources), dtype=torch.bool)
    for j, s in enumerate(sources):
        rows = []
        for i, it in enumerate(items):
            if s in it.stems:
                mask[i, j] = True
                rows.append(it.stems[s])
            else:
                rows.append(np.zeros_like(it.mixture))
        stems[s] = torch.from_numpy(np.stack(rows))[:, None]
    return mix, stems, mask


def _select(outputs, idx):
    return DiscOutputs([l[idx] for l in outputs.logits], [[f[idx] for f in fs] for fs in outputs.features])


def _entropy_bits(codes, size):
    counts = torch.bincount(codes.flatten(), minlength=size).double()
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * torch.log2(p)).sum())


def _scalar(v):
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def train_step(state, items):
    """One discriminator update then one generator update; returns a metrics dict."""
    cfg, weights = state.train_cfg, state.weights
    model, disc, sources = state.model, state.disc, state.sources
    model.train()
    disc.train()
    step = state.step + 1
    lr = lr_at(step, cfg)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr

    x_mix, stems, mask = collate(items, sources)
    batch, length = x_mix.shape[0], x_mix.shape[-1]
    z = model.encode(x_mix)
    if not model.quantizer.initialized:
        model.quantizer.data_init(z.detach(), mask, state.generator)
    q = model.quantize(z, mask)

    shuffled = batch > 1 and torch.rand((), generator=state.generator).item() < cfg.shuffle_latent_prob
    if shuffled:
        perms = {s: torch.randperm(batch, generator=state.generator) for s in q.zq}
        zq_mix, mix_target = shuffle_latents(q.zq, {s: stems[s] for s in q.zq}, perms)
    else:
        zq_mix, mix_target = q.zq_mix, x_mix

    # one decoder pass over every (target, item) pair; unshuffled one-track mixes reuse the source output
    latents, targets, groups, row_of = [], [], {}, {}
    n = 0
    for j, s in enumerate(sources):
        rows = torch.nonzero(mask[:, j]).flatten()
        if len(rows):
            groups[s] = torch.arange(n, n + len(rows))
            row_of.update({(s, i): n + k for k, i in enumerate(rows.tolist())})
            latents.append(q.zq[s][rows])
            targets.append(stems[s][rows])
            n += len(rows)
    n_active = mask.sum(1)
    mix_rows = torch.arange(batch) if shuffled else torch.nonzero(n_active > 1).flatten()
    mix_index = torch.empty(batch, dtype=torch.long)
    mix_index[mix_rows] = torch.arange(n, n + len(mix_rows))
    if len(mix_rows):
        latents.append(zq_mix[mix_rows])
        targets.append(mix_target[mix_rows])
    if not shuffled:
        for i in torch.nonzero(n_active == 1).flatten().tolist():
            s = sources[int(torch.nonzero(mask[i])[0])]
            mix_index[i] = row_of[(s, i)]
    groups["mix"] = mix_index
    recon_all = model.decode(torch.cat(latents), length)
    target_all = torch.cat(targets)

    # discriminator update
    real = disc(target_all)
    fake = disc(recon_all.detach())
    d_loss = discriminator_loss(real, fake)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    d_grad = torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
    state.opt_d.step()

    # generator update
    fake = disc(recon_all)
    with torch.no_grad():
        real = disc(target_all)
    terms = {}
    for name, idx in groups.items():
        t = {
            "mel": multiscale_mel_loss(recon_all[idx], target_all[idx], weights.mel_windows, weights.mel_bins),
            "adversarial": generator_adv_loss(_select(fake, idx)),
            "feature_match": feature_matching_loss(_select(real, idx), _select(fake, idx)),
        }
        if name != "mix":
            m = mask[:, sources.index(name)]
            t["codebook"] = q.codebook_loss[name][m].mean()
            t["commitment"] = q.commitment[name][m].mean()
        terms[name] = t
    required = {"mix"} | {s for j, s in enumerate(sources) if mask[:, j].any()}
    total, breakdown = total_generator_loss(terms, weights, required)
    if not (torch.isfinite(total) and torch.isfinite(d_loss)):
        seeds = [(it.metadata.get("seed"), it.metadata.get("index")) for it in items]
        raise NumericError(f"non-finite loss at step {step}; batch (seed, index) = {seeds}")
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    g_grad = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.opt_g.step()

    # codebook bookkeeping
    metrics = {"step": step, "lr": lr, "shuffled": bool(shuffled)}
    reseeded = 0
    with torch.no_grad():
        usage = {}
        for j, s in enumerate(sources):
            m = mask[:, j]
            if not m.any():
                continue
            for i, layer in enumerate(model.quantizer.layers_for(s)):
                codes = q.codes[s][m][:, i]
                proj = q.projected[s][i][m].detach().transpose(1, 2).reshape(-1, layer.codebook.shape[1])
                layer.mark_used(codes, step)
                prev = usage.setdefault(id(layer), (layer, [], []))
                prev[1].append(codes)
                prev[2].append(proj)
        for layer, codes, projs in usage.values():
            reseeded += layer.reseed_dead(torch.cat(projs), step, state.generator)
        for s in sources:
            for i, layer in enumerate(model.quantizer.layers_for(s)):
                if id(layer) in usage:
                    key = f"entropy/{s}_{i + 1}" if i < len(model.quantizer.per_source[s]) else f"entropy/shared_{i + 1}"
                    metrics[key] = _entropy_bits(torch.cat(usage[id(layer)][1]), layer.codebook_size)
        energies = torch.cat([q.residual_energies[s][mask[:, j]] for j, s in enumerate(sources) if s in q.residual_energies])
        rel = (energies / energies[:, :1].clamp_min(1e-12)).mean(0)
        for i, e in enumerate(rel.tolist()):
            metrics[f"residual_energy/{i}"] = e

    state.step = step
    metrics.update(
        loss_total=_scalar(total),
        d_loss=_scalar(d_loss),
        mel=_scalar(breakdown["mel"]) / len(terms),
        feature_match=_scalar(breakdown["feature_match"]) / len(terms),
        adversarial=_scalar(breakdown["adversarial"]) / len(terms),
        codebook=_scalar(breakdown["codebook"]),
        commitment=_scalar(breakdown["commitment"]),
        grad_norm_g=float(g_grad),
        grad_norm_d=float(d_grad),
        reseeded=reseeded,
        n_terms=len(terms),
    )
    for name, t in terms.items():
        metrics[f"mel/{name}"] = _scalar(t["mel"])
    return metrics


def format_metrics(metrics):
    return json.dumps(metrics, sort_keys=True)


def smoothed(values, window=100):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def mel_drop(values, window=100):
    """Relative drop of the last ``window``-step mean vs the first ``window``-step mean."""
    values = np.asarray(values, dtype=np.float64)
    first, last = values[:window].mean(), values[-window:].mean()
    return 1.0 - last / first if first > 0 and math.isfinite(first) else float("nan")
