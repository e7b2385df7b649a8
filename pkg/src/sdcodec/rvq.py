"""Per-source residual vector quantization with an optional shared tail.

Every source owns ``R - S`` VQ layers; the last ``S`` layers are shared, but
each source pushes its own residual through them and gets its own codes. The
mixture latent is the sum of the per-source quantized latents.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

DEAD_CODE_PATIENCE = 200


class VQLayer(nn.Module):
    """Factorized VQ: project ``D -> d``, look up the nearest L2-normalized
    codeword, project the raw codeword back ``d -> D``."""

    def __init__(self, latent_dim, code_dim, codebook_size):
        super().__init__()
        self.down = nn.Conv1d(latent_dim, code_dim, 1)
        self.up = nn.Conv1d(code_dim, latent_dim, 1)
        # small codewords plus tied projections: at init every layer shrinks the residual
        self.codebook = nn.Parameter(0.01 * torch.randn(codebook_size, code_dim))
        nn.init.orthogonal_(self.down.weight)
        with torch.no_grad():
            self.up.weight.copy_(self.down.weight.transpose(0, 1))
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.bias)
        self.register_buffer("last_used", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        if codebook_size > 1 and self.min_normalized_distance() <= 1e-6:
            raise ContractError("duplicate codewords after L2 normalization")

    def min_normalized_distance(self):
        c = F.normalize(self.codebook.detach().double(), dim=1)
        d = torch.cdist(c, c)
        d.fill_diagonal_(float("inf"))
        return float(d.min())

    @property
    def codebook_size(self):
        return self.codebook.shape[0]

    def lookup(self, queries):
        """Nearest codeword index for each row of ``queries`` (N, d); ties go to the lowest index.

        Distances are computed between L2-normalized vectors in float64; a
        zero-norm query falls back to plain Euclidean distance.
        """
        q = queries.detach().double()
        c = self.codebook.detach().double()
        qn, cn = F.normalize(q, dim=1), F.normalize(c, dim=1)
        dist = (qn * qn).sum(1, keepdim=True) - 2 * qn @ cn.T + (cn * cn).sum(1)[None]
        zero = q.norm(dim=1) == 0
        if zero.any():
            dist[zero] = (c * c).sum(1)[None].expand(int(zero.sum()), -1)
        return dist.argmin(dim=1)

    def forward(self, residual):
        """``residual`` (B, D, F) -> quantized (B, D, F), codes (B, F), commitment (B,), codebook (B,), projected (B, d, F)."""
        e = self.down(residual)
        b, d, f = e.shape
        codes = self.lookup(e.transpose(1, 2).reshape(-1, d)).view(b, f)
        q = F.embedding(codes, self.codebook).transpose(1, 2)
        commitment = F.mse_loss(e, q.detach(), reduction="none").mean([1, 2])
        codebook_loss = F.mse_loss(q, e.detach(), reduction="none").mean([1, 2])
        if e.requires_grad:
            q = e + (q - e).detach()
        return self.up(q), codes, commitment, codebook_loss, e

    def embed(self, codes):
        """Codes (B, F) -> up-projected codewords (B, D, F)."""
        return self.up(F.embedding(codes, self.codebook).transpose(1, 2))

    @torch.no_grad()
    def mark_used(self, codes, step):
        self.last_used[codes.unique()] = step

    @torch.no_grad()
    def init_from(self, projected, generator=None):
        """Set every codeword to a random row of ``projected`` (N, d), slightly jittered so none coincide."""
        pick = torch.randint(len(projected), (self.codebook_size,), generator=generator)
        rows = projected[pick].to(self.codebook)
        scale = rows.std().clamp_min(1e-6)
        noise = torch.randn(rows.shape, generator=generator, dtype=rows.dtype)
        self.codebook.copy_(rows + 1e-2 * scale * noise)
        self.initialized.fill_(True)

    @torch.no_grad()
    def reseed_dead(self, projected, step, generator=None, patience=DEAD_CODE_PATIENCE):
        """Replace codewords unused for ``patience`` steps by random rows of ``projected`` (N, d)."""
        dead = torch.nonzero(step - self.last_used >= patience).flatten()
        if len(dead) == 0 or len(projected) == 0:
            return 0
        pick = torch.randint(len(projected), (len(dead),), generator=generator)
        self.codebook[dead] = projected[pick].to(self.codebook)
        self.last_used[dead] = step
        return len(dead)


@dataclass
class RVQOut:
    zq: torch.Tensor  # (B, D, F)
    codes: torch.Tensor  # (B, R, F)
    residual_energies: torch.Tensor  # (B, R + 1)
    commitment: torch.Tensor  # (B,)
    codebook_loss: torch.Tensor  # (B,)
    projected: list = field(default_factory=list)  # per layer (B, d, F)


def rvq_apply(layers, z):
    """Residual recursion: layer ``i`` quantizes ``z`` minus the sum of the previous outputs."""
    if len(layers) == 0:
        raise ConfigError("rvq_apply needs at least one layer")
    zq = torch.zeros_like(z)
    residual = z
    energies = [residual.pow(2).sum([1, 2])]
    codes, projected = [], []
    commitment = z.new_zeros(z.shape[0])
    codebook_loss = z.new_zeros(z.shape[0])
    for layer in layers:
        out, c, commit, cb, e = layer(residual)
        zq = zq + out
        residual = z - zq
        energies.append(residual.pow(2).sum([1, 2]))
        codes.append(c)
        projected.append(e)
        commitment = commitment + commit
        codebook_loss = codebook_loss + cb
    return RVQOut(zq, torch.stack(codes, 1), torch.stack(energies, 1), commitment, codebook_loss, projected)


@dataclass
class QuantizeOut:
    zq: dict  # source -> (B, D, F); zero for items where the source is inactive
    zq_mix: torch.Tensor
    codes: dict  # source -> (B, R, F); -1 where inactive
    commitment: dict  # source -> (B,)
    codebook_loss: dict  # source -> (B,)
    residual_energies: dict  # source -> (B, R + 1)
    projected: dict  # source -> list of (B, d, F)
    active: torch.Tensor  # (B, n_sources) bool


class MultiRVQ(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.sources = tuple(cfg.sources)
        n_own = cfg.n_layers - cfg.shared_tail

        def make():
            return VQLayer(cfg.latent_dim, cfg.code_dim, cfg.codebook_size)

        self.per_source = nn.ModuleDict({s: nn.ModuleList([make() for _ in range(n_own)]) for s in self.sources})
        self.shared_tail = nn.ModuleList([make() for _ in range(cfg.shared_tail)])

    def layers_for(self, source):
        if source not in self.per_source:
            raise ConfigError(f"unknown source {source!r}")
        return list(self.per_source[source]) + list(self.shared_tail)

    def all_layers(self):
        """Distinct layers, each once (shared layers are not repeated)."""
        return [layer for s in self.sources for layer in self.per_source[s]] + list(self.shared_tail)

    def active_mask(self, active, batch):
        if isinstance(active, torch.Tensor):
            if active.shape != (batch, len(self.sources)):
                raise ConfigError(f"active mask must be ({batch}, {len(self.sources)})")
            return active.bool()
        active = set(active)
        if not active:
            raise ConfigError("at least one source must be active")
        unknown = active - set(self.sources)
        if unknown:
            raise ConfigError(f"unknown source(s) {sorted(unknown)}")
        row = torch.tensor([s in active for s in self.sources])
        return row[None].expand(batch, -1)

    def forward(self, z, active=None):
        """Quantize ``z`` (B, D, F) along every active source path.

        ``active`` is a set of source names (applies to the whole batch) or a
        bool mask (B, n_sources). Inactive (item, source) pairs get a zero
        latent and code -1.
        """
        if active is None:
            active = set(self.sources)
        mask = self.active_mask(active, z.shape[0])
        out = QuantizeOut({}, None, {}, {}, {}, {}, {}, mask)
        zq_mix = torch.zeros_like(z)
        for j, s in enumerate(self.sources):
            m = mask[:, j]
            if not m.any():
                continue
            r = rvq_apply(self.layers_for(s), z)
            if m.all():
                zq, codes = r.zq, r.codes
            else:
                zq = r.zq * m[:, None, None].to(r.zq)
                codes = torch.where(m[:, None, None], r.codes, torch.full_like(r.codes, -1))
            out.zq[s] = zq
            out.codes[s] = codes
            out.commitment[s] = r.commitment
            out.codebook_loss[s] = r.codebook_loss
            out.residual_energies[s] = r.residual_energies
            out.projected[s] = r.projected
            zq_mix = zq_mix + zq
        out.zq_mix = zq_mix
        return out

    @property
    def initialized(self):
        return all(bool(layer.initialized) for layer in self.all_layers())

    @torch.no_grad()
    def data_init(self, z, active=None, generator=None):
        """Seed uninitialized codebooks from the projected residuals of ``z``, layer by layer.

        Shared layers take their codewords from the first source that reaches them.
        """
        mask = self.active_mask(active, z.shape[0])
        for j, s in enumerate(self.sources):
            rows = z[mask[:, j]]
            if len(rows) == 0:
                continue
            residual = rows
            for layer in self.layers_for(s):
                if not layer.initialized:
                    e = layer.down(residual)
                    layer.init_from(e.transpose(1, 2).reshape(-1, e.shape[1]), generator)
                out = layer(residual)[0]
                residual = residual - out

    def from_codes(self, codes, sources):
        """Rebuild the summed latent of ``sources`` from ``codes`` (source -> (B, R, F)), no encoder needed."""
        sources = list(sources)
        if not sources:
            raise ConfigError("need at least one source to decode")
        missing = [s for s in sources if s not in codes]
        if missing:
            raise ConfigError(f"code grid has no codes for {missing}")
        total = None
        for s in self.sources:
            if s not in sources:
                continue
            zq = None
            for i, layer in enumerate(self.layers_for(s)):
                e = layer.embed(codes[s][:, i])
                zq = e if zq is None else zq + e
            total = zq if total is None else total + zq
        return total
