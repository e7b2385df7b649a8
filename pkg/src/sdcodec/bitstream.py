"""The ``SDC1`` token bitstream.

Header (22 bytes, little-endian)::

    magic      4s   b"SDC1"
    version    u16
    sample_rate u32
    D          u16  latent_dim
    d          u16  code_dim
    R          u8   n_layers
    S          u8   shared_tail
    K          u8   codebook_bits
    mask       u8   active sources, bit i <-> cfg.sources[i]
    F          u32  frames

Payload: codes as K-bit unsigned integers, MSB first, ordered frame-major,
then layer, then active source in canonical order. The last byte is
zero-padded; total payload bits = |active| * R * K * F.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecConfig
from .errors import ConfigError, FormatError

MAGIC = b"SDC1"
VERSION = 1
HEADER = struct.Struct("<4sHIHHBBBBI")


@dataclass
class CodeGrid:
    """Codes for one signal: ``codes[source]`` is an (R, F) integer array."""

    codes: dict = field(default_factory=dict)
    n_layers: int = 0
    n_frames: int = 0
    codebook_bits: int = 0

    def validate(self, sources=None):
        if not self.codes:
            raise FormatError("code grid has no sources")
        if sources is not None:
            unknown = set(self.codes) - set(sources)
            if unknown:
                raise ConfigError(f"code grid has unknown source(s) {sorted(unknown)}")
        for s, c in self.codes.items():
            c = np.asarray(c)
            if c.shape != (self.n_layers, self.n_frames):
                raise FormatError(f"codes for {s!r} have shape {c.shape}, expected {(self.n_layers, self.n_frames)}")
            if c.size and (c.min() < 0 or c.max() >= 1 << self.codebook_bits):
                bad = c[(c < 0) | (c >= 1 << self.codebook_bits)][0]
                raise FormatError(f"code {int(bad)} for {s!r} outside [0, {1 << self.codebook_bits})")
        return self

    def __eq__(self, other):
        if not isinstance(other, CodeGrid):
            return NotImplemented
        return (
            (self.n_layers, self.n_frames, self.codebook_bits) == (other.n_layers, other.n_frames, other.codebook_bits)
            and self.codes.keys() == other.codes.keys()
            and all(np.array_equal(self.codes[s], other.codes[s]) for s in self.codes)
        )


def grid_from_quantized(codes, cfg, index=0):
    """CodeGrid for batch row ``index`` of ``QuantizeOut.codes``; sources coded -1 (inactive) are left out."""
    out = {}
    for s in cfg.sources:
        if s not in codes:
            continue
        c = codes[s][index].detach().cpu().numpy().astype(np.int64)
        if (c >= 0).all():
            out[s] = c
    f = next(iter(out.values())).shape[1] if out else 0
    return CodeGrid(out, cfg.n_layers, f, cfg.codebook_bits)


def payload_bits(grid):
    return len(grid.codes) * grid.n_layers * grid.codebook_bits * grid.n_frames


def pack_bitstream(grid, cfg):
    cfg.validate()
    if grid.n_layers != cfg.n_layers or grid.codebook_bits != cfg.codebook_bits:
        raise ConfigError(
            f"grid has R={grid.n_layers}, K={grid.codebook_bits}; config has R={cfg.n_layers}, K={cfg.codebook_bits}")
    grid.validate(cfg.sources)
    if len(cfg.sources) > 8:
        raise ConfigError("at most 8 sources fit the header mask", "codec.sources")
    active = [s for s in cfg.sources if s in grid.codes]
    mask = sum(1 << i for i, s in enumerate(cfg.sources) if s in grid.codes)
    header = HEADER.pack(MAGIC, VERSION, cfg.sample_rate, cfg.latent_dim, cfg.code_dim, cfg.n_layers,
                         cfg.shared_tail, cfg.codebook_bits, mask, grid.n_frames)
    k = cfg.codebook_bits
    # (F, R, S_active) in payload order
    stacked = np.stack([np.asarray(grid.codes[s], dtype=np.uint64) for s in active], axis=-1).transpose(1, 0, 2)
    shifts = np.arange(k - 1, -1, -1, dtype=np.uint64)
    bits = ((stacked.reshape(-1, 1) >> shifts) & np.uint64(1)).astype(np.uint8)
    return header + np.packbits(bits.reshape(-1)).tobytes()


def unpack_bitstream(data, sources=None):
    """Inverse of :func:`pack_bitstream`; returns (CodeGrid, header dict).

    ``sources`` is the canonical source list the mask refers to (default: the
    codec default).
    """
    data = bytes(data)
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, sr, dim, code_dim, r, s_tail, k, mask, frames = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported bitstream version {version}, expected {VERSION}", 4)
    if not 1 <= k <= 32:
        raise FormatError(f"codebook bits {k} outside [1, 32]", 16)
    if r < 1 or s_tail > r:
        raise FormatError(f"bad layer counts R={r}, S={s_tail}", 14)
    sources = tuple(sources or CodecConfig().sources)
    if mask == 0 or mask >> len(sources):
        raise FormatError(f"source mask {mask:#04x} invalid for {len(sources)} sources", 17)
    active = [s for i, s in enumerate(sources) if mask >> i & 1]
    n_bits = len(active) * r * k * frames
    expected = HEADER.size + (n_bits + 7) // 8
    if len(data) < expected:
        raise FormatError(
            f"truncated payload: expected {n_bits} bits, got {(len(data) - HEADER.size) * 8}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=HEADER.size), count=n_bits)
    weights = np.uint64(1) << np.arange(k - 1, -1, -1, dtype=np.uint64)
    values = (bits.reshape(-1, k).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)
    values = values.reshape(frames, r, len(active))
    grid = CodeGrid({s: np.ascontiguousarray(values[:, :, i].T) for i, s in enumerate(active)}, r, frames, k)
    info = dict(version=version, sample_rate=sr, latent_dim=dim, code_dim=code_dim, n_layers=r,
                shared_tail=s_tail, codebook_bits=k, sources=active, n_frames=frames)
    return grid, info


def check_header(info, cfg):
    """ConfigError naming the first header field that disagrees with ``cfg``."""
    for key in ("sample_rate", "latent_dim", "code_dim", "n_layers", "shared_tail", "codebook_bits"):
        if info[key] != getattr(cfg, key):
            raise ConfigError(f"bitstream has {info[key]}, model has {getattr(cfg, key)}", f"codec.{key}")
