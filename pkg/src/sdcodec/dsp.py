"""Signal-processing primitives: STFT/iSTFT, log-mel features, integrated
loudness (K-weighted, gated), peak clamping and mono WAV I/O.

Waveforms are plain 1-D numpy arrays; the sample rate travels as an argument.
DSP runs in float32, loudness and metrics accumulate in float64. The ``*_torch``
variants are differentiable and follow the dtype of their input.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from .errors import FormatError, InputTooShort, SilentInput

SAMPLE_RATE = 16000
MEL_FLOOR = 1e-5


@dataclass
class Spectrogram:
    bins: np.ndarray  # (frames, window_size // 2 + 1), complex
    window_size: int
    hop_size: int
    window_kind: str = "hann"
    center: bool = True

    @property
    def magnitude(self):
        return np.abs(self.bins)


@dataclass
class MelSpec:
    log_mels: np.ndarray  # (frames, n_mels)
    window_size: int
    n_mels: int
    floor: float = MEL_FLOOR


def _as_signal(w):
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 1:
        raise ValueError(f"expected a mono 1-D waveform, got shape {w.shape}")
    return w


def _check_window(window_size, hop_size):
    # Hann needs hop <= window / 2 for a nonvanishing overlap-add envelope
    if window_size < 2 or hop_size < 1 or hop_size > window_size // 2:
        raise FormatError(f"invalid window/hop pair ({window_size}, {hop_size})")


@lru_cache(maxsize=None)
def _window(window_size, dtype=torch.float32):
    return torch.hann_window(window_size, periodic=True, dtype=dtype)


def stft_torch(x, window_size, hop_size=None):
    """Complex STFT of ``x`` (..., T) -> (..., freq, frames); centered, reflect padded."""
    hop_size = window_size // 4 if hop_size is None else hop_size
    _check_window(window_size, hop_size)
    if x.shape[-1] < window_size:
        raise InputTooShort(f"signal of {x.shape[-1]} samples is shorter than window {window_size}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=window_size,
        hop_length=hop_size,
        window=_window(window_size, x.dtype).to(x.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.reshape(*lead, *spec.shape[-2:])


def istft_torch(spec, window_size, hop_size, length):
    lead = spec.shape[:-2]
    flat = spec.reshape(-1, *spec.shape[-2:])
    real_dtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    out = torch.istft(
        flat,
        n_fft=window_size,
        hop_length=hop_size,
        window=_window(window_size, real_dtype).to(spec.device),
        center=True,
        length=length,
    )
    return out.reshape(*lead, length)


def stft(w, window_size, hop_size=None, center=True):
    """Short-time Fourier transform with a periodic Hann window.

    With ``center=True`` frame ``i`` is centered on sample ``i * hop_size``
    (reflect padding), giving ``len(w) // hop_size + 1`` frames. With
    ``center=False`` there are ``(len(w) - window_size) // hop_size + 1`` frames.
    """
    w = _as_signal(w)
    hop_size = window_size // 4 if hop_size is None else hop_size
    _check_window(window_size, hop_size)
    if len(w) < window_size:
        raise InputTooShort(f"signal of {len(w)} samples is shorter than window {window_size}")
    if center:
        bins = stft_torch(torch.from_numpy(w), window_size, hop_size).T.numpy()
    else:
        frames = np.lib.stride_tricks.sliding_window_view(w, window_size)[::hop_size]
        bins = np.fft.rfft(frames * _window(window_size).numpy(), axis=-1).astype(np.complex64)
    return Spectrogram(bins, window_size, hop_size, "hann", center)


def istft(s, length):
    """Inverse of :func:`stft` by weighted overlap-add; output trimmed or zero-padded to ``length``."""
    _check_window(s.window_size, s.hop_size)
    if s.window_kind != "hann":
        raise FormatError(f"unsupported window kind {s.window_kind!r}")
    if s.bins.ndim != 2 or s.bins.shape[1] != s.window_size // 2 + 1:
        raise FormatError(
            f"spectrogram has {s.bins.shape[-1]} bins, window {s.window_size} implies "
            f"{s.window_size // 2 + 1}"
        )
    if not s.center:
        raise FormatError("istft requires a centered spectrogram")
    spec = torch.from_numpy(np.ascontiguousarray(s.bins.T, dtype=np.complex64))
    covered = s.bins.shape[0] * s.hop_size - 1
    out = istft_torch(spec, s.window_size, s.hop_size, min(length, covered)).numpy()
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out.astype(np.float32)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(sample_rate, window_size, n_mels):
    """Triangular mel filters, shape (n_mels, window_size // 2 + 1); each row sums to 1.

    Filters too narrow to cover any FFT bin fall back to the bin nearest their center.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    n_freq = window_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2, n_freq)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, n_freq))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if fb[m].sum() <= 0:
            fb[m, np.argmin(np.abs(freqs - mid))] = 1.0
    fb /= fb.sum(axis=1, keepdims=True)
    return fb.astype(np.float32)


def mel_center_frequencies(sample_rate, n_mels):
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def log_mel_torch(x, window_size, n_mels, sample_rate=SAMPLE_RATE, floor=MEL_FLOOR):
    """Log mel power spectrogram of ``x`` (..., T) -> (..., n_mels, frames)."""
    spec = stft_torch(x, window_size)
    power = spec.real**2 + spec.imag**2
    fb = torch.from_numpy(mel_filterbank(sample_rate, window_size, n_mels)).to(power)
    mel = torch.matmul(fb, power)
    return torch.log(torch.clamp(mel, min=floor))


def log_mel(w, window_size, n_mels, sample_rate=SAMPLE_RATE):
    w = _as_signal(w)
    logs = log_mel_torch(torch.from_numpy(w), window_size, n_mels, sample_rate)
    return MelSpec(logs.T.numpy(), window_size, n_mels, MEL_FLOOR)


# Loudness (K-weighted, gated integrated loudness).

_BLOCK_S = 0.4
_STEP_S = 0.1
_ABS_GATE = -70.0
_REL_GATE = -10.0


@lru_cache(maxsize=None)
def k_weighting(sample_rate):
    """Second-order sections ``(b, a)`` of the K-weighting pre-filter at ``sample_rate``.

    Shelf and high-pass analog prototypes re-derived for arbitrary sample rates
    via the bilinear transform; at 48 kHz they reproduce the tabulated coefficients.
    """
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = np.tan(np.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh**0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([vh + vb * k / q + k * k, 2.0 * (k * k - vh), vh - vb * k / q + k * k]) / a0
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])

    f0, q = 38.13547087602444, 0.5003270373238773
    k = np.tan(np.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def _block_powers(w, sample_rate):
    (b1, a1), (b2, a2) = k_weighting(sample_rate)
    y = scipy.signal.lfilter(b2, a2, scipy.signal.lfilter(b1, a1, np.asarray(w, dtype=np.float64)))
    block = int(round(_BLOCK_S * sample_rate))
    step = int(round(_STEP_S * sample_rate))
    if len(y) < block:
        # shorter than one gating block: the whole signal is a single block
        return np.array([np.mean(y * y)]) if len(y) else np.zeros(0)
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(0, len(y) - block + 1, step)
    return (csum[starts + block] - csum[starts]) / block


def measure_lufs(w, sample_rate=SAMPLE_RATE):
    """Integrated loudness in LUFS (mono, channel weight 1.0)."""
    z = _block_powers(w, sample_rate)
    with np.errstate(divide="ignore"):
        block_loudness = -0.691 + 10.0 * np.log10(z)
    z = z[block_loudness > _ABS_GATE]
    if len(z) == 0:
        raise SilentInput("input is silent (no block above the absolute gate)")
    relative_gate = -0.691 + 10.0 * np.log10(np.mean(z)) + _REL_GATE
    kept = z[-0.691 + 10.0 * np.log10(z) > relative_gate]
    if len(kept) == 0:
        raise SilentInput("every block fell below the relative gate")
    return float(-0.691 + 10.0 * np.log10(np.mean(kept)))


def db_to_gain(db):
    return 10.0 ** (db / 20.0)


def normalize_lufs(w, target, sample_rate=SAMPLE_RATE):
    """Scale ``w`` to integrated loudness ``target``; returns ``(scaled, gain_db)``."""
    w = _as_signal(w)
    gain_db = float(target) - measure_lufs(w, sample_rate)
    if gain_db == 0.0:
        return w.copy(), 0.0
    return (w * db_to_gain(gain_db)).astype(np.float32), gain_db


def peak_clamp(w, ceiling_db=-0.5):
    """Rescale ``w`` so its peak does not exceed ``ceiling_db`` dBFS; quieter input is returned as is.

    The ceiling is compared in float32, so clamping an already clamped signal is a no-op.
    """
    w = _as_signal(w)
    ceiling = np.float32(db_to_gain(ceiling_db))
    peak = np.max(np.abs(w)) if len(w) else np.float32(0)
    if peak <= ceiling:
        return w.copy()
    out = (w * (float(ceiling) / float(peak))).astype(np.float32)
    while np.max(np.abs(out)) > ceiling:
        out = out * np.float32(1 - 2**-23)
    return out


def read_wav(path, expected_rate=SAMPLE_RATE):
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if rate != expected_rate:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return (data.astype(np.float32) / 32768.0), rate
    if data.dtype == np.float32:
        return data, rate
    raise FormatError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, w, sample_rate=SAMPLE_RATE, subtype="float32"):
    w = _as_signal(w)
    if subtype == "int16":
        data = np.round(np.clip(w, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    elif subtype == "float32":
        data = w
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(path, sample_rate, data)
