"""Building mixtures of speech, music and sound-effect stems.

Stems are normalized to per-source loudness targets with uniform jitter,
peak-clamped, summed, and the mixture is brought to a common loudness with the
same gain applied to every stem, so ``mixture == sum(stems)`` holds on every
emitted item. Toy sources stand in for real corpora; manifests can point at
real WAV stems instead.
"""

import itertools
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, FormatError, ShapeError, SilentInput

SOURCES = ("speech", "music", "sfx")
MAX_REDRAWS = 20  # a short crop of speech lands in a pause about 15 % of the time


def check_sources(sources):
    for s in sources:
        if s not in SOURCES:
            raise ConfigError(f"unknown source {s!r}; expected one of {SOURCES}")
    return [s for s in SOURCES if s in set(sources)]


@dataclass
class MixSpec:
    target_lufs: dict = field(
        default_factory=lambda: {"speech": -17.0, "music": -24.0, "sfx": -21.0}
    )
    lufs_jitter: float = 2.0
    mix_lufs: float = -27.0
    mix_jitter: float = 2.0
    peak_ceiling_db: float = -0.5
    track_count_probs: tuple = (0.6, 0.2, 0.2)

    def validate(self, prefix="mix"):
        if set(self.target_lufs) != set(SOURCES):
            raise ConfigError(f"needs one entry per source {SOURCES}", f"{prefix}.target_lufs")
        for name in ("lufs_jitter", "mix_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError("jitter must be >= 0", f"{prefix}.{name}")
        _check_probs(self.track_count_probs, f"{prefix}.track_count_probs")
        return self


def _check_probs(probs, field_name="track_count_probs"):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigError(
            f"expected three nonnegative probabilities summing to 1, got {probs.tolist()}",
            field_name,
        )
    return probs


@dataclass
class MixItem:
    mixture: np.ndarray
    stems: dict  # source -> waveform, present sources only
    sample_rate: int = dsp.SAMPLE_RATE
    metadata: dict = field(default_factory=dict)

    @property
    def active(self):
        return set(self.stems)

    def __len__(self):
        return len(self.mixture)


def sample_track_count(probs, rng):
    """Draw how many tracks (1, 2 or 3) make up the next mixture."""
    probs = _check_probs(probs)
    return int(rng.choice(3, p=probs)) + 1


def choose_sources(k, rng):
    """Uniformly pick a size-``k`` subset of the sources, in canonical order."""
    picked = set(rng.choice(len(SOURCES), size=k, replace=False).tolist())
    return [s for i, s in enumerate(SOURCES) if i in picked]


def make_mixture(stems, spec, rng, sample_rate=dsp.SAMPLE_RATE):
    if not 1 <= len(stems) <= 3:
        raise ShapeError(f"expected 1 to 3 stems, got {len(stems)}")
    names = check_sources(stems)
    lengths = {len(stems[s]) for s in names}
    if len(lengths) != 1:
        raise ShapeError(f"stem lengths differ: { {s: len(stems[s]) for s in names} }")

    ceiling = dsp.db_to_gain(spec.peak_ceiling_db)
    out, meta = {}, {"stem_target_lufs": {}, "stem_gain_db": {}}
    for s in names:
        target = spec.target_lufs[s] + rng.uniform(-spec.lufs_jitter, spec.lufs_jitter)
        out[s], gain_db = dsp.normalize_lufs(stems[s], target, sample_rate)
        meta["stem_target_lufs"][s] = float(target)
        meta["stem_gain_db"][s] = gain_db
    meta["peak_clamped"] = any(np.max(np.abs(out[s])) > ceiling for s in names)
    if meta["peak_clamped"]:
        out = {s: dsp.peak_clamp(out[s], spec.peak_ceiling_db) for s in names}

    mixture = _sum_stems(out)
    mix_target = spec.mix_lufs + rng.uniform(-spec.mix_jitter, spec.mix_jitter)
    mix_gain_db = mix_target - dsp.measure_lufs(mixture, sample_rate)
    g = dsp.db_to_gain(mix_gain_db)
    out = {s: (out[s] * g).astype(np.float32) for s in names}

    # a loud mixture can push a stem back over the ceiling; pull everything down together
    peak = max(float(np.max(np.abs(w))) for w in out.values())
    peak = max(peak, float(np.max(np.abs(_sum_stems(out)))))
    meta["post_mix_scale"] = 1.0
    if peak > ceiling:
        meta["post_mix_scale"] = ceiling / peak
        out = {s: (w * (ceiling / peak)).astype(np.float32) for s, w in out.items()}

    meta.update(mix_target_lufs=float(mix_target), mix_gain_db=float(mix_gain_db))
    return MixItem(_sum_stems(out), out, sample_rate, meta)


def _sum_stems(stems):
    total = np.zeros(len(next(iter(stems.values()))), dtype=np.float64)
    for s in SOURCES:
        if s in stems:
            total += stems[s]
    return total.astype(np.float32)


# Toy sources.


def _envelope(n, attack, release):
    env = np.ones(n)
    a, r = min(attack, n // 2), min(release, n // 2)
    if a:
        env[:a] = np.linspace(0.0, 1.0, a)
    if r:
        env[n - r :] = np.minimum(env[n - r :], np.linspace(1.0, 0.0, r))
    return env


def _toy_speech(n, sr, rng):
    out = np.zeros(n)
    f0_base = rng.uniform(90.0, 250.0)
    pos = int(rng.uniform(0.0, 0.15) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.3) * sr)
        seg = slice(pos, min(pos + length, n))
        m = seg.stop - seg.start
        t = np.arange(m) / sr
        glide = rng.uniform(-0.15, 0.15)
        f0 = f0_base * (1.0 + glide * t / max(t[-1], 1e-3)) * (1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t))
        f0 = np.clip(f0, 90.0, 250.0)
        phase = 2 * np.pi * np.cumsum(f0) / sr
        formants = (rng.uniform(300, 900), rng.uniform(900, 2500))
        voiced = np.zeros(m)
        for h in range(1, int(4000 / f0_base) + 1):
            fh = h * f0_base
            weight = sum(np.exp(-0.5 * ((fh - fc) / 150.0) ** 2) for fc in formants) + 0.3 / h
            voiced += weight * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        out[seg] += voiced * np.hanning(m)
        pos = seg.stop + int(rng.uniform(0.12, 0.35) * sr)
    return out


def _toy_music(n, sr, rng):
    out = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(int(rng.uniform(0.5, 2.0) * sr), n - pos)
        if n - pos - length < sr // 4:
            length = n - pos
        t = np.arange(length) / sr
        root = rng.integers(60, 76)
        notes = root + np.array(sorted(rng.choice([0, 3, 4, 7, 10, 12], size=3, replace=False)))
        chord = np.zeros(length)
        for note in notes:
            f = 440.0 * 2.0 ** ((note - 69) / 12.0)
            for h in range(1, 5):
                chord += 0.6**h * np.sin(2 * np.pi * h * f * t + rng.uniform(0, 2 * np.pi))
        env = _envelope(length, int(rng.uniform(0.05, 0.2) * sr), int(0.1 * sr))
        out[pos : pos + length] += chord * env
        pos += length
    return out


def _toy_sfx(n, sr, rng):
    out = 0.01 * rng.standard_normal(n)
    n_events = max(1, int(rng.uniform(2, 6) * n / sr))
    for _ in range(n_events):
        length = min(int(rng.uniform(0.05, 0.5) * sr), n)
        start = rng.integers(0, n - length + 1)
        t = np.arange(length) / sr
        if rng.random() < 0.6:
            noise = rng.standard_normal(length)
            centre = rng.uniform(1500.0, 6000.0)
            spec = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(length, 1.0 / sr)
            spec *= np.exp(-0.5 * ((freqs - centre) / rng.uniform(200.0, 1200.0)) ** 2)
            event = np.fft.irfft(spec, n=length)
            event *= np.exp(-t / rng.uniform(0.03, 0.2))
            event /= np.max(np.abs(event)) + 1e-12
        else:
            f1, f2 = rng.uniform(1000.0, 6000.0, size=2)
            inst = f1 + (f2 - f1) * t / max(t[-1], 1e-3)
            event = np.sin(2 * np.pi * np.cumsum(inst) / sr) * _envelope(length, 80, 400)
        out[start : start + length] += event * rng.uniform(0.3, 1.0)
    return out


_TOY_GENERATORS = {"speech": _toy_speech, "music": _toy_music, "sfx": _toy_sfx}


def synth_toy_source(source, duration, rng, sample_rate=dsp.SAMPLE_RATE):
    """Synthesize ``duration`` seconds of a toy stem for ``source``.

    speech: formant-shaped harmonic syllables (f0 in 90-250 Hz) separated by pauses.
    music: sustained three-note chords with slow envelopes.
    sfx: band-limited noise bursts and chirps over a faint noise floor.
    Output is float32 with peak 0.5.
    """
    check_sources([source])
    if duration < 0.5:
        raise ValueError("toy sources need at least 0.5 s")
    n = int(round(duration * sample_rate))
    w = _TOY_GENERATORS[source](n, sample_rate, rng)
    return (0.5 * w / (np.max(np.abs(w)) + 1e-12)).astype(np.float32)


# Evaluation segments.


def _window_rms(w, win):
    n = len(w) // win
    frames = np.asarray(w[: n * win], dtype=np.float64).reshape(n, win)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    if len(w) > n * win:
        tail = np.asarray(w[n * win :], dtype=np.float64)
        rms = np.append(rms, np.sqrt(np.mean(tail**2)))
    return rms


def prepare_eval_segments(item, seg_len, silence_db=-40.0, min_coverage=0.5, window_s=0.05):
    """Trim silent edges, cut ``seg_len``-second segments, drop poorly covered ones.

    A 50 ms window is silent when its RMS is more than ``silence_db`` below the
    mixture peak. A segment survives only if every active stem is non-silent on
    at least ``min_coverage`` of its samples.
    """
    if seg_len <= 0:
        raise ValueError("seg_len must be positive")
    sr = item.sample_rate
    win = max(1, int(round(window_s * sr)))
    peak = float(np.max(np.abs(item.mixture))) if len(item) else 0.0
    if peak == 0.0:
        return []
    threshold = peak * dsp.db_to_gain(silence_db)
    loud = np.flatnonzero(_window_rms(item.mixture, win) >= threshold)
    if len(loud) == 0:
        return []
    start, stop = loud[0] * win, min(len(item), (loud[-1] + 1) * win)
    seg = int(round(seg_len * sr))
    segments = []
    for k, a in enumerate(range(start, stop - seg + 1, seg)):
        stems = {s: w[a : a + seg] for s, w in item.stems.items()}
        covered = True
        for w in stems.values():
            rms = _window_rms(w, win)
            sizes = np.minimum(win, seg - np.arange(len(rms)) * win)
            if sizes[rms >= threshold].sum() / seg < min_coverage:
                covered = False
                break
        if covered:
            meta = dict(item.metadata, segment_index=k, segment_start=a)
            segments.append(MixItem(item.mixture[a : a + seg], stems, sr, meta))
    return segments


# Manifests.


@dataclass
class ManifestEntry:
    source: str
    path: Path
    duration: float


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.source}\t{e.path}\t{e.duration:.6f}\n")


def read_manifest(path, check_files=True):
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            source, file, duration = parts
            check_sources([source])
            file = Path(file)
            if not file.is_absolute():
                file = path.parent / file
            if check_files and not file.exists():
                raise FileNotFoundError(f"{path}:{lineno}: {file} does not exist")
            try:
                duration = float(duration)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad duration {duration!r}") from None
            if duration <= 0:
                raise FormatError(f"{path}:{lineno}: duration must be positive")
            entries.append(ManifestEntry(source, file, duration))
    return entries


def manifest_items(entries, spec, seed=0, sample_rate=dsp.SAMPLE_RATE):
    """Group manifest stems into full mixtures: the i-th stem of every source makes item i."""
    by_source = {s: [e for e in entries if e.source == s] for s in SOURCES}
    present = [s for s in SOURCES if by_source[s]]
    if not present:
        return
    for i in range(min(len(by_source[s]) for s in present)):
        stems = {}
        for s in present:
            w, _ = dsp.read_wav(by_source[s][i].path, sample_rate)
            stems[s] = w
        n = min(len(w) for w in stems.values())
        stems = {s: w[:n] for s, w in stems.items()}
        rng = np.random.default_rng([seed, i])
        item = make_mixture(stems, spec, rng, sample_rate)
        item.metadata["item_index"] = i
        yield item


# Training streams.


class ToyMixtureStream:
    """Endless, index-addressable stream of toy mixtures; item ``i`` depends only on (seed, i)."""

    def __init__(self, spec, segment_samples, seed=0, sample_rate=dsp.SAMPLE_RATE):
        self.spec = spec.validate()
        self.segment_samples = segment_samples
        self.seed = seed
        self.sample_rate = sample_rate

    def item(self, index):
        rng = np.random.default_rng([self.seed, index])
        k = sample_track_count(self.spec.track_count_probs, rng)
        duration = max(self.segment_samples / self.sample_rate, 0.5)
        stems = {}
        for s in choose_sources(k, rng):
            stems[s] = synth_toy_source(s, duration, rng, self.sample_rate)[: self.segment_samples]
        for _ in range(MAX_REDRAWS):
            try:
                item = make_mixture(stems, self.spec, rng, self.sample_rate)
                break
            except SilentInput:
                # a crop can land in a pause; redraw that stem
                stems = {s: synth_toy_source(s, duration, rng, self.sample_rate)[: self.segment_samples]
                         for s in stems}
        else:
            raise SilentInput(f"could not build a non-silent item for index {index}")
        item.metadata.update(seed=self.seed, index=index)
        return item


class ManifestMixtureStream:
    """Random crops of real stems listed in a manifest, mixed like the toy stream."""

    def __init__(self, entries, spec, segment_samples, seed=0, sample_rate=dsp.SAMPLE_RATE):
        self.spec = spec.validate()
        self.by_source = {s: [e for e in entries if e.source == s] for s in SOURCES}
        self.available = [s for s in SOURCES if self.by_source[s]]
        if not self.available:
            raise ConfigError("manifest lists no stems")
        self.segment_samples = segment_samples
        self.seed = seed
        self.sample_rate = sample_rate
        self._cache = {}

    def _load(self, path):
        if path not in self._cache:
            self._cache[path] = dsp.read_wav(path, self.sample_rate)[0]
        return self._cache[path]

    def _crop(self, source, rng):
        entries = self.by_source[source]
        for _ in range(10):
            w = self._load(entries[rng.integers(len(entries))].path)
            if len(w) < self.segment_samples:
                w = np.pad(w, (0, self.segment_samples - len(w)))
            a = rng.integers(0, len(w) - self.segment_samples + 1)
            crop = w[a : a + self.segment_samples]
            if np.any(crop != 0):
                return crop
        raise SilentInput(f"no non-silent {source} crop found")

    def item(self, index):
        rng = np.random.default_rng([self.seed, index])
        k = min(sample_track_count(self.spec.track_count_probs, rng), len(self.available))
        picked = set(rng.choice(len(self.available), size=k, replace=False).tolist())
        stems = {s: self._crop(s, rng) for i, s in enumerate(self.available) if i in picked}
        item = make_mixture(stems, self.spec, rng, self.sample_rate)
        item.metadata.update(seed=self.seed, index=index)
        return item


def batches(stream, batch_size, start_step=0):
    """Yield ``(step, items)``; batch ``step`` holds items ``step*batch_size ...`` of ``stream``."""
    for step in itertools.count(start_step):
        yield step, [stream.item(step * batch_size + j) for j in range(batch_size)]


def prefetch(iterable, maxsize=4):
    """Run ``iterable`` on a worker thread behind a bounded queue (order preserved)."""
    q = queue.Queue(maxsize=maxsize)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for x in iterable:
                while not stop.is_set():
                    try:
                        q.put(x, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    thread = threading.Thread(target=work, daemon=True)
    thread.start()
    try:
        while True:
            x = q.get()
            if x is done:
                return
            if isinstance(x, BaseException):
                raise x
            yield x
    finally:
        stop.set()
