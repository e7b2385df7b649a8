"""Metrics, mask-based separation and the batch evaluation harness."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dsp, mixing
from .errors import ContractError, ShapeError, SilentReference
from .losses import MEL_BINS, MEL_WINDOWS, multiscale_mel_loss

log = logging.getLogger(__name__)

SI_SDR_CEILING = 60.0
MASK_EPS = 1e-8
MASK_WINDOW = 1024
MASK_HOP = 256
METRICS = ("si_sdr", "si_sdri", "mel_distance")


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: estimate {est.size}, reference {ref.size}")
    return est, ref


def si_sdr(est, ref):
    """Scale-invariant SDR in dB, capped at +60 dB when the error vanishes."""
    est, ref = _pair(est, ref)
    energy = ref @ ref
    if energy == 0:
        raise SilentReference("reference is silent")
    target = (est @ ref) / energy * ref
    noise = target - est
    num, den = target @ target, noise @ noise
    if num == 0:
        return -SI_SDR_CEILING
    if den <= num * 10 ** (-SI_SDR_CEILING / 10):
        return SI_SDR_CEILING
    return float(min(SI_SDR_CEILING, max(-SI_SDR_CEILING, 10 * math.log10(num / den))))


def si_sdri(est, ref, mix):
    return si_sdr(est, ref) - si_sdr(mix, ref)


def mel_distance(est, ref, sample_rate=dsp.SAMPLE_RATE):
    """Multi-scale log-mel L1 in float64, no gradients. Scales longer than the signal are skipped."""
    est, ref = _pair(est, ref)
    scales = [(w, n) for w, n in zip(MEL_WINDOWS, MEL_BINS) if w <= est.size]
    if not scales:
        raise ShapeError(f"signal of {est.size} samples is shorter than every mel window")
    windows, bins = zip(*scales)
    with torch.no_grad():
        d = multiscale_mel_loss(torch.from_numpy(est), torch.from_numpy(ref), windows, bins, sample_rate)
    return float(d)


def separation_masks(decoded_stems):
    """Ratio masks ``|S_s| / (sum |S_s'| + eps)`` on the mask STFT grid."""
    if not decoded_stems:
        raise ContractError("separation needs at least one decoded stem")
    lengths = {len(np.asarray(w).reshape(-1)) for w in decoded_stems.values()}
    if len(lengths) != 1:
        raise ShapeError(f"decoded stems differ in length: {sorted(lengths)}")
    mags = {s: dsp.stft(np.asarray(w, dtype=np.float32), MASK_WINDOW, MASK_HOP).magnitude.astype(np.float64)
            for s, w in decoded_stems.items()}
    total = sum(mags.values()) + MASK_EPS
    return {s: m / total for s, m in mags.items()}


def separate_with_mask(mix, decoded_stems):
    """Apply the decoded stems' ratio masks to the mixture STFT and resynthesize with the mixture phase."""
    mix = np.asarray(mix, dtype=np.float32).reshape(-1)
    for s, w in decoded_stems.items():
        if len(np.asarray(w).reshape(-1)) != mix.size:
            raise ShapeError(f"stem {s!r} has {len(w)} samples, mixture has {mix.size}")
    masks = separation_masks(decoded_stems)
    spec = dsp.stft(mix, MASK_WINDOW, MASK_HOP)
    out = {}
    for s, m in masks.items():
        masked = dsp.Spectrogram((spec.bins * m).astype(np.complex64), MASK_WINDOW, MASK_HOP)
        out[s] = dsp.istft(masked, mix.size)
    return out


# Reports.


@dataclass
class EvalRecord:
    segment: str
    task: str  # "resynthesis" or "separation"
    source: str  # a source id, or "mix" for the mixture path
    si_sdr: float
    si_sdri: float = None
    mel_distance: float = None


def aggregate(records):
    """``{task: {source: {metric: {"mean", "std", "n"}}}}`` over the records (population std)."""
    groups = {}
    for r in records:
        groups.setdefault(r.task, {}).setdefault(r.source, []).append(r)
    out = {}
    for task, by_source in groups.items():
        for source, rs in by_source.items():
            stats = {}
            for name in METRICS:
                vals = np.array([getattr(r, name) for r in rs if getattr(r, name) is not None], dtype=np.float64)
                if vals.size:
                    stats[name] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
            out.setdefault(task, {})[source] = stats
    return out


def _agg_close(a, b, tol=1e-9):
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(_agg_close(a[k], b[k], tol) for k in a)
    return abs(a - b) <= tol


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def finalize(self):
        self.aggregates = aggregate(self.records)
        return self

    def check(self):
        if not _agg_close(self.aggregates, aggregate(self.records)):
            raise ContractError("report aggregates do not match its records")

    def dumps(self):
        """One JSON record per line, then a single aggregate line."""
        self.check()
        lines = [json.dumps({"record": asdict(r)}, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"aggregate": self.aggregates, "meta": self.meta}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "record" in obj:
                report.records.append(EvalRecord(**obj["record"]))
            else:
                report.aggregates, report.meta = obj["aggregate"], obj.get("meta", {})
        report.check()
        return report

    def table(self):
        """Rows per (task, source); columns SI-SDR / SI-SDRi / mel distance as mean ± std."""
        if not self.records:
            return "(empty report)"
        head = f"{'task':<12} {'source':<8} {'SI-SDR':>16} {'SI-SDRi':>16} {'mel-dist':>16}"
        rows = [head, "-" * len(head)]
        for task in ("resynthesis", "separation"):
            for source in ("mix", *mixing.SOURCES):
                stats = self.aggregates.get(task, {}).get(source)
                if not stats:
                    continue
                cells = []
                for name in METRICS:
                    st = stats.get(name)
                    cells.append(f"{st['mean']:7.2f} ± {st['std']:5.2f}" if st else f"{'-':>15}")
                rows.append(f"{task:<12} {source:<8} " + " ".join(f"{c:>16}" for c in cells))
        return "\n".join(rows)


# Harness.


@dataclass
class EvalOptions:
    segment_s: float = 2.0
    seed: int = 0
    oracle: bool = False  # bypass the codec: decoded stems are the true stems
    max_segments: int = None
    silence_db: float = -40.0
    min_coverage: float = 0.5


def decode_all(model, mixture):
    """Decode the mixture path and every source path of ``mixture`` (T,) with all quantizers active."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(mixture, dtype=np.float32))[None, None]
        recon, _ = model(x, set(model.cfg.sources))
    return {k: v[0, 0].double().numpy() for k, v in recon.items()}


def score_segment(seg_id, item, decoded, sources, sample_rate):
    """Resynthesis and separation records for one segment given its decoded paths."""
    mix = item.mixture.astype(np.float64)
    records = []
    if "mix" in decoded:
        records.append(EvalRecord(seg_id, "resynthesis", "mix", si_sdr(decoded["mix"], mix), None,
                                  mel_distance(decoded["mix"], mix, sample_rate)))
    stems = {s: decoded[s] for s in sources}
    separated = separate_with_mask(mix, stems)
    for s, ref in item.stems.items():
        ref = ref.astype(np.float64)
        for task, est in (("resynthesis", decoded[s]), ("separation", separated[s])):
            try:
                records.append(EvalRecord(seg_id, task, s, si_sdr(est, ref), si_sdri(est, ref, mix),
                                          mel_distance(est, ref, sample_rate)))
            except SilentReference:
                log.warning("segment %s: %s stem is silent, skipped", seg_id, s)
    return records


def evaluate(checkpoint, manifest, opts=None, codec_cfg=None, mix_spec=None):
    """Score a checkpoint (or the identity oracle) on the mixtures built from ``manifest``."""
    from .checkpoint import load_model

    opts = opts or EvalOptions()
    mix_spec = (mix_spec or mixing.MixSpec()).validate()
    entries = mixing.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    model = None
    if not opts.oracle:
        model = load_model(checkpoint, codec_cfg)
    sources = tuple(model.cfg.sources) if model else mixing.SOURCES
    sample_rate = model.cfg.sample_rate if model else dsp.SAMPLE_RATE
    report = EvalReport(meta={"oracle": opts.oracle, "segment_s": opts.segment_s, "seed": opts.seed,
                              "checkpoint": None if opts.oracle else str(checkpoint)})
    if not entries:
        log.warning("manifest is empty; writing an empty report")
        return report.finalize()
    n = 0
    for item in mixing.manifest_items(entries, mix_spec, opts.seed, sample_rate):
        segments = mixing.prepare_eval_segments(item, opts.segment_s, opts.silence_db, opts.min_coverage)
        for seg in segments:
            if opts.max_segments is not None and n >= opts.max_segments:
                break
            seg_id = f"{item.metadata['item_index']}:{seg.metadata['segment_index']}"
            if model is None:
                decoded = {s: seg.stems.get(s, np.zeros(len(seg))).astype(np.float64) for s in sources}
                decoded = {s: w for s, w in decoded.items() if np.any(w)}
            else:
                decoded = decode_all(model, seg.mixture)
            report.records.extend(score_segment(seg_id, seg, decoded, [s for s in sources if s in decoded],
                                                sample_rate))
            n += 1
    return report.finalize()


def cross_quantizer_matrix(model, solo_items, metric=si_sdr):
    """Mean ``metric(estimate, input)`` of resynthesizing each solo input through every source's quantizer.

    ``solo_items`` maps source -> list of single-source waveforms. Returns
    ``{input_source: {quantizer_source: mean score}}`` (SI-SDR by default).
    """
    out = {}
    with torch.no_grad():
        for s, waves in solo_items.items():
            scores = {q: [] for q in model.cfg.sources}
            for w in waves:
                x = torch.from_numpy(np.asarray(w, dtype=np.float32))[None, None]
                z = model.encode(x)
                for q in model.cfg.sources:
                    zq = model.quantize(z, {q}).zq[q]
                    y = model.decode(zq, x.shape[-1])[0, 0].double().numpy()
                    scores[q].append(metric(y, w))
            out[s] = {q: float(np.mean(v)) for q, v in scores.items()}
    return out
