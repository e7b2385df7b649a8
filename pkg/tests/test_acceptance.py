"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` (the verdict lines are also
written when output is captured). The disentanglement criterion reuses the
newest checkpoint in ``runs/toy`` and trains or resumes it when the run is
incomplete (several hours on one CPU core).
"""

import contextlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

import test_bitstream as bitstream_tests
import test_codec
import test_dsp
import test_eval
import test_losses
import test_rvq
from sdcodec import dsp, mixing
from sdcodec.bitstream import HEADER, CodeGrid, pack_bitstream, payload_bits, unpack_bitstream
from sdcodec.codec import preset
from sdcodec.config import default_config
from sdcodec.errors import FormatError
from sdcodec.evaluate import cross_quantizer_matrix, mel_distance, separate_with_mask, si_sdr, si_sdri
from sdcodec.rvq import MultiRVQ, VQLayer
from sdcodec.runner import latest_checkpoint, read_metrics, run_training
from sdcodec.train import mel_drop

ROOT = Path(__file__).resolve().parents[1]
TOY_RUN = ROOT / "runs" / "toy"
SOURCES = ("speech", "music", "sfx")


@pytest.fixture
def criterion(capsys):
    """``with criterion(name):`` prints PASS or FAIL (with the reason) and re-raises failures."""

    @contextlib.contextmanager
    def run(name):
        t0 = time.time()
        try:
            yield
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nFAIL  {name}  ({time.time() - t0:.1f} s): {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}")
            raise
        with capsys.disabled():
            print(f"\nPASS  {name}  ({time.time() - t0:.1f} s)")

    return run


@pytest.fixture
def note(capsys):
    """Print diagnostic lines even when output is captured."""

    def write(text):
        with capsys.disabled():
            print(text)

    return write


def test_quantizer_oracle(criterion):
    with criterion("quantizer lookup == exhaustive nearest neighbour on 10^4 queries"):
        g = torch.Generator().manual_seed(7)
        total, agree = 0, 0
        for n, d in [(1024, 8), (1024, 4), (512, 8), (64, 4), (8, 2)]:
            vq = VQLayer(d, d, n)
            with torch.no_grad():
                vq.codebook.copy_(torch.randn(n, d, generator=g))
            queries = torch.randn(2000, d, generator=g)
            got = vq.lookup(queries).numpy()
            want = test_rvq.brute_force_nearest(queries.numpy(), vq.codebook.detach().numpy())
            total += len(queries)
            agree += int(np.sum(got == want))
        assert total == 10_000
        assert agree == total, f"{total - agree} disagreements"


@pytest.mark.parametrize("shared", [0, 2, 4])
def test_latent_additivity(criterion, shared):
    with criterion(f"latent additivity |zq_mix - sum zq_s| <= 1e-6 on 10^3 inputs, S={shared}"):
        torch.manual_seed(shared)
        m = MultiRVQ(preset("toy", shared_tail=shared))
        worst = 0.0
        with torch.no_grad():
            for _ in range(10):
                q = m(torch.randn(100, 64, 8))
                total = sum(q.zq[s] for s in SOURCES)
                rebuilt = sum(m.from_codes(q.codes, [s]) for s in SOURCES)
                worst = max(worst, (q.zq_mix - total).abs().max().item(), (q.zq_mix - rebuilt).abs().max().item())
        assert worst <= 1e-6, f"max deviation {worst:.3g}"


def test_full_sharing_collapse(criterion):
    with criterion("S=R: identical codes on all three routes, 10^3 trials"):
        bad = 0
        for trial in range(1000):
            if trial % 100 == 0:
                torch.manual_seed(trial)
                m = MultiRVQ(preset("toy", shared_tail=4))
            with torch.no_grad():
                q = m(torch.randn(1, 64, 5))
            bad += not (torch.equal(q.codes["speech"], q.codes["music"])
                        and torch.equal(q.codes["speech"], q.codes["sfx"]))
        assert bad == 0, f"{bad} trials differ"


def test_bitrate(criterion):
    with criterion("paper preset, 1 s: 1 source = 6000 bits, 3 sources = 18000 bits"):
        cfg = preset("paper")
        rng = np.random.default_rng(0)
        frames = int(cfg.frame_rate)
        for sources, bits in ((["speech"], 6000), (list(SOURCES), 18000)):
            grid = CodeGrid({s: rng.integers(0, 1024, (12, frames)) for s in sources}, 12, frames, 10)
            assert payload_bits(grid) == bits
            assert (len(pack_bitstream(grid, cfg)) - HEADER.size) * 8 == bits


def test_gradients(criterion):
    with criterion("straight-through and loss gradients match central differences (1e-2 rel, float64)"):
        test_rvq.test_straight_through_gradient()
        test_losses.test_mel_gradient_fd()
        for term in ("d", "g", "fm"):
            test_losses.test_gan_gradients_fd(term)
        for which in ("commitment", "codebook"):
            test_losses.test_vq_loss_gradients_fd(which)
        test_codec.test_end_to_end_gradient_matches_finite_differences()


def test_dsp_conformance(criterion):
    with criterion("istft(stft) within 1e-4; 997 Hz -3.01+-0.1 LUFS; peak clamp 0.94406+-1e-5; SI-SDR hand cases"):
        rng = np.random.default_rng(0)
        for window, hop in test_dsp.PAIRS:
            w = rng.uniform(-1, 1, 7777).astype(np.float32)
            err = np.max(np.abs(dsp.istft(dsp.stft(w, window, hop), len(w)) - w))
            assert err < 1e-4, f"({window}, {hop}) round trip error {err:.3g}"
        lufs = dsp.measure_lufs(test_dsp.sine(997, seconds=5.0))
        assert abs(lufs + 3.01) <= 0.1, f"997 Hz sine reads {lufs:.3f} LUFS"
        peak = np.max(np.abs(dsp.peak_clamp(np.array([0.2, -1.0, 0.5], dtype=np.float32))))
        assert abs(peak - 0.94406) <= 1e-5, f"clamped peak {peak}"
        assert abs(si_sdr([1, 1], [1, 0]) - 0.0) <= 1e-6
        assert abs(si_sdri([1, 0.5], [1, 0], [1, 1]) - 10 * np.log10(4)) <= 1e-6


def test_bitstream(criterion):
    with criterion("bitstream: 10^3 fuzzed grids round-trip bit-exactly; corrupted headers rejected"):
        bitstream_tests.test_fuzz_roundtrip()
        cfg = preset("toy")
        data = pack_bitstream(bitstream_tests.random_grid(np.random.default_rng(0), cfg, SOURCES, 10), cfg)
        corrupt = [b"XDC1" + data[4:], data[:4] + b"\x09\x00" + data[6:], data[:10], data[:-1], data + b"\0",
                   data[:17] + b"\x00" + data[18:], data[:17] + b"\x08" + data[18:], data[:16] + b"\x00" + data[17:]]
        for blob in corrupt:
            with pytest.raises(FormatError):
                unpack_bitstream(blob)


def test_mask_partition(criterion):
    with criterion("mask separation: sum of outputs == mixture within 1e-3; disjoint-spectrum oracle >= 30 dB"):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            mix = (0.3 * rng.standard_normal(16000)).astype(np.float32)
            stems = {s: (rng.uniform(0, 1) * rng.standard_normal(16000)).astype(np.float32) for s in SOURCES}
            worst = max(worst, np.max(np.abs(sum(separate_with_mask(mix, stems).values()) - mix)))
        assert worst <= 1e-3, f"partition error {worst:.3g}"
        a, b = test_eval.tone(500), test_eval.tone(3000)
        out = separate_with_mask(a + b, {"speech": a, "music": b})
        assert min(si_sdr(out["speech"], a), si_sdr(out["music"], b)) >= 30


# Determinism and resume


def _determinism_config(steps):
    cfg = default_config("toy")
    cfg.train.total_steps = steps
    cfg.train.batch_size = 2
    cfg.train.segment_s = 0.128
    cfg.train.warmup_steps = 20
    cfg.train.checkpoint_every = 50
    cfg.train.gamma = None
    return cfg.validate()


@pytest.mark.slow
def test_determinism_and_resume(criterion, tmp_path):
    with criterion("seeded re-runs bit-identical for 100 steps; resume preserves the trajectory"):
        run_training(_determinism_config(100), tmp_path / "a")
        run_training(_determinism_config(100), tmp_path / "b")
        a, b = read_metrics(tmp_path / "a"), read_metrics(tmp_path / "b")
        assert len(a) == 100 and a == b, "metric streams differ"
        assert latest_checkpoint(tmp_path / "a").read_bytes() == latest_checkpoint(tmp_path / "b").read_bytes()
        run_training(_determinism_config(100), tmp_path / "c", stop_at=50)
        run_training(_determinism_config(100), tmp_path / "c", resume=True)
        assert read_metrics(tmp_path / "c") == a, "resumed trajectory differs"
        assert latest_checkpoint(tmp_path / "c").read_bytes() == latest_checkpoint(tmp_path / "a").read_bytes()


# Desk-scale disentanglement


def toy_checkpoint():
    """Newest checkpoint of the full toy run, training or resuming it first if needed."""
    cfg = default_config("toy")
    ckpt = latest_checkpoint(TOY_RUN)
    if ckpt is None or len(read_metrics(TOY_RUN)) < cfg.train.total_steps:
        run_training(cfg, TOY_RUN, resume=ckpt is not None)
    return latest_checkpoint(TOY_RUN), cfg


def solo_items(n_per_source=8, seconds=1.0, seed=90_210):
    """Held-out single-source inputs at training loudness (the training seed is 0)."""
    spec = replace(mixing.MixSpec(), track_count_probs=(1.0, 0.0, 0.0))
    stream = mixing.ToyMixtureStream(spec, int(seconds * dsp.SAMPLE_RATE), seed)
    out = {s: [] for s in SOURCES}
    i = 0
    while min(len(v) for v in out.values()) < n_per_source:
        item = stream.item(i)
        (s,) = item.stems
        if len(out[s]) < n_per_source:
            out[s].append(item.mixture)
        i += 1
    return out


def print_matrix(note, title, matrix):
    note(f"\n  {title}: rows = input source, columns = quantizer")
    note("  " + " " * 8 + " ".join(f"{q:>8}" for q in SOURCES))
    for s in SOURCES:
        note(f"  {s:<8}" + " ".join(f"{matrix[s][q]:8.2f}" for q in SOURCES))


@pytest.fixture(scope="module")
def trained():
    from sdcodec.checkpoint import load_model

    path, cfg = toy_checkpoint()
    return load_model(path, cfg.codec), read_metrics(TOY_RUN)


@pytest.mark.slow
def test_training_mel_drop(criterion, note, trained):
    _, metrics = trained
    with criterion("toy run: smoothed mel loss drops >= 30 % from its first-100-step mean"):
        drop = mel_drop([m["mel"] for m in metrics])
        note(f"\n  mel drop {100 * drop:.1f} % over {len(metrics)} steps")
        assert drop >= 0.30, f"mel dropped {100 * drop:.1f} %"


@pytest.mark.slow
def test_disentanglement(criterion, note, trained):
    model, _ = trained
    items = solo_items()
    print_matrix(note, "mel distance (diagnostic, lower is better)", cross_quantizer_matrix(model, items, mel_distance))
    with criterion("toy run: own-quantizer resynthesis beats every other quantizer by >= 5 dB SI-SDR"):
        matrix = cross_quantizer_matrix(model, items)
        print_matrix(note, "SI-SDR dB", matrix)
        margins = {s: matrix[s][s] - max(matrix[s][q] for q in SOURCES if q != s) for s in SOURCES}
        note("  margins " + ", ".join(f"{s} {m:.2f} dB" for s, m in margins.items()))
        assert min(margins.values()) >= 5.0, f"smallest margin {min(margins.values()):.2f} dB"


@pytest.mark.slow
def test_separate_single_source_mixture(note, trained):
    """Separating a one-source mixture: the matching output scores highest against the input."""
    model, _ = trained
    from sdcodec.evaluate import decode_all

    wins = 0
    items = solo_items(n_per_source=4)
    for s, waves in items.items():
        for w in waves:
            decoded = decode_all(model, w)
            out = separate_with_mask(w, {q: decoded[q] for q in SOURCES})
            scores = {q: si_sdr(out[q], w) for q in SOURCES}
            wins += max(scores, key=scores.get) == s
    note(f"\n  matching source ranked first on {wins}/12 single-source mixtures")
    assert wins == 12


@pytest.mark.slow
def test_trained_residual_energy(note, trained):
    """Residual energy is non-increasing across layers for at least 99 % of (item, source, layer) triples."""
    model, _ = trained
    stream = mixing.ToyMixtureStream(mixing.MixSpec(), dsp.SAMPLE_RATE // 2, 31_337)
    x = torch.from_numpy(np.stack([stream.item(i).mixture for i in range(64)]))[:, None]
    with torch.no_grad():
        q = model.quantize(model.encode(x))
    e = torch.stack([q.residual_energies[s] for s in SOURCES])  # (S, B, R + 1)
    violations = (e[..., 1:] > e[..., :-1]).float()
    note(f"\n  residual-energy increases: {int(violations.sum())} of {violations.numel()} layer steps")
    assert violations.mean().item() <= 0.01
