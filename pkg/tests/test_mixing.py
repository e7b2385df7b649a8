import time

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from sdcodec import dsp, mixing
from sdcodec.errors import ConfigError, FormatError, ShapeError, SilentInput
from sdcodec.mixing import MixItem, MixSpec

SR = dsp.SAMPLE_RATE


def toy_stems(seed, sources=mixing.SOURCES, seconds=1.0):
    rng = np.random.default_rng(seed)
    return {s: mixing.synth_toy_source(s, seconds, rng) for s in sources}


def flatness(w):
    mag = dsp.stft(w, 1024, 256).magnitude.astype(np.float64) ** 2 + 1e-12
    return float(np.mean(np.exp(np.mean(np.log(mag), axis=1)) / np.mean(mag, axis=1)))


# Track counts


def test_degenerate_probs():
    rng = np.random.default_rng(0)
    assert {mixing.sample_track_count((1, 0, 0), rng) for _ in range(200)} == {1}


@pytest.mark.parametrize("probs", [(0.6, 0.2, 0.2), (0.2, 0.2, 0.6)])
def test_track_count_frequencies(probs):
    rng = np.random.default_rng(7)
    draws = np.array([mixing.sample_track_count(probs, rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=4)[1:]
    np.testing.assert_allclose(counts / len(draws), probs, atol=0.02)
    assert scipy.stats.chisquare(counts, np.array(probs) * len(draws)).pvalue > 0.001


@pytest.mark.parametrize("probs", [(0.5, 0.2, 0.2), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_invalid_probs(probs):
    with pytest.raises(ConfigError):
        mixing.sample_track_count(probs, np.random.default_rng(0))


def test_mixspec_validation():
    with pytest.raises(ConfigError, match="mix.lufs_jitter"):
        MixSpec(lufs_jitter=-1).validate()
    with pytest.raises(ConfigError, match="mix.track_count_probs"):
        MixSpec(track_count_probs=(0.3, 0.3, 0.3)).validate()


def test_choose_sources_uniform():
    rng = np.random.default_rng(3)
    picks = [tuple(mixing.choose_sources(2, rng)) for _ in range(30_000)]
    subsets, counts = np.unique(np.array(picks), axis=0, return_counts=True)
    assert len(subsets) == 3
    assert scipy.stats.chisquare(counts).pvalue > 0.001
    assert all(list(p) == [s for s in mixing.SOURCES if s in p] for p in picks[:100])


# make_mixture


def test_single_stem_mixture_equals_stem():
    item = mixing.make_mixture(toy_stems(0, ["speech"]), MixSpec(), np.random.default_rng(0))
    assert item.active == {"speech"}
    np.testing.assert_array_equal(item.mixture, item.stems["speech"])


def test_stem_targets_with_zero_jitter():
    spec = MixSpec(lufs_jitter=0.0, mix_jitter=0.0)
    item = mixing.make_mixture(toy_stems(1), spec, np.random.default_rng(0))
    assert not item.metadata["peak_clamped"]
    # undo the common gain applied after summing
    common_db = item.metadata["mix_gain_db"] + 20 * np.log10(item.metadata["post_mix_scale"])
    for s, target in spec.target_lufs.items():
        assert abs(dsp.measure_lufs(item.stems[s]) - common_db - target) < 0.1
    if item.metadata["post_mix_scale"] == 1.0:
        assert abs(dsp.measure_lufs(item.mixture) + 27.0) < 0.1


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_additivity_and_ceiling(seed, k):
    rng = np.random.default_rng(seed)
    sources = mixing.choose_sources(k, rng)
    item = mixing.make_mixture(toy_stems(seed, sources, 0.5), MixSpec(), rng)
    total = np.sum([item.stems[s].astype(np.float64) for s in item.stems], axis=0)
    assert np.max(np.abs(item.mixture - total)) < 1e-6
    ceiling = dsp.db_to_gain(-0.5)
    for w in item.stems.values():
        assert np.max(np.abs(w)) <= ceiling + 1e-6
        assert len(w) == len(item.mixture)


def test_loud_stems_are_clamped():
    spec = MixSpec(target_lufs={"speech": 0.0, "music": 0.0, "sfx": 0.0}, mix_lufs=0.0)
    item = mixing.make_mixture(toy_stems(2), spec, np.random.default_rng(0))
    assert item.metadata["peak_clamped"]
    ceiling = dsp.db_to_gain(-0.5)
    assert max(np.max(np.abs(w)) for w in [item.mixture, *item.stems.values()]) <= ceiling + 1e-6


def test_make_mixture_errors():
    stems = toy_stems(0, ["speech", "music"])
    with pytest.raises(ShapeError):
        mixing.make_mixture({"speech": stems["speech"], "music": stems["music"][:-1]}, MixSpec(),
                            np.random.default_rng(0))
    with pytest.raises(SilentInput):
        mixing.make_mixture({"speech": np.zeros(SR, np.float32)}, MixSpec(), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mixing.make_mixture({"mix": stems["speech"]}, MixSpec(), np.random.default_rng(0))


def test_make_mixture_deterministic():
    a = mixing.make_mixture(toy_stems(5), MixSpec(), np.random.default_rng(9))
    b = mixing.make_mixture(toy_stems(5), MixSpec(), np.random.default_rng(9))
    assert a.mixture.tobytes() == b.mixture.tobytes()
    assert a.metadata == b.metadata


# Toy sources


def test_toy_length_contract():
    for s in mixing.SOURCES:
        assert len(mixing.synth_toy_source(s, 0.5, np.random.default_rng(0))) == 8000
    with pytest.raises(ValueError):
        mixing.synth_toy_source("speech", 0.4, np.random.default_rng(0))


def test_speech_has_pauses():
    for seed in range(5):
        w = mixing.synth_toy_source("speech", 2.0, np.random.default_rng(seed)).astype(np.float64)
        overall = np.sqrt(np.mean(w**2))
        win = 1600
        rms = np.sqrt(np.mean(w[: len(w) // win * win].reshape(-1, win) ** 2, axis=1))
        assert np.min(rms) < 0.1 * overall


def test_music_flatter_than_sfx():
    music = [flatness(mixing.synth_toy_source("music", 1.0, np.random.default_rng(i))) for i in range(100)]
    sfx = [flatness(mixing.synth_toy_source("sfx", 1.0, np.random.default_rng(i))) for i in range(100)]
    assert np.median(music) < np.median(sfx)


def test_toy_deterministic():
    for s in mixing.SOURCES:
        a = mixing.synth_toy_source(s, 1.0, np.random.default_rng(4))
        b = mixing.synth_toy_source(s, 1.0, np.random.default_rng(4))
        assert a.tobytes() == b.tobytes()
        assert np.all(np.isfinite(a)) and np.max(np.abs(a)) <= 1.0


# Eval segments


def _item(stems):
    mix = np.sum(list(stems.values()), axis=0).astype(np.float32)
    return MixItem(mix, stems, SR, {})


def test_silent_mixture_gives_no_segments():
    assert mixing.prepare_eval_segments(_item({"speech": np.zeros(SR, np.float32)}), 0.5) == []


def test_ten_seconds_into_two_segments():
    t = np.arange(10 * SR) / SR
    stems = {"speech": (0.3 * np.sin(2 * np.pi * 200 * t)).astype(np.float32),
             "music": (0.2 * np.sin(2 * np.pi * 440 * t)).astype(np.float32)}
    segs = mixing.prepare_eval_segments(_item(stems), 5.0)
    assert len(segs) == 2
    for seg in segs:
        assert len(seg) == 5 * SR
        np.testing.assert_allclose(seg.mixture, seg.stems["speech"] + seg.stems["music"], atol=1e-6)


def test_low_coverage_segment_dropped():
    n = 5 * SR
    t = np.arange(n) / SR
    tone = (0.3 * np.sin(2 * np.pi * 300 * t)).astype(np.float32)
    late = tone.copy()
    late[: int(0.8 * n)] = 0.0
    stems = {"speech": tone, "sfx": late}
    assert mixing.prepare_eval_segments(_item(stems), 5.0) == []
    stems["sfx"] = tone * 0.5
    assert len(mixing.prepare_eval_segments(_item(stems), 5.0)) == 1


def test_edges_trimmed():
    t = np.arange(3 * SR) / SR
    w = (0.3 * np.sin(2 * np.pi * 300 * t)).astype(np.float32)
    w[:SR] = 0.0
    segs = mixing.prepare_eval_segments(_item({"speech": w}), 1.0)
    assert len(segs) == 2
    assert segs[0].metadata["segment_start"] == SR


# Manifests and streams


def test_manifest_roundtrip(tmp_path):
    entries = []
    for s in mixing.SOURCES:
        dsp.write_wav(tmp_path / f"{s}.wav", mixing.synth_toy_source(s, 1.0, np.random.default_rng(0)))
        entries.append(mixing.ManifestEntry(s, f"{s}.wav", 1.0))
    mixing.write_manifest(tmp_path / "m.tsv", entries)
    back = mixing.read_manifest(tmp_path / "m.tsv")
    assert [e.source for e in back] == list(mixing.SOURCES)
    assert all(e.path.is_absolute() and e.path.exists() for e in back)
    items = list(mixing.manifest_items(back, MixSpec(), seed=0))
    assert len(items) == 1 and items[0].active == set(mixing.SOURCES)


@pytest.mark.parametrize("line,exc", [
    ("speech\tmissing.wav\t1.0\n", FileNotFoundError),
    ("speech\tx.wav\n", FormatError),
    ("speech\tx.wav\t-1\n", FormatError),
    ("mix\tx.wav\t1.0\n", ConfigError),
])
def test_manifest_errors(tmp_path, line, exc):
    dsp.write_wav(tmp_path / "x.wav", np.zeros(100, np.float32))
    (tmp_path / "m.tsv").write_text(line)
    with pytest.raises(exc):
        mixing.read_manifest(tmp_path / "m.tsv")


def test_toy_stream_index_addressable():
    stream = mixing.ToyMixtureStream(MixSpec(), 4000, seed=3)
    a, b = stream.item(17), mixing.ToyMixtureStream(MixSpec(), 4000, seed=3).item(17)
    assert a.mixture.tobytes() == b.mixture.tobytes() and a.active == b.active
    assert len(a) == 4000
    assert stream.item(18).mixture.tobytes() != a.mixture.tobytes()


def test_batches_resume_alignment():
    stream = mixing.ToyMixtureStream(MixSpec(), 2000, seed=0)
    full = mixing.batches(stream, 2)
    for _ in range(3):
        next(full)
    step, items = next(full)
    step2, items2 = next(mixing.batches(stream, 2, start_step=3))
    assert step == step2
    assert [i.mixture.tobytes() for i in items] == [i.mixture.tobytes() for i in items2]


def test_prefetch_bounded_and_ordered():
    produced = []

    def gen():
        for i in range(20):
            produced.append(i)
            yield i

    it = mixing.prefetch(gen(), maxsize=2)
    assert next(it) == 0
    time.sleep(0.2)
    assert len(produced) <= 4  # back-pressure: the worker stalls on a full queue
    assert list(it) == list(range(1, 20))
