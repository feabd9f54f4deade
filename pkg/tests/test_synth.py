import numpy as np
import pytest

from meco.errors import ConfigError
from meco.metrics import extract_gesture_beats
from meco.synth import (
    PairedSample,
    SynthConfig,
    make_text_corpus,
    style_band,
    synth_generate,
)


def test_same_seed_bitwise_identical():
    config = SynthConfig(count=4, min_duration=4.0, max_duration=5.0)
    a = synth_generate(42, config)
    b = synth_generate(42, config)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.motion.frames, sb.motion.frames)
        assert np.array_equal(sa.waveform, sb.waveform)
        assert np.array_equal(sa.beat_times, sb.beat_times)


def test_different_seed_differs():
    config = SynthConfig(count=2, min_duration=4.0, max_duration=5.0)
    a = synth_generate(1, config)
    b = synth_generate(2, config)
    assert not np.array_equal(a[0].motion.frames, b[0].motion.frames)


def test_durations_match_within_one_frame(small_dataset):
    for s in small_dataset:
        audio_dur = s.waveform.size / s.sample_rate
        assert abs(s.motion.duration - audio_dur) <= 1.0 / s.motion.frame_rate


def test_beat_spacing_in_contract_range(small_dataset):
    for s in small_dataset:
        gaps = np.diff(s.beat_times)
        assert (gaps >= 0.4 - 1e-9).all() and (gaps <= 1.2 + 1e-9).all()


def test_gesture_beats_align_with_annotations(small_dataset):
    # oracle: the package's own beat extractor recovers >= 90% of beats
    # within one frame
    total, hit = 0, 0
    for s in small_dataset:
        found = extract_gesture_beats(s.motion)
        for b in s.beat_times:
            total += 1
            if found.size and np.abs(found - b).min() <= 1.0 / s.motion.frame_rate:
                hit += 1
    assert total > 20
    assert hit / total >= 0.9


def test_styles_separable_by_spectral_classifier(small_dataset):
    # oracle: band-energy threshold classifier on joint-angle spectra
    def band_energy(clip, band):
        lo, hi = band
        x = clip.frames[:, 4:].astype(np.float64)
        x = x - x.mean(axis=0)
        spec = np.abs(np.fft.rfft(x, axis=0)) ** 2
        freqs = np.fft.rfftfreq(clip.n_frames, d=1.0 / clip.frame_rate)
        sel = (freqs >= lo - 0.5) & (freqs <= hi + 0.5)
        return spec[sel].sum()

    correct = 0
    for s in small_dataset:
        e0 = band_energy(s.motion, style_band(0))
        e1 = band_energy(s.motion, style_band(1))
        correct += (0 if e0 > e1 else 1) == s.style_id
    assert correct / len(small_dataset) >= 0.95


def test_waveform_has_energy_impulses_at_beats(small_dataset):
    s = small_dataset[0]
    sr = s.sample_rate
    frame = int(0.02 * sr)
    noise_power = np.mean(s.waveform[: int(0.3 * sr)] ** 2)  # before first beat
    for b in s.beat_times:
        start = int(b * sr)
        beat_power = np.mean(s.waveform[start : start + frame] ** 2)
        assert beat_power > 20 * noise_power


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(count=0),
        dict(min_duration=0.0),
        dict(min_duration=5.0, max_duration=4.0),
        dict(n_joints=0),
        dict(style_count=0),
        dict(style_count=12),  # exceeds motion bandwidth at 30 fps
        dict(sample_rate=4000),
    ],
)
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_duration_invariant_enforced(rng, small_dataset):
    good = small_dataset[0]
    with pytest.raises(Exception):
        PairedSample(
            motion=good.motion,
            waveform=good.waveform[: good.waveform.size // 2],
            sample_rate=good.sample_rate,
            beat_times=good.beat_times,
            style_id=0,
        )


def test_text_corpus_deterministic_and_sized():
    a = make_text_corpus(5, 50_000)
    b = make_text_corpus(5, 50_000)
    assert a == b
    assert len(a) == 50_000
    a.decode("ascii")  # raises if not ascii
    assert b != make_text_corpus(6, 50_000)
