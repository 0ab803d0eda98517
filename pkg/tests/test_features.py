import numpy as np
import pytest

from guided_spkemb.errors import EmptyTargetMask
from guided_spkemb.features import (
    ActivityAnnotation,
    ActivityMask,
    downsample_mask,
    format_rttm,
    load_wav,
    logmel_features,
    mel_center_frequencies,
    parse_rttm,
    rasterize_activities,
    read_rttm,
    write_rttm,
    write_wav,
)
from guided_spkemb.synth import synth_speaker_bank, synth_waveform


def test_silence_roundtrip(tmp_path):
    path = tmp_path / "silence.wav"
    write_wav(path, np.zeros(16000))
    x = load_wav(path)
    assert x.shape == (16000,) and not x.any()


def test_square_wave_scaling(tmp_path):
    path = tmp_path / "square.wav"
    square = np.tile([1.0, -1.0], 100)
    write_wav(path, square)
    x = load_wav(path)
    np.testing.assert_allclose(x, square, atol=1 / 32768)


@pytest.mark.parametrize("subtype,tol", [("pcm16", 0.5 / 32768), ("float32", 1e-7)])
def test_random_roundtrip(tmp_path, subtype, tol):
    rng = np.random.default_rng(0)
    samples = rng.uniform(-0.9, 0.9, 4000)
    path = tmp_path / "r.wav"
    write_wav(path, samples, subtype=subtype)
    np.testing.assert_allclose(load_wav(path), samples, atol=tol)


def test_wav_errors(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file at all")
    with pytest.raises(ValueError, match="malformed"):
        load_wav(bad)
    ok = tmp_path / "ok.wav"
    write_wav(ok, np.zeros(10), rate=8000)
    with pytest.raises(ValueError, match="sample rate"):
        load_wav(ok)


def test_logmel_frame_count():
    assert logmel_features(np.zeros(16240), n_mels=80).n_frames == 100


def test_logmel_silence_is_stationary():
    feats = logmel_features(np.zeros(8000), n_mels=80, mean_normalize=False).frames
    assert np.all(feats == feats[0, 0])


def test_logmel_tone_peaks_at_nearest_center():
    t = np.arange(16000) / 16000
    feats = logmel_features(np.sin(2 * np.pi * 1000 * t), n_mels=80, mean_normalize=False).frames
    peak = feats.argmax(axis=0)
    assert np.all(peak == peak[0])
    assert peak[0] == np.argmin(np.abs(mel_center_frequencies(80) - 1000))


def test_logmel_rejects_short_input():
    with pytest.raises(ValueError):
        logmel_features(np.zeros(100))


def test_waveform_speakers_are_separable():
    bank = synth_speaker_bank(0, 3)
    means = [[logmel_features(synth_waveform(s, 1.0, i), n_mels=40, mean_normalize=False).frames.mean(axis=1)
              for i in range(2)] for s in bank]
    within = max(np.linalg.norm(a - b) for a, b in means)
    between = min(np.linalg.norm(means[i][0] - means[j][0]) for i in range(3) for j in range(i + 1, 3))
    assert within < between


def test_rasterize_single_speaker():
    ann = ActivityAnnotation({"a": [(0.0, 1.0)]})
    m = rasterize_activities(ann, "a", 100)
    assert m.q_target.all() and not m.q_nontarget.any()


def test_rasterize_overlap():
    ann = ActivityAnnotation({"t": [(0.0, 0.5)], "o": [(0.25, 1.0)]})
    m = rasterize_activities(ann, "t", 100)
    np.testing.assert_array_equal(np.flatnonzero(m.q_target), np.arange(50))
    np.testing.assert_array_equal(np.flatnonzero(m.q_nontarget), np.arange(25, 100))


def test_rasterize_empty_target():
    ann = ActivityAnnotation({"t": [], "o": [(0.0, 1.0)]})
    m = rasterize_activities(ann, "t", 100)
    assert m.empty_target
    with pytest.raises(EmptyTargetMask):
        m.require_target()
    with pytest.raises(KeyError):
        rasterize_activities(ann, "nobody", 100)


def test_annotation_validation():
    with pytest.raises(ValueError):
        ActivityAnnotation({"a": [(1.0, 0.5)]})
    with pytest.raises(ValueError):
        ActivityAnnotation({"a": [(0.0, 2.0)]}, duration=1.0)


def test_mask_bits_validated():
    with pytest.raises(ValueError):
        ActivityMask([0, 2], [0, 0])
    with pytest.raises(ValueError):
        ActivityMask([0, 1], [0])


def test_downsample_examples():
    np.testing.assert_array_equal(downsample_mask([1, 0, 0, 1], 2), [1, 1])
    np.testing.assert_array_equal(downsample_mask(np.zeros(7), 3), [0, 0, 0])
    with pytest.raises(ValueError):
        downsample_mask([1, 0], 0)


def test_downsample_matches_brute_force():
    rng = np.random.default_rng(5)
    mask = (rng.random(47) < 0.2).astype(int)
    expected = [int(any(mask[i : i + 3])) for i in range(0, 47, 3)]
    np.testing.assert_array_equal(downsample_mask(mask, 3), expected)


def test_rttm_roundtrip(tmp_path):
    ann = ActivityAnnotation({"s1": [(0.0, 1.25), (3.0, 4.5)], "s2": [(1.0, 2.0)]})
    path = tmp_path / "rec.rttm"
    write_rttm(path, ann, "rec")
    back = read_rttm(path)["rec"]
    assert back.intervals == ann.intervals
    assert format_rttm(back, "rec").splitlines()[0].startswith("SPEAKER rec 1 0.000 1.250")


def test_rttm_rejects_bad_lines():
    with pytest.raises(ValueError):
        parse_rttm("SPEAKER rec 1 0.0 1.0\n")
