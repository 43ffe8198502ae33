import math

import numpy as np
import pytest
from scipy.io import wavfile

from gatedcrnn import features as fx
from gatedcrnn.features import AudioClip, FeatureChunk, NormStats


def tone(freq, seconds=10.0, amp=0.5, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestLoadWav:
    def test_full_scale_pcm16(self, tmp_path):
        p = tmp_path / "a.wav"
        wavfile.write(p, 16000, np.array([32767, 0, -16384], dtype=np.int16))
        clip = fx.load_wav(p)
        assert clip.samples[0] == pytest.approx(1.0)
        assert clip.samples[2] == pytest.approx(-0.5, abs=1e-4)

    def test_one_second_length(self, tmp_path):
        p = tmp_path / "a.wav"
        wavfile.write(p, 16000, np.zeros(16000, dtype=np.int16))
        assert len(fx.load_wav(p).samples) == 16000

    def test_stereo_downmix(self, tmp_path):
        p = tmp_path / "s.wav"
        wavfile.write(p, 16000, np.tile(np.array([[0.5, -0.5]], dtype=np.float32), (100, 1)))
        np.testing.assert_array_equal(fx.load_wav(p).samples, 0.0)

    def test_resamples_to_16k(self, tmp_path):
        p = tmp_path / "r.wav"
        wavfile.write(p, 8000, np.zeros(8000, dtype=np.float32))
        clip = fx.load_wav(p)
        assert clip.sample_rate == 16000 and len(clip.samples) == 16000

    def test_unsupported_encoding(self, tmp_path):
        p = tmp_path / "u.wav"
        wavfile.write(p, 16000, np.zeros(10, dtype=np.uint8))
        with pytest.raises(fx.FormatError):
            fx.load_wav(p)

    def test_empty_and_corrupt(self, tmp_path):
        empty = tmp_path / "e.wav"
        wavfile.write(empty, 16000, np.zeros(0, dtype=np.int16))
        with pytest.raises(fx.FormatError):
            fx.load_wav(empty)
        junk = tmp_path / "j.wav"
        junk.write_bytes(b"not a wav file at all")
        with pytest.raises(fx.FormatError):
            fx.load_wav(junk)


class TestLogMel:
    def test_silence(self):
        chunk = fx.log_mel(AudioClip(np.zeros(16000 * 10), 16000))
        np.testing.assert_array_equal(chunk.values, math.log(1e-10))
        assert chunk.values[0, 0] == pytest.approx(-23.03, abs=0.01)

    @pytest.mark.parametrize("seconds", [10.0, 3.0, 12.5])
    def test_shape(self, seconds):
        chunk = fx.log_mel(AudioClip(np.random.default_rng(0).normal(size=int(seconds * 16000)) * .1,
                                     16000))
        assert chunk.shape == (240, 64)
        assert np.all(np.isfinite(chunk.values))

    def test_tone_hits_nearest_band(self):
        # centres recomputed straight from the HTK mel formula
        mel = lambda f: 2595 * math.log10(1 + f / 700)
        inv = lambda m: 700 * (10 ** (m / 2595) - 1)
        step = mel(8000) / 65
        centres = [inv(step * (i + 1)) for i in range(64)]
        expected = min(range(64), key=lambda i: abs(centres[i] - 1000.0))
        chunk = fx.log_mel(AudioClip(tone(1000.0), 16000))
        assert set(chunk.values.argmax(axis=1).tolist()) == {expected}

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=160000) * 0.1
        a = fx.log_mel(AudioClip(x.copy(), 16000)).values
        b = fx.log_mel(AudioClip(x.copy(), 16000)).values
        assert a.tobytes() == b.tobytes()

    def test_doubling_amplitude_adds_2log2(self):
        x = np.random.default_rng(4).normal(size=160000) * 0.05
        a = fx.log_mel(AudioClip(x, 16000)).values
        b = fx.log_mel(AudioClip(2 * x, 16000)).values
        strong = np.exp(a) > 1e-6
        assert strong.mean() > 0.9
        np.testing.assert_allclose((b - a)[strong], 2 * math.log(2), atol=1e-3)


class TestMfcc:
    def test_constant_frame_only_c0(self):
        values = np.tile(np.linspace(-3, 3, 240)[:, None], (1, 64))
        out = fx.mfcc(FeatureChunk(values)).values
        np.testing.assert_allclose(out[:, 1:], 0.0, atol=1e-9)
        np.testing.assert_allclose(out[:, 0], 8.0 * values[:, 0], atol=1e-9)

    def test_shape_and_kind(self):
        out = fx.mfcc(FeatureChunk(np.zeros((240, 64))))
        assert out.shape == (240, 24) and out.feature_kind == "mfcc"

    def test_inverse_dct_round_trip(self, rng):
        frames = rng.standard_normal((10, 64))
        full = fx.mfcc(FeatureChunk(frames), n_coeffs=64).values
        k = np.arange(64)
        basis = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / 128)
        basis *= np.sqrt(2 / 64)
        basis[0] /= np.sqrt(2)
        np.testing.assert_allclose(full @ basis, frames, atol=1e-9)

    def test_c0_is_scaled_band_sum(self, rng):
        values = rng.standard_normal((240, 64))
        out = fx.mfcc(FeatureChunk(values)).values
        np.testing.assert_allclose(out[:, 0], math.sqrt(1 / 64) * values.sum(axis=1), atol=1e-9)

    def test_rejects_mfcc_input(self):
        with pytest.raises(ValueError):
            fx.mfcc(FeatureChunk(np.zeros((240, 24)), "mfcc"))


class TestNormalize:
    def test_standardised_data_unchanged(self, rng):
        chunks = [FeatureChunk(rng.standard_normal((240, 64))) for _ in range(2)]
        out, _ = fx.normalize(chunks, NormStats(np.zeros(64), np.ones(64)))
        np.testing.assert_allclose(out[0].values, chunks[0].values, atol=1e-9)

    def test_constant_bin_goes_to_zero(self, rng):
        v = rng.standard_normal((240, 64))
        v[:, 5] = 7.0
        out, stats = fx.normalize([FeatureChunk(v)])
        assert stats.std[5] == 1e-8
        np.testing.assert_array_equal(out[0].values[:, 5], 0.0)

    def test_corpus_moments(self, rng):
        chunks = [FeatureChunk(rng.normal(3.0, 2.0, size=(240, 64))) for _ in range(3)]
        out, _ = fx.normalize(chunks)
        stacked = np.concatenate([c.values for c in out])
        assert np.max(np.abs(stacked.mean(axis=0))) < 1e-9
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-9)

    def test_eval_mode_requires_stats(self):
        with pytest.raises(fx.ConfigurationError):
            fx.normalize([FeatureChunk(np.zeros((240, 64)))], mode="eval")


class TestContainers:
    def test_feature_round_trip(self, tmp_path, rng):
        chunk = FeatureChunk(rng.standard_normal((240, 64)))
        fx.save_features(tmp_path / "c.feat", chunk)
        back = fx.load_features(tmp_path / "c.feat")
        np.testing.assert_array_equal(back.values, chunk.values.astype(np.float32))
        assert back.feature_kind == "log_mel"

    def test_header_layout(self, tmp_path):
        fx.save_features(tmp_path / "c.feat", FeatureChunk(np.ones((3, 2)), "log_mel"))
        raw = (tmp_path / "c.feat").read_bytes()
        assert len(raw) == 16 + 4 + 4 + 1 + 3 * 2 * 4
        assert int.from_bytes(raw[16:20], "little") == 3
        assert int.from_bytes(raw[20:24], "little") == 2
        assert raw[24] == 0

    def test_stats_round_trip(self, tmp_path):
        stats = NormStats(np.arange(4.0), np.full(4, 2.0))
        fx.save_stats(tmp_path / "s.feat", stats)
        back = fx.load_stats(tmp_path / "s.feat")
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.std, stats.std)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.feat").write_bytes(b"\x00" * 40)
        with pytest.raises(fx.FormatError):
            fx.load_features(tmp_path / "x.feat")
