import struct
import wave

import numpy as np
import pytest

from w2vbert.audio import (
    LOG_FLOOR,
    Waveform,
    WavFormatError,
    compute_logmel,
    frame_params,
    generate_synthetic_corpus,
    load_wav,
    mel_filterbank,
    read_corpus,
    write_corpus,
    write_wav,
)


def write_pcm(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes() if width == 2 else bytes(len(samples)))


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(8, (0.8, 1.6), 4, seed=3)


class TestLoadWav:
    def test_zeros(self, tmp_path):
        write_pcm(tmp_path / "z.wav", np.zeros(16000))
        w = load_wav(tmp_path / "z.wav")
        assert len(w) == 16000 and w.sample_rate == 16000
        assert not w.samples.any()

    def test_scale(self, tmp_path):
        write_pcm(tmp_path / "s.wav", [-32768, 0, 16384, 32767])
        np.testing.assert_array_equal(load_wav(tmp_path / "s.wav").samples, [-1.0, 0.0, 0.5, 32767 / 32768])

    def test_full_scale_sine(self, tmp_path):
        t = np.arange(16000) / 16000
        write_wav(tmp_path / "a.wav", Waveform(np.sin(2 * np.pi * 440 * t) * (32767 / 32768), 16000))
        assert abs(np.abs(load_wav(tmp_path / "a.wav").samples).max() - 1.0) < 1e-3

    @pytest.mark.parametrize("kwargs, field", [
        (dict(channels=2), "channels"),
        (dict(width=1), "sample width"),
        (dict(rate=44100), "sample rate"),
    ])
    def test_bad_header_field_named(self, tmp_path, kwargs, field):
        write_pcm(tmp_path / "bad.wav", np.zeros(100, dtype=int), **kwargs)
        with pytest.raises(WavFormatError, match=field):
            load_wav(tmp_path / "bad.wav")

    def test_truncated_data(self, tmp_path):
        write_pcm(tmp_path / "t.wav", np.zeros(1000, dtype=int))
        raw = (tmp_path / "t.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(raw[:-500])
        with pytest.raises(WavFormatError, match="truncated"):
            load_wav(tmp_path / "t.wav")

    def test_not_a_wav(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"RIFF" + struct.pack("<I", 4) + b"JUNK")
        with pytest.raises(WavFormatError):
            load_wav(tmp_path / "x.wav")

    def test_unsupported_rate_in_memory(self):
        with pytest.raises(ValueError, match="sample_rate"):
            Waveform(np.zeros(10), 22050)


class TestLogMel:
    def test_frame_parameters(self):
        assert frame_params(16000) == (400, 160, 512)
        assert frame_params(8000) == (200, 80, 256)

    def test_one_second_gives_98_frames(self):
        # 1 + (16000 - 400) // 160
        assert compute_logmel(Waveform(np.zeros(16000), 16000)).frames.shape == (98, 80)

    def test_silence_hits_floor(self):
        f = compute_logmel(Waveform(np.zeros(16000), 16000)).frames
        np.testing.assert_array_equal(f, np.full_like(f, np.log(LOG_FLOOR)))

    def test_sine_peak_bin_is_constant(self):
        t = np.arange(16000) / 16000
        f = compute_logmel(Waveform(np.sin(2 * np.pi * 440 * t), 16000)).frames
        peaks = f[2:-2].argmax(axis=1)
        assert np.unique(peaks).size == 1
        # DFT oracle: the 440 Hz bin falls inside the peak filter's support
        fb = mel_filterbank(80, 512, 16000)
        assert fb[peaks[0], int(round(440 / (16000 / 512)))] > 0

    def test_too_short(self):
        with pytest.raises(ValueError, match="window"):
            compute_logmel(Waveform(np.zeros(399), 16000))

    def test_shift_covariance(self, rng):
        x = rng.standard_normal(8000)
        a = compute_logmel(Waveform(x, 16000)).frames
        b = compute_logmel(Waveform(np.concatenate([rng.standard_normal(160), x]), 16000)).frames
        np.testing.assert_allclose(b[1:a.shape[0]], a[:-1], atol=1e-5)

    def test_deterministic(self, rng):
        w = Waveform(rng.standard_normal(4000), 16000)
        assert compute_logmel(w).frames.tobytes() == compute_logmel(w).frames.tobytes()

    @pytest.mark.parametrize("rate", [8000, 16000])
    def test_filterbank_covers_every_bin(self, rate):
        fb = mel_filterbank(80, frame_params(rate)[2], rate)
        assert (fb.sum(axis=1) > 0).all()
        assert (fb[:, :-1].sum(axis=0) > 0).all()


class TestSyntheticCorpus:
    def test_deterministic(self):
        a = generate_synthetic_corpus(3, (0.5, 1.0), 4, seed=9)
        b = generate_synthetic_corpus(3, (0.5, 1.0), 4, seed=9)
        for u, v in zip(a, b):
            assert u.waveform.samples.tobytes() == v.waveform.samples.tobytes()
            assert u.frame_labels.tobytes() == v.frame_labels.tobytes()

    def test_parallel_equals_serial(self):
        whole = generate_synthetic_corpus(4, (0.5, 1.0), 4, seed=9)
        # utterance i only depends on seed + i
        third = generate_synthetic_corpus(1, (0.5, 1.0), 4, seed=11)[0]
        assert whole[2].frame_labels.tobytes() == third.frame_labels.tobytes()

    @pytest.mark.parametrize("args", [(2, (0.5, 1.0), 1, 0), (2, (1.0, 0.5), 4, 0),
                                      (2, (0.1, 1.0), 4, 0), (2, (1.0, 6.0), 4, 0), (0, (0.5, 1.0), 4, 0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(*args)

    def test_all_states_present(self, corpus):
        counts = np.bincount(np.concatenate([u.frame_labels for u in corpus]), minlength=4)
        assert (counts > 0).all()

    def test_labels_align_with_frames(self, corpus):
        for u in corpus:
            assert u.frame_labels.shape[0] == u.logmel().n_frames

    def test_minimum_dwell(self, corpus):
        for u in corpus:
            change = np.flatnonzero(np.diff(u.frame_labels)) + 1
            runs = np.diff(np.concatenate([[0], change, [u.frame_labels.size]]))
            # the final run may be cut by the end of the utterance
            assert (runs[:-1] >= 5).all()

    def test_amplitude_in_range(self, corpus):
        for u in corpus:
            assert np.abs(u.waveform.samples).max() <= 1.0

    def test_nearest_centroid_learnable(self, corpus):
        feats = [u.logmel().frames for u in corpus]
        x_tr = np.concatenate(feats[:6])
        y_tr = np.concatenate([u.frame_labels for u in corpus[:6]])
        cents = np.stack([x_tr[y_tr == s].mean(axis=0) for s in range(4)])
        x_ev = np.concatenate(feats[6:])
        y_ev = np.concatenate([u.frame_labels for u in corpus[6:]])
        pred = ((x_ev[:, None, :] - cents[None]) ** 2).sum(-1).argmin(axis=1)
        assert (pred == y_ev).mean() > 0.6

    def test_manifest_roundtrip(self, corpus, tmp_path):
        manifest = write_corpus(corpus[:2], tmp_path)
        lines = manifest.read_text().splitlines()
        assert lines[0].split("\t") == ["utt00000", "utt00000.wav", "utt00000.labels"]
        back = read_corpus(manifest)
        for u, v in zip(corpus[:2], back):
            assert u.utterance_id == v.utterance_id
            np.testing.assert_array_equal(u.frame_labels, v.frame_labels)
            np.testing.assert_allclose(u.waveform.samples, v.waveform.samples, atol=1 / 32768)
