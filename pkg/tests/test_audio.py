import functools
import logging

import numpy as np
import pytest
from scipy import fft as sp_fft

from avguard.audio import (
    CLIP_SAMPLES,
    FEATURE_DIM,
    LOG_FLOOR,
    AudioClip,
    FeatureStore,
    extract_features,
    frame_signal,
    hz_to_mel,
    load_wav,
    mel_filterbank,
    mel_to_hz,
    mfcc_features,
    power_spectrum,
)
from avguard.errors import ConfigurationError, FormatError, InsufficientInputError, UnsupportedFormatError

from .utils import tone, write_wav


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_clip(rng, length=CLIP_SAMPLES):
    return AudioClip(samples=rng.uniform(-0.5, 0.5, length))


@functools.cache
def oracle_weights(n_mels: int = 128, n_fft: int = 512, rate: int = 16000) -> np.ndarray:
    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    points = [700.0 * (10 ** (m / 2595.0) - 1.0) for m in np.linspace(mel(0.0), mel(rate / 2), n_mels + 2)]
    weights = np.zeros((n_mels, n_fft // 2 + 1))
    for f in range(n_mels):
        lo, mid, hi = points[f], points[f + 1], points[f + 2]
        for j in range(n_fft // 2 + 1):
            fj = j * rate / n_fft
            if lo < fj <= mid:
                weights[f, j] = (fj - lo) / (mid - lo)
            elif mid < fj < hi:
                weights[f, j] = (hi - fj) / (hi - mid)
    return weights


def oracle_mfcc(samples: np.ndarray) -> np.ndarray:
    """Direct DFT, explicit triangle weights and textbook DCT-II."""
    window, hop, n_fft, n_mels = 400, 160, 512, 128
    n_frames = (len(samples) - window) // hop + 1
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(window) / (window - 1))
    frames = np.stack([samples[i * hop : i * hop + window] * hamming for i in range(n_frames)])

    n = np.arange(window)
    k = np.arange(n_fft // 2 + 1)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)
    power = np.abs(frames @ dft.T) ** 2

    logmel = np.log(power @ oracle_weights().T + 1e-10)
    basis = np.cos(np.pi * np.outer(np.arange(n_mels), 2 * np.arange(n_mels) + 1) / (2 * n_mels))
    scale = np.full(n_mels, np.sqrt(2.0 / n_mels))
    scale[0] = np.sqrt(1.0 / n_mels)
    cepstra = logmel @ (basis * scale[:, None]).T
    return cepstra.reshape(-1)[:1000]


class TestLoadWav:
    def test_one_second_clip(self, tmp_path):
        clip = load_wav(write_wav(tmp_path / "go.wav", tone(440.0)), label="go")

        assert len(clip) == 16000
        assert np.max(np.abs(clip.samples)) <= 1.0
        assert clip.label == "go"
        assert clip.source.endswith("go.wav")

    def test_zero_payload(self, tmp_path):
        clip = load_wav(write_wav(tmp_path / "silence.wav", np.zeros(16000, dtype=np.int16)))

        assert not clip.samples.any()

    def test_short_clip_is_tail_padded(self, tmp_path):
        clip = load_wav(write_wav(tmp_path / "half.wav", tone(440.0, seconds=0.5)))

        assert len(clip) == 16000
        assert not clip.samples[8000:].any()
        assert clip.samples[:8000].any()

    def test_long_clip_is_truncated(self, tmp_path):
        pcm = tone(440.0, seconds=1.5)

        clip = load_wav(write_wav(tmp_path / "long.wav", pcm))

        np.testing.assert_array_equal(clip.samples, pcm[:16000] / 32768.0)

    def test_pcm_scaling(self, tmp_path):
        pcm = np.array([-32768, 0, 16384, 32767], dtype=np.int16)

        clip = load_wav(write_wav(tmp_path / "scale.wav", pcm))

        np.testing.assert_array_equal(clip.samples[:4], [-1.0, 0.0, 0.5, 32767 / 32768])

    @pytest.mark.parametrize(
        ("rate", "samples"),
        (
            pytest.param(8000, tone(440.0)[:8000], id="wrong-rate"),
            pytest.param(16000, np.stack([tone(440.0), tone(440.0)], axis=1), id="stereo"),
            pytest.param(16000, tone(440.0).astype(np.int32) << 16, id="32-bit"),
            pytest.param(16000, tone(440.0).astype(np.float32) / 32768, id="float"),
        ),
    )
    def test_unsupported_encodings(self, tmp_path, rate, samples):
        path = write_wav(tmp_path / "bad.wav", samples, rate=rate)

        with pytest.raises(UnsupportedFormatError):
            load_wav(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"JUNK this is not a wave file")

        with pytest.raises(FormatError):
            load_wav(path)

    @pytest.mark.parametrize(
        "payload",
        (
            pytest.param(b"", id="empty"),
            pytest.param(b"RIFF\x10", id="riff-size-cut"),
            pytest.param(b"RIFF\x24\x00\x00\x00WAVE", id="no-chunks"),
            pytest.param(b"RIFF\x24\x00\x00\x00WAVEfmt \x10\x00", id="fmt-size-cut"),
        ),
    )
    def test_truncated_header(self, tmp_path, payload):
        path = tmp_path / "cut.wav"
        path.write_bytes(payload)

        with pytest.raises(FormatError):
            load_wav(path)

    def test_missing_file_is_not_a_format_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "absent.wav")


class TestFrameSignal:
    def test_one_second_gives_98_frames(self, rng):
        frames = frame_signal(random_clip(rng))

        assert frames.frames.shape == (98, 400)
        assert (frames.window_len, frames.hop) == (400, 160)

    def test_exactly_one_window(self, rng):
        assert frame_signal(random_clip(rng, 400)).n_frames == 1

    def test_constant_signal_gives_scaled_window(self):
        frames = frame_signal(AudioClip(samples=np.full(16000, 0.25)))

        np.testing.assert_allclose(frames.frames, np.tile(0.25 * np.hamming(400), (98, 1)))

    def test_frames_are_windowed_slices(self, rng):
        clip = random_clip(rng)

        frames = frame_signal(clip)

        np.testing.assert_allclose(frames.frames[7], clip.samples[7 * 160 : 7 * 160 + 400] * np.hamming(400))

    def test_frame_count_law(self, rng):
        for length in rng.integers(400, 20000, size=25):
            expected = (length - 400) // 160 + 1
            assert frame_signal(random_clip(rng, int(length))).n_frames == expected

    def test_too_short(self, rng):
        with pytest.raises(InsufficientInputError):
            frame_signal(random_clip(rng, 399))


class TestPowerSpectrum:
    def test_shape(self, rng):
        spectrogram = power_spectrum(frame_signal(random_clip(rng)))

        assert spectrogram.power.shape == (98, 257)
        assert (spectrogram.power >= 0).all()

    def test_zero_frame(self):
        spectrogram = power_spectrum(frame_signal(AudioClip(samples=np.zeros(400))))

        assert not spectrogram.power.any()

    def test_matches_direct_dft(self, rng):
        frames = frame_signal(random_clip(rng, 400))
        x = np.zeros(512)
        x[:400] = frames.frames[0]
        n = np.arange(512)
        direct = np.array([abs(np.sum(x * np.exp(-2j * np.pi * k * n / 512))) ** 2 for k in range(257)])

        np.testing.assert_allclose(power_spectrum(frames).power[0], direct, rtol=1e-9, atol=1e-9 * direct.max())

    def test_parseval(self, rng):
        frames = frame_signal(random_clip(rng))
        power = power_spectrum(frames).power

        # two-sided energy: DC and Nyquist once, every other bin twice
        two_sided = power[:, 0] + 2 * power[:, 1:256].sum(axis=1) + power[:, 256]
        np.testing.assert_allclose((frames.frames**2).sum(axis=1), two_sided / 512, rtol=1e-9)

    @pytest.mark.parametrize("fft_size", (pytest.param(256, id="shorter-than-window"), pytest.param(600, id="not-power-of-two")))
    def test_bad_fft_size(self, rng, fft_size):
        with pytest.raises(ConfigurationError):
            power_spectrum(frame_signal(random_clip(rng)), fft_size=fft_size)


class TestMelFilterBank:
    @pytest.mark.parametrize(
        ("hz", "mel"),
        (
            pytest.param(0.0, 0.0, id="zero"),
            pytest.param(700.0, 2595.0 * np.log10(2.0), id="700Hz"),
        ),
    )
    def test_mel_scale(self, hz, mel):
        assert hz_to_mel(hz) == pytest.approx(mel)
        assert mel_to_hz(mel) == pytest.approx(hz, abs=1e-9)

    def test_700_hz_value(self):
        assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)

    def test_shape_and_range(self):
        bank = mel_filterbank()

        assert bank.weights.shape == (128, 257)
        assert bank.n_filters == 128
        assert bank.weights.min() >= 0.0
        assert bank.weights.max() <= 1.0

    def test_filters_are_triangles(self):
        bank = mel_filterbank()

        for row in bank.weights:
            support = np.flatnonzero(row)
            if support.size == 0:
                continue
            assert np.all(np.diff(support) == 1), "support must be contiguous"
            peak = int(np.argmax(row))
            assert np.all(np.diff(row[support[0] : peak + 1]) >= 0)
            assert np.all(np.diff(row[peak : support[-1] + 1]) <= 0)

    def test_empty_low_filters_are_kept_and_logged(self, caplog):
        with caplog.at_level(logging.DEBUG, logger="avguard.audio"):
            bank = mel_filterbank()

        empty = np.flatnonzero(bank.weights.max(axis=1) == 0)
        assert bank.n_filters == 128
        assert empty.size and empty.max() < 16
        assert f"{empty.size} of 128 mel filters cover no FFT bin" in caplog.text

    def test_centers_equally_spaced_in_mel(self):
        bank = mel_filterbank()

        assert np.all(np.diff(bank.centers) > 0)
        np.testing.assert_allclose(np.diff(hz_to_mel(bank.centers)), np.diff(hz_to_mel(bank.centers))[0], rtol=1e-9)

    def test_bin_coverage(self):
        bank = mel_filterbank()
        freqs = np.arange(257) * 16000 / 512

        inner = (freqs > bank.centers[0]) & (freqs < bank.centers[-1])

        assert (bank.weights[:, inner].max(axis=0) > 0).all()

    def test_band_limited_peaks_reach_one(self):
        # 20 filters are wide enough that every triangle spans several bins
        bank = mel_filterbank(n_filters=20)

        assert (bank.weights.max(axis=1) > 0.5).all()

    @pytest.mark.parametrize(
        "kwargs",
        (
            pytest.param({"n_filters": 300}, id="more-breakpoints-than-bins"),
            pytest.param({"fmin": 4000.0, "fmax": 4000.0}, id="empty-band"),
            pytest.param({"fmax": 9000.0}, id="above-nyquist"),
            pytest.param({"fmin": -1.0}, id="negative-fmin"),
        ),
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            mel_filterbank(**kwargs)


class TestMfcc:
    def test_length(self, rng):
        features = mfcc_features(random_clip(rng))

        assert features.shape == (FEATURE_DIM,)
        assert np.isfinite(features).all()

    def test_silence_has_only_dc_coefficients(self):
        features = mfcc_features(AudioClip(samples=np.zeros(16000)))

        frames = np.zeros(8 * 128)
        frames[:1000] = features
        frames = frames.reshape(8, 128)
        np.testing.assert_allclose(frames[:7, 0], np.log(LOG_FLOOR) * np.sqrt(128))
        np.testing.assert_allclose(frames[:7, 1:], 0.0, atol=1e-9)

    def test_dct_orthonormal(self):
        D = sp_fft.dct(np.eye(128), type=2, norm="ortho", axis=0)

        np.testing.assert_allclose(D @ D.T, np.eye(128), atol=1e-9)

    def test_deterministic(self, rng):
        clip = random_clip(rng)

        np.testing.assert_array_equal(mfcc_features(clip), mfcc_features(AudioClip(samples=clip.samples.copy())))

    def test_matches_oracle(self, rng):
        for _ in range(100):
            clip = random_clip(rng)
            expected = oracle_mfcc(clip.samples)
            np.testing.assert_allclose(mfcc_features(clip), expected, rtol=1e-6, atol=1e-6 * np.abs(expected).max())


class TestFeatureStore:
    def test_extract_and_reload(self, tmp_path, speech_corpus):
        clips = [load_wav(path, label="go") for path in sorted((speech_corpus / "go").glob("*.wav"))]

        rows = extract_features(clips)
        FeatureStore.save(tmp_path, rows)
        loaded = FeatureStore.load(tmp_path)

        assert [row.clip_id for row in loaded] == [f"go/{p.name}" for p in sorted((speech_corpus / "go").glob("*.wav"))]
        assert all(row.label == "go" for row in loaded)
        np.testing.assert_array_equal(np.stack([r.values for r in loaded]), np.stack([r.values for r in rows]))

    def test_worker_pool_matches_serial(self, speech_corpus):
        clips = [load_wav(path, label="stop") for path in sorted((speech_corpus / "stop").glob("*.wav"))]

        serial = extract_features(clips, jobs=1)
        pooled = extract_features(clips, jobs=2)

        np.testing.assert_array_equal(np.stack([r.values for r in serial]), np.stack([r.values for r in pooled]))

    def test_jobs_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            extract_features([], jobs=0)

    def test_missing_store(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            FeatureStore.load(tmp_path)

    def test_manifest_mismatch(self, tmp_path, speech_corpus):
        clips = [load_wav(path, label="go") for path in sorted((speech_corpus / "go").glob("*.wav"))[:2]]
        FeatureStore.save(tmp_path, extract_features(clips))
        np.save(tmp_path / FeatureStore.MATRIX, np.zeros((3, FEATURE_DIM)))

        with pytest.raises(FormatError):
            FeatureStore.load(tmp_path)
