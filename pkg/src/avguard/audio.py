"""
MFCC front end for one-second speech-command clips.

The chain is load -> frame -> power spectrum -> mel filterbank -> log -> DCT,
and every stage is exposed on its own so it can be checked against a
brute-force implementation.
"""

import functools
import logging
import os
import struct
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import fft as sp_fft
from scipy.io import wavfile
from tqdm import tqdm

from .errors import ConfigurationError, FormatError, InsufficientInputError, UnsupportedFormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
WINDOW_MS = 25
HOP_MS = 10
FFT_SIZE = 512
N_MELS = 128
LOG_FLOOR = 1e-10
FEATURE_DIM = 1000

PCM_SCALE = 32768.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: str | None = None
    source: str | None = None

    def __post_init__(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormatError(f"Sample rate {self.sample_rate} Hz is not supported, expected {SAMPLE_RATE} Hz")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormatError(f"Expected a mono waveform, got array of shape {samples.shape}")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise FormatError("Samples must be normalized to [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class FrameMatrix:
    frames: np.ndarray
    window_len: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class Spectrogram:
    power: np.ndarray
    fft_size: int


@dataclass(frozen=True, eq=False)
class MelFilterBank:
    weights: np.ndarray
    centers: np.ndarray
    fmin: float
    fmax: float

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


def fit_length(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad at the tail or truncate to exactly ``length`` samples."""
    if samples.shape[0] >= length:
        return samples[:length]
    return np.pad(samples, (0, length - samples.shape[0]))


def load_wav(path: str | os.PathLike, label: str | None = None) -> AudioClip:
    """
    Read a 16-bit PCM, mono, 16 kHz RIFF/WAVE file as a one-second clip.

    Raises:
        FormatError: the file is not a parseable RIFF/WAVE file
        UnsupportedFormatError: wrong sample rate, channel count or sample encoding
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error, OSError) as e:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file: {e}") from e

    if rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (no resampling is done)")
    if data.ndim != 1:
        raise UnsupportedFormatError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype != np.int16:
        raise UnsupportedFormatError(f"{path}: sample type {data.dtype}, expected 16-bit PCM")

    samples = fit_length(data.astype(np.float64) / PCM_SCALE)
    return AudioClip(samples=samples, label=label, source=os.fspath(path))


def frame_signal(clip: AudioClip, window_ms: int = WINDOW_MS, hop_ms: int = HOP_MS) -> FrameMatrix:
    """Slice into Hamming-windowed frames; frame ``i`` covers ``[i*hop, i*hop + window)``."""
    window_len = clip.sample_rate * window_ms // 1000
    hop = clip.sample_rate * hop_ms // 1000
    if window_len < 1 or hop < 1:
        raise ConfigurationError(f"Window {window_ms} ms / hop {hop_ms} ms is shorter than one sample")
    if len(clip) < window_len:
        raise InsufficientInputError(f"Clip has {len(clip)} samples, fewer than one {window_len}-sample window")

    windows = np.lib.stride_tricks.sliding_window_view(clip.samples, window_len)[::hop]
    return FrameMatrix(frames=windows * np.hamming(window_len), window_len=window_len, hop=hop)


def power_spectrum(frames: FrameMatrix, fft_size: int = FFT_SIZE) -> Spectrogram:
    """Squared magnitude of the one-sided DFT of each zero-padded frame (``fft_size // 2 + 1`` bins)."""
    if fft_size < 1 or fft_size & (fft_size - 1):
        raise ConfigurationError(f"fft_size must be a power of two, got {fft_size}")
    if fft_size < frames.window_len:
        raise ConfigurationError(f"fft_size {fft_size} is shorter than the {frames.window_len}-sample window")

    spectrum = sp_fft.rfft(frames.frames, n=fft_size, axis=-1)
    return Spectrogram(power=np.square(np.abs(spectrum)), fft_size=fft_size)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_filters: int = N_MELS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float = SAMPLE_RATE / 2,
) -> MelFilterBank:
    """
    Triangular filters on ``n_filters + 2`` mel-equally-spaced breakpoints.

    Filter ``k`` rises from breakpoint ``k`` to a peak of 1 at breakpoint ``k + 1``
    and falls to zero at breakpoint ``k + 2``; it is evaluated at the FFT bin
    frequencies ``j * sample_rate / fft_size``.
    """
    if n_filters < 1:
        raise ConfigurationError(f"n_filters must be positive, got {n_filters}")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigurationError(f"Need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")

    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    in_band = np.count_nonzero((bin_freqs >= fmin) & (bin_freqs <= fmax))
    if in_band < n_filters + 2:
        raise ConfigurationError(
            f"{n_filters + 2} breakpoints do not fit in the {in_band} FFT bins between {fmin} and {fmax} Hz"
        )

    breakpoints = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    lower, center, upper = breakpoints[:-2, None], breakpoints[1:-1, None], breakpoints[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.clip(np.minimum(rising, falling), 0.0, 1.0)

    empty = np.flatnonzero(weights.max(axis=1) == 0)
    if empty.size:
        # Low filters can be narrower than one FFT bin; they contribute log(LOG_FLOOR).
        log.debug("%d of %d mel filters cover no FFT bin: %s", empty.size, n_filters, empty.tolist())

    return MelFilterBank(weights=weights, centers=breakpoints[1:-1], fmin=fmin, fmax=fmax)


@functools.cache
def _default_filterbank() -> MelFilterBank:
    return mel_filterbank()


def log_mel_energies(clip: AudioClip) -> np.ndarray:
    spectrogram = power_spectrum(frame_signal(clip))
    energies = spectrogram.power @ _default_filterbank().weights.T
    return np.log(energies + LOG_FLOOR)


def mfcc_features(clip: AudioClip) -> np.ndarray:
    """
    The fixed-size audio input of every fusion model.

    All 128 orthonormal DCT-II coefficients of each frame are kept, flattened
    frame-major (frame 0 first) and cut to the first ``FEATURE_DIM`` values,
    zero-padding if the clip yields fewer.
    """
    cepstra = sp_fft.dct(log_mel_energies(clip), type=2, norm="ortho", axis=-1)
    flat = cepstra.reshape(-1)
    return fit_length(flat, FEATURE_DIM)


@dataclass(frozen=True, eq=False)
class AudioFeatures:
    """One row of the feature store: an extracted clip without its waveform."""

    clip_id: str
    label: str | None
    source: str | None
    values: np.ndarray


def clip_id(clip: AudioClip) -> str:
    if clip.source is None:
        raise ValueError("Clip has no source path to derive an id from")
    path = Path(clip.source)
    return f"{path.parent.name}/{path.name}"


def extract_features(clips: Sequence[AudioClip], jobs: int = 1) -> list[AudioFeatures]:
    """Run ``mfcc_features`` over ``clips``, fanning out over ``jobs`` worker processes."""
    if jobs < 1:
        raise ConfigurationError(f"jobs must be at least 1, got {jobs}")

    if jobs == 1:
        rows = [mfcc_features(clip) for clip in tqdm(clips, desc="mfcc", unit="clip", disable=len(clips) < 100)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(tqdm(pool.map(mfcc_features, clips, chunksize=32), total=len(clips), desc="mfcc", unit="clip"))

    return [
        AudioFeatures(clip_id=clip_id(clip), label=clip.label, source=clip.source, values=values)
        for clip, values in zip(clips, rows)
    ]


class FeatureStore:
    """
    On-disk feature matrix.

    ``features.npy`` holds one float64 row of ``FEATURE_DIM`` values per clip;
    ``clips.csv`` is the sidecar manifest with columns clip_id, label, source_path
    in the same row order.
    """

    MATRIX = "features.npy"
    MANIFEST = "clips.csv"

    @classmethod
    def save(cls, directory: Path, rows: Sequence[AudioFeatures]) -> list[Path]:
        directory.mkdir(parents=True, exist_ok=True)
        matrix = np.stack([row.values for row in rows]) if rows else np.zeros((0, FEATURE_DIM))
        np.save(directory / cls.MATRIX, matrix)
        pd.DataFrame(
            {
                "clip_id": [row.clip_id for row in rows],
                "label": [row.label for row in rows],
                "source_path": [row.source for row in rows],
            }
        ).to_csv(directory / cls.MANIFEST, index=False)
        return [directory / cls.MATRIX, directory / cls.MANIFEST]

    @classmethod
    def load(cls, directory: Path) -> list[AudioFeatures]:
        matrix_path, manifest_path = directory / cls.MATRIX, directory / cls.MANIFEST
        if not matrix_path.exists() or not manifest_path.exists():
            raise FileNotFoundError(f"No feature store in {directory}; run `avguard extract-features` first")
        matrix = np.load(matrix_path)
        manifest = pd.read_csv(manifest_path, dtype=str, keep_default_na=False)
        if len(manifest) != matrix.shape[0]:
            raise FormatError(f"{manifest_path} lists {len(manifest)} clips but {matrix_path} has {matrix.shape[0]} rows")
        return [
            AudioFeatures(clip_id=row.clip_id, label=row.label or None, source=row.source_path or None, values=matrix[i])
            for i, row in enumerate(manifest.itertuples(index=False))
        ]
