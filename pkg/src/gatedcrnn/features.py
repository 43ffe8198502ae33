"""WAV loading, log-mel / MFCC extraction, normalisation and feature files."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft
from scipy.io import wavfile

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
N_FFT = 1024
HOP = 667
N_FRAMES = 240
N_MELS = 64
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10
N_MFCC = 24
FRAME_HOP_SECONDS = HOP / SAMPLE_RATE
STD_FLOOR = 1e-8

FEATURE_KINDS = ("log_mel", "mfcc")
_MAGIC = b"GCRNNFEAT\x00\x00\x00"
_VERSION = 1


class FormatError(ValueError):
    """Unreadable or unsupported audio / feature file."""


class ConfigurationError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        if len(self.samples) == 0:
            raise FormatError("audio clip has no samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureChunk:
    values: np.ndarray
    feature_kind: str = "log_mel"
    frame_hop_seconds: float = FRAME_HOP_SECONDS

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


# ------------------------------------------------------------------ audio I/O

def load_wav(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a PCM16 or float32 WAV as mono samples in [-1, 1] at ``target_rate``.

    Stereo is averaged; other rates are resampled by linear interpolation.
    """
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: cannot read WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise FormatError(f"{path}: empty audio")
    x = np.clip(x, -1.0, 1.0)
    if rate != target_rate:
        x = resample_linear(x, rate, target_rate)
        rate = target_rate
    return AudioClip(x, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono samples as 16-bit PCM."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)


def resample_linear(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    n_out = int(round(len(x) * dst_rate / src_rate))
    t_out = np.arange(n_out) / dst_rate
    t_in = np.arange(len(x)) / src_rate
    return np.interp(t_out, t_in, x)


# ----------------------------------------------------------------- filterbank

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz) equally spaced on the HTK mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters of unit peak, shape ``(n_fft // 2 + 1, n_mels)``."""
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (centre - lo)
    falling = (hi - freqs[None, :]) / (hi - centre)
    return np.maximum(0.0, np.minimum(rising, falling)).T


_FB_CACHE: dict = {}


def _filterbank_cached(sample_rate, n_fft, n_mels):
    key = (sample_rate, n_fft, n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(sample_rate, n_fft, n_mels)
    return _FB_CACHE[key]


# ------------------------------------------------------------------- features

def fit_length(samples: np.ndarray, n: int) -> np.ndarray:
    if len(samples) >= n:
        return samples[:n]
    return np.pad(samples, (0, n - len(samples)))


def power_spectrogram(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP,
                      n_frames: int = N_FRAMES) -> np.ndarray:
    """Centred Hann-window STFT power, truncated to ``n_frames`` rows."""
    padded = np.pad(samples, (n_fft // 2, n_fft // 2))
    count = 1 + (len(padded) - n_fft) // hop
    if count < n_frames:
        padded = np.pad(padded, (0, (n_frames - count) * hop))
        count = n_frames
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = np.hanning(n_fft + 1)[:-1]
    stft = np.fft.rfft(frames * window, axis=1)
    return stft.real ** 2 + stft.imag ** 2


def log_mel(clip: AudioClip, n_mels: int = N_MELS, n_frames: int = N_FRAMES,
            clip_seconds: float = CLIP_SECONDS) -> FeatureChunk:
    """Fixed-size ``(n_frames, n_mels)`` log-mel chunk from a clip.

    The clip is zero-padded or truncated to ``clip_seconds`` first.
    """
    if clip.sample_rate != SAMPLE_RATE:
        clip = AudioClip(resample_linear(clip.samples, clip.sample_rate, SAMPLE_RATE),
                         SAMPLE_RATE)
    x = fit_length(np.asarray(clip.samples, dtype=np.float64),
                   int(round(clip_seconds * SAMPLE_RATE)))
    power = power_spectrogram(x, n_frames=n_frames)
    mel = power @ _filterbank_cached(SAMPLE_RATE, N_FFT, n_mels)
    return FeatureChunk(np.log(mel + LOG_FLOOR), "log_mel", FRAME_HOP_SECONDS)


def mfcc(chunk: FeatureChunk, n_coeffs: int = N_MFCC) -> FeatureChunk:
    """Orthonormal DCT-II of each log-mel frame, first ``n_coeffs`` kept."""
    if chunk.feature_kind != "log_mel":
        raise ValueError(f"mfcc needs a log_mel chunk, got {chunk.feature_kind!r}")
    coeffs = scipy.fft.dct(chunk.values, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return FeatureChunk(coeffs, "mfcc", chunk.frame_hop_seconds)


def extract(clip: AudioClip, kind: str = "log_mel") -> FeatureChunk:
    chunk = log_mel(clip)
    if kind == "mfcc":
        return mfcc(chunk)
    if kind != "log_mel":
        raise ValueError(f"unknown feature kind {kind!r}")
    return chunk


def compute_stats(chunks: Sequence[FeatureChunk]) -> NormStats:
    stacked = np.concatenate([c.values for c in chunks], axis=0)
    return NormStats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR))


def normalize(chunks: Sequence[FeatureChunk], stats: NormStats | None = None,
              mode: str = "train") -> tuple[list[FeatureChunk], NormStats]:
    """Standardise each frequency bin.

    In ``train`` mode the statistics are computed from ``chunks`` unless
    given; in ``eval`` mode they must be supplied.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"normalize mode must be 'train' or 'eval', got {mode!r}")
    if stats is None:
        if mode == "eval":
            raise ConfigurationError("normalisation statistics are required in eval mode")
        stats = compute_stats(chunks)
    std = np.maximum(stats.std, STD_FLOOR)
    out = [FeatureChunk((c.values - stats.mean) / std, c.feature_kind, c.frame_hop_seconds)
           for c in chunks]
    return out, stats


# -------------------------------------------------------------- feature files

def _pack(values: np.ndarray, kind: str) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"feature container holds 2-D matrices, got shape {values.shape}")
    t, f = values.shape
    header = _MAGIC + struct.pack("<I", _VERSION) + struct.pack("<IIB", t, f,
                                                                 FEATURE_KINDS.index(kind))
    return header + values.astype("<f4").tobytes(order="C")


def _unpack(raw: bytes, path) -> tuple[np.ndarray, str]:
    if len(raw) < 25 or raw[:12] != _MAGIC:
        raise FormatError(f"{path}: not a feature file")
    (version,) = struct.unpack_from("<I", raw, 12)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    t, f, tag = struct.unpack_from("<IIB", raw, 16)
    if tag >= len(FEATURE_KINDS):
        raise FormatError(f"{path}: unknown feature kind tag {tag}")
    body = raw[25:]
    if len(body) != 4 * t * f:
        raise FormatError(f"{path}: expected {t}x{f} values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float64)
    return values, FEATURE_KINDS[tag]


def save_features(path, chunk: FeatureChunk) -> None:
    Path(path).write_bytes(_pack(chunk.values, chunk.feature_kind))


def load_features(path) -> FeatureChunk:
    values, kind = _unpack(Path(path).read_bytes(), path)
    return FeatureChunk(values, kind, FRAME_HOP_SECONDS)


def save_stats(path, stats: NormStats, kind: str = "log_mel") -> None:
    Path(path).write_bytes(_pack(np.stack([stats.mean, stats.std]), kind))


def load_stats(path) -> NormStats:
    values, _ = _unpack(Path(path).read_bytes(), path)
    if values.shape[0] != 2:
        raise FormatError(f"{path}: statistics file must have 2 rows, found {values.shape[0]}")
    return NormStats(values[0], values[1])
