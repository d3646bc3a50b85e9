"""Waveform I/O, resampling, cropping and log-mel features.

Everything downstream works on mono float32 audio at 22050 Hz. The mel hop
(294 samples) is chosen so one mel frame lines up with one codec token frame
(22050 / 294 = 75 Hz).
"""
from __future__ import annotations

import warnings
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .exceptions import DataError

SAMPLE_RATE = 22050
HOP = 294
N_FFT = 1024
N_MELS = 80
LOG_FLOOR = 1e-5
FRAME_RATE = SAMPLE_RATE / HOP  # 75.0


@dataclass(frozen=True)
class Waveform:
    """Mono sample buffer plus its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels]
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def peak_normalize(samples: np.ndarray) -> np.ndarray:
    """Scale down only if the peak exceeds 1."""
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return samples


def resample(samples: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    if orig_sr == target_sr:
        return samples
    ratio = Fraction(target_sr, orig_sr)
    out = resample_poly(samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return out.astype(np.float32)


def load_wav(path) -> Waveform:
    """Read a PCM16 or float32 WAV, downmix to mono and resample to 22050 Hz."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            sr, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"unreadable wav {path}: {exc}") from exc

    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float32)
    else:
        raise DataError(f"unsupported wav encoding {data.dtype} in {path}")

    if data.ndim == 2:
        if data.shape[1] > 2:
            raise DataError(f"expected 1 or 2 channels, got {data.shape[1]}")
        data = data.mean(axis=1)
    if data.size == 0:
        raise DataError(f"empty audio in {path}")
    if not np.all(np.isfinite(data)):
        raise DataError(f"non-finite samples in {path}")

    data = resample(data, int(sr), SAMPLE_RATE)
    return Waveform(peak_normalize(data), SAMPLE_RATE)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(clipped * 32767.0).astype("<i2")


def save_wav(path, w: Waveform) -> None:
    """Write PCM16 mono at 22050 Hz (resampling if needed)."""
    samples = resample(w.samples, w.sample_rate, SAMPLE_RATE)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(to_pcm16(samples).tobytes())


def random_crop(w: Waveform, min_s: float = 2.0, max_s: float = 6.0, rng=None) -> Waveform:
    """Contiguous crop with a duration drawn uniformly from [min_s, max_s].

    Clips shorter than ``min_s`` come back unchanged.
    """
    if min_s > max_s:
        raise ValueError(f"min_s ({min_s}) > max_s ({max_s})")
    rng = np.random.default_rng(rng)
    n = len(w)
    if n < min_s * w.sample_rate:
        return w
    length = int(round(rng.uniform(min_s, max_s) * w.sample_rate))
    length = min(max(length, 1), n)
    start = int(rng.integers(0, n - length + 1))
    return Waveform(w.samples[start:start + length].copy(), w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_mels, n_fft // 2 + 1]."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


MEL_FILTERBANK = mel_filterbank()


def hann(n: int = N_FFT) -> np.ndarray:
    # periodic window: exact overlap-add behaviour for STFT inversion
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered (zero-padded) STFT, shape [n_frames, n_fft // 2 + 1]."""
    x = np.pad(np.asarray(samples, dtype=np.float64), n_fft // 2)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * hann(n_fft), axis=-1)


def istft(spec: np.ndarray, length: int, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[0]
    window = hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * window
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += window ** 2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-8)
    out = out[n_fft // 2:]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out[:length]


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """Log-mel features: FFT 1024, hop 294, 80 bins over 0-11025 Hz, floor 1e-5.

    Frame count is ``1 + len(w) // 294``.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise DataError(f"mel_spectrogram expects {SAMPLE_RATE} Hz, got {w.sample_rate}")
    if len(w) == 0:
        raise DataError("cannot compute mel of empty waveform")
    power = np.abs(stft(w.samples)) ** 2
    mel = power @ MEL_FILTERBANK.T
    frames = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return MelSpectrogram(frames)


def n_mel_frames(n_samples: int) -> int:
    return 1 + n_samples // HOP
