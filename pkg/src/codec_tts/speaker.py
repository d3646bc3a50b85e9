"""Frozen speaker encoder: one unit-norm latent per mel frame of the reference."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .audio_io import LOG_FLOOR, N_MELS, mel_spectrogram
from .exceptions import DataError
from .validation import check_waveform, freeze

SPEAKER_SEED = 0x5EA
# log-mel values sit between log(1e-5) and a few nats; centre them before projecting
_MEL_CENTRE = 0.5 * np.log(LOG_FLOOR)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 0; edges average over the frames available."""
    n = x.shape[0]
    half = window // 2
    csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + window - half, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


class SpeakerEncoder(BaseEstimator, TransformerMixin):
    """Reference waveform -> [n_mel_frames, d_spk] speaker latents.

    Log-mel frames go through a fixed random affine map, a moving average
    over ``window`` frames and row-wise unit normalisation. Nothing is learned.
    """

    def __init__(self, d_spk=256, window=15, min_seconds=0.5, seed=SPEAKER_SEED):
        self.d_spk = d_spk
        self.window = window
        self.min_seconds = min_seconds
        self.seed = seed

    def fit(self, X=None, y=None):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            proj = nn.Linear(N_MELS, self.d_spk)
            nn.init.normal_(proj.weight, std=N_MELS ** -0.5)
            nn.init.normal_(proj.bias, std=0.1)
        self.module_ = freeze(proj)
        return self

    def speaker_latents(self, ref) -> np.ndarray:
        check_is_fitted(self, "module_")
        ref = check_waveform(ref, name="reference audio")
        if ref.duration < self.min_seconds:
            raise DataError(f"reference is {ref.duration:.2f}s; need at least {self.min_seconds}s")
        mel = mel_spectrogram(ref).frames.astype(np.float64) - _MEL_CENTRE
        w = self.module_.weight.detach().double().numpy()
        b = self.module_.bias.detach().double().numpy()
        h = moving_average(mel @ w.T + b, self.window)
        h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        return h.astype(np.float32)

    def transform(self, X):
        return [self.speaker_latents(w) for w in X]

    def mean_embedding(self, ref) -> np.ndarray:
        e = self.speaker_latents(ref).mean(axis=0)
        return e / max(np.linalg.norm(e), 1e-12)
