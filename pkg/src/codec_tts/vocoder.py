"""Mel-to-waveform vocoders.

``neural`` is a small transposed-conv generator (x294 upsampling) trained
adversarially against :class:`~codec_tts.losses.TemporalDiscriminator`, with
the mean speaker vector added as a per-channel bias after the input layer.
``deterministic`` inverts the mel by Griffin-Lim phase reconstruction and has
no trainable state.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .audio_io import HOP, LOG_FLOOR, N_MELS, SAMPLE_RATE, Waveform, MEL_FILTERBANK, istft, stft
from .exceptions import CheckpointError, DataError, TrainingDivergedError
from .losses import TemporalDiscriminator, discriminator_loss, loss_gan_generator
from .serialization import load_module_state, load_tensors, read_config, save_tensors, write_config

log = logging.getLogger(__name__)

UPSAMPLE = (7, 7, 3, 2)
_FB_PINV = np.linalg.pinv(MEL_FILTERBANK)


class VocoderNet(nn.Module):
    def __init__(self, channels=64, d_spk=256, slope=0.1):
        super().__init__()
        self.slope = slope
        self.pre = nn.Conv1d(N_MELS, channels, 7, padding=3)
        self.spk = nn.Linear(d_spk, channels)
        ups, smooth = [], []
        c = channels
        for u in UPSAMPLE:
            c_out = max(c // 2, 8)
            ups.append(nn.ConvTranspose1d(c, c_out, u, stride=u))
            smooth.append(nn.Conv1d(c_out, c_out, 7, padding=3))
            c = c_out
        self.ups = nn.ModuleList(ups)
        self.smooth = nn.ModuleList(smooth)
        self.post = nn.Conv1d(c, 1, 7, padding=3)

    def forward(self, mel, spk, use_speaker=True):
        """mel [B, T, 80], spk [B, d_spk] -> waveform [B, T * 294]."""
        h = self.pre(mel.transpose(1, 2))
        if use_speaker:
            h = h + self.spk(spk)[:, :, None]
        for up, sm in zip(self.ups, self.smooth):
            h = up(F.leaky_relu(h, self.slope))
            h = h + sm(F.leaky_relu(h, self.slope))
        return torch.tanh(self.post(F.leaky_relu(h, self.slope)))[:, 0]


def griffin_lim(mel_frames: np.ndarray, n_iter: int = 32, seed: int = 0) -> np.ndarray:
    """Reconstruct n_frames * 294 samples from log-mel by iterative phase estimation.

    Entries at the log floor count as silence.
    """
    n = mel_frames.shape[0]
    length = n * HOP
    log_floor = np.log(LOG_FLOOR)
    power = np.where(mel_frames > log_floor + 1e-6, np.exp(mel_frames.astype(np.float64)), 0.0)
    mag = np.sqrt(np.maximum(power @ _FB_PINV.T, 0.0))
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, length)
    for _ in range(n_iter):
        spec = stft(x)[:n]
        phase = np.exp(1j * np.angle(spec))
        x = istft(mag * phase, length)
    return x


class Vocoder(BaseEstimator):
    def __init__(self, mode="neural", channels=64, d_spk=256, n_steps=200, lr=1e-3, segment_frames=16,
                 batch_size=4, gl_iters=32, seed=0):
        self.mode = mode
        self.channels = channels
        self.d_spk = d_spk
        self.n_steps = n_steps
        self.lr = lr
        self.segment_frames = segment_frames
        self.batch_size = batch_size
        self.gl_iters = gl_iters
        self.seed = seed

    def initialize(self):
        if self.mode not in ("neural", "deterministic"):
            raise ValueError(f"unknown vocoder mode {self.mode!r}")
        if self.mode == "neural":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.seed)
                self.net_ = VocoderNet(self.channels, self.d_spk)
                self.disc_ = TemporalDiscriminator()
        else:
            self.net_ = None
        return self

    def _segments(self, pairs, rng):
        mels, wavs, spks = [], [], []
        frames = min(self.segment_frames, *(p[0].shape[0] for p in pairs))
        for i in rng.integers(0, len(pairs), self.batch_size):
            mel, wav, spk = pairs[i]
            start = int(rng.integers(0, mel.shape[0] - frames + 1))
            mels.append(mel[start:start + frames])
            seg = wav[start * HOP:(start + frames) * HOP]
            wavs.append(np.pad(seg, (0, frames * HOP - len(seg))))
            spks.append(spk)
        return (torch.as_tensor(np.stack(mels)), torch.as_tensor(np.stack(wavs)),
                torch.as_tensor(np.stack(spks)))

    def fit(self, X, y=None):
        """Alternating generator/discriminator updates on (mel, waveform, speaker latents) triples."""
        if self.mode != "neural":
            raise ValueError("only the neural vocoder is trainable")
        pairs = []
        for mel, wav, x_se in X:
            mel = np.asarray(getattr(mel, "frames", mel), dtype=np.float32)
            wav = np.asarray(getattr(wav, "samples", wav), dtype=np.float32)
            if mel.shape[0] == 0:
                raise DataError("empty mel in vocoder training data")
            pairs.append((mel, wav, _mean_speaker(x_se)))
        if not pairs:
            raise DataError("vocoder training set is empty")
        self.initialize()
        rng = np.random.default_rng(self.seed)
        g_opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr, betas=(0.8, 0.99))
        d_opt = torch.optim.Adam(self.disc_.parameters(), lr=self.lr, betas=(0.8, 0.99))
        self.history_ = []
        for step in range(self.n_steps):
            mel, wav, spk = self._segments(pairs, rng)
            fake = self.net_(mel, spk)

            d_real, d_fake = self.disc_(wav), self.disc_(fake.detach())
            d_loss = discriminator_loss(d_real, d_fake)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            self.disc_.requires_grad_(False)
            d_gen = self.disc_(fake)
            self.disc_.requires_grad_(True)
            g_loss = loss_gan_generator(d_gen, fake, wav)
            if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
                raise TrainingDivergedError(f"vocoder loss became non-finite at step {step}", step=step)
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()

            l1 = float((fake.detach() - wav).abs().mean())
            self.history_.append({
                "step": step, "g_loss": g_loss.item(), "d_loss": d_loss.item(), "l1": l1,
                "d_real": d_real.mean().item(), "d_fake": d_fake.mean().item(),
            })
            if step % 50 == 0:
                log.info("vocoder step %d g %.4f d %.4f l1 %.4f", step, g_loss.item(), d_loss.item(), l1)
        g_opt.zero_grad(set_to_none=True)
        d_opt.zero_grad(set_to_none=True)
        self.net_.eval()
        return self

    def vocode(self, mel, x_se=None, use_speaker=True) -> Waveform:
        """Mel [n_frames, 80] -> waveform of exactly n_frames * 294 samples."""
        frames = np.asarray(getattr(mel, "frames", mel), dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise DataError("vocode needs a non-empty [n_frames, 80] mel")
        if self.mode == "deterministic":
            samples = griffin_lim(frames, self.gl_iters, seed=self.seed)
        else:
            check_is_fitted(self, "net_")
            if x_se is None:
                raise DataError("the neural vocoder needs speaker embeddings")
            with torch.no_grad():
                dtype = next(self.net_.parameters()).dtype
                spk = torch.as_tensor(_mean_speaker(x_se), dtype=dtype)[None]
                samples = self.net_(torch.as_tensor(frames, dtype=dtype)[None], spk, use_speaker)[0].numpy()
        samples = np.clip(samples, -1.0, 1.0).astype(np.float32)
        return Waveform(samples, SAMPLE_RATE)

    def predict(self, X):
        return [self.vocode(mel, x_se) for mel, x_se in X]

    def save(self, path) -> None:
        path = Path(path)
        tensors = {}
        if self.mode == "neural":
            check_is_fitted(self, "net_")
            tensors.update({f"gen.{k}": v for k, v in self.net_.state_dict().items()})
            tensors.update({f"disc.{k}": v for k, v in self.disc_.state_dict().items()})
        save_tensors(path, tensors)
        write_config(path.with_suffix(".cfg"), {"kind": "vocoder", **self.get_params()})

    @classmethod
    def load(cls, path) -> "Vocoder":
        path = Path(path)
        cfg = read_config(path.with_suffix(".cfg"))
        if cfg.pop("kind", "vocoder") != "vocoder":
            raise CheckpointError(f"{path} is not a vocoder checkpoint")
        voc = cls(**cfg).initialize()
        if voc.mode == "neural":
            tensors = load_tensors(path)
            load_module_state(voc.net_, {k[4:]: v for k, v in tensors.items() if k.startswith("gen.")}, path)
            load_module_state(voc.disc_, {k[5:]: v for k, v in tensors.items() if k.startswith("disc.")}, path)
            voc.net_.eval()
        return voc


def _mean_speaker(x_se) -> np.ndarray:
    x = np.asarray(x_se, dtype=np.float32)
    return x.mean(axis=0) if x.ndim == 2 else x
