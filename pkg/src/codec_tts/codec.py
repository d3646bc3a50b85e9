"""Convolutional audio codec with 4-stage residual vector quantization.

The encoder downsamples by 2*3*7*7 = 294 so 22050 Hz audio becomes 75 token
frames per second. The decoder reads only the first-stage codebook vectors and
emits one 80-bin log-mel frame per token.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .audio_io import HOP, N_MELS, MelSpectrogram, Waveform, mel_spectrogram
from .exceptions import DataError, TrainingDivergedError
from .serialization import load_module_state, load_tensors, read_config, save_tensors, write_config
from .validation import check_waveform, freeze

log = logging.getLogger(__name__)

N_CODEBOOKS = 4
CODEBOOK_SIZE = 1024
STRIDES = (2, 3, 7, 7)
SOS, EOS, PAD = 1024, 1025, 1026
VOCAB_SIZE = 1027


def rvq_quantize(latent, books):
    """Quantize one latent vector through a cascade of codebooks.

    Stage k picks the entry nearest (Euclidean) to the running residual, ties
    going to the smallest index, then subtracts it.

    Returns ``(ids, residual_norms)`` with one entry per stage.
    """
    residual = np.asarray(latent, dtype=np.float64).copy()
    books = np.asarray(books, dtype=np.float64)
    ids, norms = [], []
    for book in books:
        dist = np.sum((book - residual) ** 2, axis=1)
        k = int(np.argmin(dist))
        residual = residual - book[k]
        ids.append(k)
        # same sum as the next stage's zero-entry distance, so norms are exactly non-increasing
        norms.append(float(np.sqrt(dist[k])))
    return ids, norms


def _nearest(residual, book):
    # [N, D] x [K, D] -> [N]; argmin keeps the first (smallest) index on ties
    dist = (residual * residual).sum(1, keepdim=True) - 2 * residual @ book.T + (book * book).sum(1)[None]
    return dist.argmin(dim=1)


def select_first_codebook(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        return np.zeros(0, dtype=np.int64)
    return codes[:, 0].copy()


class CodecNet(nn.Module):
    def __init__(self, code_dim=64, n_codebooks=N_CODEBOOKS, codebook_size=CODEBOOK_SIZE,
                 channels=(32, 32, 64, 64), dec_channels=128):
        super().__init__()
        layers = [nn.Conv1d(1, channels[0], 7, padding=3), nn.GELU()]
        c_in = channels[0]
        for stride, c_out in zip(STRIDES, channels):
            layers += [nn.Conv1d(c_in, c_out, stride, stride=stride), nn.GELU()]
            c_in = c_out
        layers += [nn.Conv1d(c_in, code_dim, 3, padding=1)]
        self.encoder = nn.Sequential(*layers)
        for m in self.encoder:
            if isinstance(m, nn.Conv1d):
                # default conv init shrinks the signal ~4x per layer; keep latents data-driven
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

        self.codebooks = nn.Parameter(torch.randn(n_codebooks, codebook_size, code_dim) / code_dim ** 0.5)
        pin = torch.ones(n_codebooks, codebook_size, 1)
        pin[:, 0] = 0.0
        self.register_buffer("pin_mask", pin, persistent=False)

        self.decoder = nn.Sequential(
            nn.Conv1d(code_dim, dec_channels, 3, padding=1), nn.GELU(),
            nn.Conv1d(dec_channels, dec_channels, 3, padding=1), nn.GELU(),
            nn.Conv1d(dec_channels, N_MELS, 1),
        )
        nn.init.constant_(self.decoder[-1].bias, -5.0)

    @property
    def books(self):
        """Codebooks with entry 0 of every stage pinned to the zero vector."""
        return self.codebooks * self.pin_mask

    def encode(self, samples):
        """[B, N] samples -> [B, N // 294, code_dim] latents."""
        return self.encoder(samples[:, None, :]).transpose(1, 2)

    def quantize(self, z, fixed_ids=None):
        """[M, D] latents -> ids [M, n_stages] and per-stage code vectors [n_stages, M, D]."""
        books = self.books
        residual = z
        ids, codes = [], []
        for stage, book in enumerate(books):
            if fixed_ids is None:
                k = _nearest(residual.detach(), book.detach())
            else:
                k = fixed_ids[:, stage]
            c = book[k]
            ids.append(k)
            codes.append(c)
            residual = residual - c
        return torch.stack(ids, 1), torch.stack(codes, 0)

    def decode(self, first_stage):
        """[B, T, D] stage-0 code vectors -> [B, T, 80] log-mel."""
        return self.decoder(first_stage.transpose(1, 2)).transpose(1, 2)

    def losses(self, samples, mel_target, fixed_offset=None, fixed_ids=None):
        """Reconstruction L1 and commitment loss for a [B, N] batch.

        Returns ``(recon, commit, ids [B, T, stages], residuals [stages, B*T, D])``.
        ``fixed_offset`` replaces the straight-through term ``sg(q0 - z)`` by a
        constant and ``fixed_ids`` pins the code assignment; together they turn
        the estimator into a smooth function of the weights for gradient checks.
        """
        z = self.encode(samples)
        b, t, d = z.shape
        flat = z.reshape(-1, d)
        ids, codes = self.quantize(flat, fixed_ids)
        residuals = [flat]
        for k in range(codes.shape[0] - 1):
            residuals.append(residuals[-1] - codes[k])
        commit = sum(F.mse_loss(r, c.detach()) for r, c in zip(residuals, codes))

        offset = (codes[0] - flat).detach() if fixed_offset is None else fixed_offset
        q0 = (flat + offset).reshape(b, t, d)
        mel = self.decode(q0)
        recon = (mel - mel_target).abs().mean()
        return recon, commit, ids.reshape(b, t, -1), torch.stack(residuals).detach()


class NeuralCodec(BaseEstimator, TransformerMixin):
    """Trainable desk-scale codec: waveform -> [n_frames, 4] codes -> log-mel.

    After ``fit`` the network is frozen; ``transform`` maps waveforms to code
    matrices and ``decode_tokens`` maps first-codebook tokens to mel frames.
    """

    def __init__(self, code_dim=64, n_steps=200, lr=2e-3, batch_size=4, segment_frames=75,
                 commitment=0.25, seed=0):
        self.code_dim = code_dim
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.segment_frames = segment_frames
        self.commitment = commitment
        self.seed = seed

    def _build(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            return CodecNet(self.code_dim)

    def _init_codebooks(self, net, clips, rng):
        # seed codebook rows with observed stage residuals to avoid dead entries
        with torch.no_grad():
            z = torch.cat([net.encode(torch.as_tensor(c.samples)[None])[0] for c in clips])
            residual = z
            for k in range(net.codebooks.shape[0]):
                rows = torch.as_tensor(rng.integers(0, residual.shape[0], net.codebooks.shape[1]))
                jitter = 0.01 * residual.std() * torch.as_tensor(
                    rng.standard_normal((net.codebooks.shape[1], z.shape[1])), dtype=torch.float32)
                net.codebooks[k] = residual[rows] + jitter
                book = net.books[k]
                residual = residual - book[_nearest(residual, book)]

    def _batch(self, clips, rng):
        picks = rng.integers(0, len(clips), self.batch_size)
        n_frames = min(self.segment_frames, *(len(clips[i]) // HOP for i in picks))
        length = n_frames * HOP
        wavs, mels = [], []
        for i in picks:
            samples = clips[i].samples
            start = int(rng.integers(0, len(samples) - length + 1))
            seg = samples[start:start + length]
            wavs.append(seg)
            mels.append(mel_spectrogram(Waveform(seg)).frames[:n_frames])
        return torch.as_tensor(np.stack(wavs)), torch.as_tensor(np.stack(mels))

    def fit(self, X, y=None):
        """Train encoder/decoder by gradient and codebooks by EMA k-means with dead-entry restarts."""
        clips = [check_waveform(w, min_samples=HOP, name="codec training clip") for w in X]
        if not clips:
            raise DataError("codec training corpus is empty")
        rng = np.random.default_rng(self.seed)
        net = self._build()
        self._init_codebooks(net, clips, rng)
        net.codebooks.requires_grad_(False)
        params = [p for name, p in net.named_parameters() if name != "codebooks"]
        opt = torch.optim.Adam(params, lr=self.lr)
        ema_count = torch.ones(net.codebooks.shape[:2])
        ema_sum = net.codebooks.detach().clone()
        self.loss_history_ = []
        for step in range(self.n_steps):
            samples, target = self._batch(clips, rng)
            recon, commit, ids, residuals = net.losses(samples, target)
            loss = recon + self.commitment * commit
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"codec loss became {loss.item()} at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                self._ema_update(net, ids.reshape(-1, ids.shape[-1]), residuals, ema_count, ema_sum, rng,
                                 restart=step % 5 == 0)
            self.loss_history_.append(recon.item())
            if step % 50 == 0:
                log.info("codec step %d recon %.4f commit %.4f", step, recon.item(), commit.item())
        self.net_ = freeze(net)
        return self

    def _ema_update(self, net, ids, residuals, ema_count, ema_sum, rng, restart, decay=0.9):
        n_codes = net.codebooks.shape[1]
        for k in range(net.codebooks.shape[0]):
            onehot = F.one_hot(ids[:, k], n_codes).float()
            ema_count[k].mul_(decay).add_(onehot.sum(0), alpha=1 - decay)
            ema_sum[k].mul_(decay).add_(onehot.T @ residuals[k], alpha=1 - decay)
            net.codebooks[k] = ema_sum[k] / ema_count[k].clamp_min(1e-5)[:, None]
            if restart:
                dead = torch.nonzero(ema_count[k] < 0.05).flatten()
                dead = dead[dead != 0]
                if dead.numel():
                    rows = torch.as_tensor(rng.integers(0, residuals.shape[1], dead.numel()))
                    fresh = residuals[k][rows] * (1 + 0.01 * torch.as_tensor(
                        rng.standard_normal((dead.numel(), 1)), dtype=torch.float32))
                    net.codebooks[k, dead] = fresh
                    ema_sum[k, dead] = fresh
                    ema_count[k, dead] = 1.0

    def encode_audio(self, w) -> np.ndarray:
        """Waveform -> int64 code matrix [floor(N / 294), 4]."""
        check_is_fitted(self, "net_")
        w = check_waveform(w, min_samples=HOP, name="codec input")
        with torch.no_grad():
            z = self.net_.encode(torch.as_tensor(w.samples)[None])[0]
            ids, _ = self.net_.quantize(z)
        return ids.numpy().astype(np.int64)

    def transform(self, X):
        return [self.encode_audio(w) for w in X]

    def tokens(self, w) -> np.ndarray:
        return select_first_codebook(self.encode_audio(w))

    def first_stage_table(self) -> torch.Tensor:
        check_is_fitted(self, "net_")
        return self.net_.books[0]

    def decode_tokens(self, tokens) -> MelSpectrogram:
        """Audio tokens (no specials) -> one mel frame per token."""
        check_is_fitted(self, "net_")
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() >= CODEBOOK_SIZE):
            raise DataError("decode_tokens accepts audio tokens 0-1023 only; strip SOS/EOS/PAD first")
        if arr.size == 0:
            return MelSpectrogram(np.zeros((0, N_MELS), dtype=np.float32))
        with torch.no_grad():
            mel = self.net_.decode(self.net_.books[0][torch.as_tensor(arr)][None])[0]
        return MelSpectrogram(mel.numpy().astype(np.float32))

    def decode_soft(self, probs) -> torch.Tensor:
        """Differentiable decode of token distributions [T, 1024] via expected code vectors."""
        check_is_fitted(self, "net_")
        return self.net_.decode((probs @ self.net_.books[0])[None])[0]

    def inverse_transform(self, X):
        return [self.decode_tokens(t) for t in X]

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        path = Path(path)
        save_tensors(path, dict(self.net_.state_dict()))
        write_config(path.with_suffix(".cfg"), {"kind": "codec", **self.get_params()})

    @classmethod
    def load(cls, path) -> "NeuralCodec":
        path = Path(path)
        cfg = read_config(path.with_suffix(".cfg"))
        cfg.pop("kind", None)
        codec = cls(**cfg)
        net = codec._build()
        load_module_state(net, load_tensors(path), path)
        codec.net_ = freeze(net)
        return codec

