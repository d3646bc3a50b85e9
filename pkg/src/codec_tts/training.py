"""Teacher-forced training of the codec language model.

Each micro-batch runs the LM on ground-truth shifted tokens, scores the
next-token cross-entropy, decodes the soft token distribution through the
frozen codec decoder for the mel term and, when a neural vocoder is attached,
scores the vocoded waveform for the adversarial term. Gradients accumulate
over ``grad_accum`` micro-batches before one AdamW update.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .audio_io import HOP, mel_spectrogram, random_crop
from .codec import CODEBOOK_SIZE, EOS, SOS
from .exceptions import TrainingDivergedError
from .losses import (LOG_HEADER, LossBreakdown, TrainConfig, discriminator_loss, loss_ce,
                     loss_gan_generator, loss_mel, loss_total, lr_at)
from .serialization import save_tensors
from .validation import parameter_checksum

log = logging.getLogger(__name__)


@dataclass
class LmExample:
    tokens: np.ndarray  # audio tokens, no specials
    x_te: torch.Tensor  # [n_text, d_text]
    x_se: torch.Tensor  # [n_ref_frames, d_spk]
    mel: np.ndarray | None = None  # [>= n_tokens, 80] target log-mel
    wave: np.ndarray | None = None  # source samples aligned with tokens
    text: str = ""
    text_ids: list | None = None


def teacher_forcing_pair(tokens, max_seq: int):
    """Right-shift: input [SOS, t1..tn], target [t1..tn, EOS], both of length <= max_seq."""
    tokens = [int(t) for t in tokens[:max_seq - 1]]
    return [SOS] + tokens, tokens + [EOS]


def prepare_example(text, wave, reference, bpe, text_encoder, codec, speaker_encoder,
                    crop=False, rng=None, max_seq=500) -> LmExample:
    """Run the frozen front-ends on one (text, audio, reference) record."""
    if crop:
        wave = random_crop(wave, 2.0, 6.0, rng)
    ids = bpe.encode(text)
    tokens = codec.tokens(wave)[:max_seq - 1]
    mel = mel_spectrogram(wave).frames[:len(tokens)]
    return LmExample(
        tokens=tokens,
        x_te=text_encoder.encode_text(ids),
        x_se=torch.as_tensor(speaker_encoder.speaker_latents(reference)),
        mel=mel,
        wave=wave.samples[:len(tokens) * HOP],
        text=text,
        text_ids=ids,
    )


def example_nll(net, ex: LmExample, max_seq=500) -> float:
    """Teacher-forced mean NLL of one example."""
    inputs, targets = teacher_forcing_pair(ex.tokens, max_seq)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        logits = net(torch.tensor([inputs]), ex.x_te[None].to(dtype), ex.x_se[None].to(dtype))[0]
    return float(loss_ce(logits, torch.tensor(targets)))


class LmTrainer:
    """Owns optimizer state and the loss log for one LM training run.

    Parameters
    ----------
    net : CodecLM
    cfg : TrainConfig
    codec : NeuralCodec, optional
        Frozen codec whose decoder provides the mel term. Without it l_mel is 0.
    vocoder : Vocoder, optional
        Neural vocoder fine-tuned by the adversarial term. Predicted mels are
        detached first, so l_gan only reaches vocoder weights.
    frozen : dict of name -> nn.Module
        Modules that must not change; checksummed at start for :meth:`audit_frozen`.
    log_path : path, optional
        CSV loss log, one line per optimizer update.
    checkpoint_dir : path, optional
        Receives ``lm_step{N}.bin`` every ``cfg.checkpoint_every`` updates and
        ``lm_last_good.bin`` on divergence.
    """

    def __init__(self, net, cfg: TrainConfig, codec=None, vocoder=None, frozen=None,
                 log_path=None, checkpoint_dir=None):
        self.net = net
        self.cfg = cfg
        self.codec = codec
        self.vocoder = vocoder if vocoder is not None and vocoder.mode == "neural" else None
        self.frozen = dict(frozen or {})
        if codec is not None:
            self.frozen.setdefault("codec", codec.net_)
        for name, module in self.frozen.items():
            if any(p.requires_grad for p in module.parameters()):
                raise ValueError(f"module {name!r} must be frozen before LM training")
        self.checksums = {name: parameter_checksum(m) for name, m in self.frozen.items()}

        self.optimizer = torch.optim.AdamW(net.parameters(), lr=lr_at(0, cfg),
                                           betas=(cfg.adam_beta1, cfg.adam_beta2),
                                           weight_decay=cfg.weight_decay)
        if self.vocoder is not None:
            self.g_opt = torch.optim.Adam(self.vocoder.net_.parameters(), lr=1e-4, betas=(0.8, 0.99))
            self.d_opt = torch.optim.Adam(self.vocoder.disc_.parameters(), lr=1e-4, betas=(0.8, 0.99))
        self.updates = 0
        self.micro = 0
        self._window = []
        self.history = []
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.write_text(LOG_HEADER + "\n")
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._last_good = copy.deepcopy(net.state_dict())

    def audit_frozen(self) -> dict:
        """name -> True if the module's checksum is unchanged since construction."""
        return {name: parameter_checksum(m) == self.checksums[name] for name, m in self.frozen.items()}

    def _example_losses(self, ex: LmExample):
        inputs, targets = teacher_forcing_pair(ex.tokens, self.cfg.max_seq)
        dtype = next(self.net.parameters()).dtype
        logits = self.net(torch.tensor([inputs]), ex.x_te[None].to(dtype), ex.x_se[None].to(dtype))[0]
        l_ce = loss_ce(logits, torch.tensor(targets))

        n = len(targets) - 1
        zero = logits.new_zeros(())
        l_mel, l_gan, fake, mel_pred = zero, zero, None, None
        if self.codec is not None and ex.mel is not None and n > 0:
            probs = F.softmax(logits[:n, :CODEBOOK_SIZE], dim=-1)
            mel_pred = self.codec.decode_soft(probs.float())
            l_mel = loss_mel(mel_pred, torch.as_tensor(ex.mel[:n]))
        if self.vocoder is not None and mel_pred is not None and ex.wave is not None:
            spk = ex.x_se.mean(0, keepdim=True).float()
            fake = self.vocoder.net_(mel_pred.detach()[None], spk)
            disc = self.vocoder.disc_
            disc.requires_grad_(False)
            d_gen = disc(fake)
            disc.requires_grad_(True)
            real = torch.as_tensor(np.asarray(ex.wave[:n * HOP], dtype=np.float32))[None]
            l_gan = loss_gan_generator(d_gen, fake, real)
            fake = (fake.detach(), real)
        return l_ce, l_mel, l_gan, fake

    def train_step(self, batch) -> LossBreakdown:
        """One micro-batch: forward, scaled backward, and an optimizer update every ``grad_accum`` calls."""
        self.net.train()
        scale = 1.0 / (self.cfg.grad_accum * len(batch))
        parts = []
        for ex in batch:
            l_ce, l_mel, l_gan, fake = self._example_losses(ex)
            total = loss_total(l_ce, l_mel, l_gan, self.cfg)
            if not torch.isfinite(total):
                self._diverged(f"non-finite loss (ce={l_ce.item()}, mel={l_mel.item()}, gan={l_gan.item()})")
            (total * scale).backward()
            if fake is not None:
                d_loss = discriminator_loss(self.vocoder.disc_(fake[1]), self.vocoder.disc_(fake[0]))
                (d_loss * scale).backward()
            parts.append((l_ce.item(), l_mel.item(), l_gan.item()))

        l_ce, l_mel, l_gan = (float(np.mean(col)) for col in zip(*parts))
        self._window.append((l_ce, l_mel, l_gan))
        self.micro += 1
        # lr of the update this micro-batch contributes to (1-based)
        lr = lr_at(min(self.updates + 1, self.cfg.total_steps), self.cfg)
        if self.micro % self.cfg.grad_accum == 0:
            self._update(lr)
        return LossBreakdown(l_ce, l_mel, l_gan, loss_total(l_ce, l_mel, l_gan, self.cfg), self.updates, lr)

    def _update(self, lr):
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        if self.vocoder is not None:
            for opt in (self.g_opt, self.d_opt):
                opt.step()
                opt.zero_grad(set_to_none=True)
        self.updates += 1

        l_ce, l_mel, l_gan = (float(np.mean(col)) for col in zip(*self._window))
        self._window = []
        record = LossBreakdown(l_ce, l_mel, l_gan, loss_total(l_ce, l_mel, l_gan, self.cfg), self.updates, lr)
        self.history.append(record)
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(record.csv_row() + "\n")
        self._last_good = copy.deepcopy(self.net.state_dict())
        if self.checkpoint_dir and self.cfg.checkpoint_every and self.updates % self.cfg.checkpoint_every == 0:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_tensors(self.checkpoint_dir / f"lm_step{self.updates}.bin", self.net.state_dict())
        if self.updates % 50 == 0:
            log.info("update %d  ce %.4f  mel %.4f  gan %.4f  lr %.2e", self.updates, l_ce, l_mel, l_gan, lr)

    def _diverged(self, reason):
        self.net.load_state_dict(self._last_good)
        self.optimizer.zero_grad(set_to_none=True)
        path = None
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            path = self.checkpoint_dir / "lm_last_good.bin"
            save_tensors(path, self._last_good)
        raise TrainingDivergedError(f"{reason} at update {self.updates}; weights restored to last good state",
                                    step=self.updates, checkpoint=path)

    def fit(self, examples, n_updates=None):
        """Run ``n_updates`` optimizer updates (default: ``cfg.total_steps``) over shuffled examples."""
        n_updates = self.cfg.total_steps if n_updates is None else n_updates
        rng = np.random.default_rng(self.cfg.seed)
        order = []
        target = self.updates + n_updates
        while self.updates < target:
            size = min(self.cfg.batch, len(examples))
            while len(order) < size:
                order.extend(rng.permutation(len(examples)).tolist())
            batch, order = [examples[i] for i in order[:size]], order[size:]
            self.train_step(batch)
        return self.history

