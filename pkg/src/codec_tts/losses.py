"""Loss terms, the temporal discriminator, the composite objective and the LR schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import PAD
from .exceptions import DataError

DISC_EPS = 1e-7


@dataclass
class TrainConfig:
    alpha: float = 1.2
    beta: float = 0.7
    gamma: float = 0.6
    peak_lr: float = 5e-4
    warmup_steps: int = 32000
    total_steps: int = 800000
    grad_accum: int = 24
    batch: int = 4
    max_seq: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 1 <= self.max_seq <= 604:
            raise ValueError(f"max_seq must be in [1, 604], got {self.max_seq}")
        if self.grad_accum < 1 or self.batch < 1:
            raise ValueError("grad_accum and batch must be >= 1")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_ce: float
    l_mel: float
    l_gan: float
    l_total: float
    step: int
    lr: float = 0.0

    def csv_row(self) -> str:
        return f"{self.step},{self.l_ce:.8g},{self.l_mel:.8g},{self.l_gan:.8g},{self.l_total:.8g},{self.lr:.8g}"


LOG_HEADER = "step,l_ce,l_mel,l_gan,l_total,lr"


def _tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def loss_ce(logits, targets, pad_id=PAD):
    """Mean next-token negative log-likelihood (nats) over non-PAD targets."""
    logits = _tensor(logits)
    targets = torch.as_tensor(np.asarray(targets) if not torch.is_tensor(targets) else targets).long()
    if logits.shape[:-1] != targets.shape:
        raise DataError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    mask = targets != pad_id
    if not bool(mask.any()):
        raise DataError("every target position is PAD")
    return F.cross_entropy(logits[mask], targets[mask])


def loss_mel(pred, target):
    """Mean absolute error between two mel matrices."""
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise DataError(f"mel shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def loss_gan_generator(d_out, pred_wav, ref_wav):
    """-log D(pred) plus mean absolute waveform error (truncated to the shorter signal)."""
    d_out, pred_wav, ref_wav = _tensor(d_out), _tensor(pred_wav), _tensor(ref_wav)
    if bool((d_out <= 0).any()):
        raise DataError(f"discriminator output must be in (0, 1], got {d_out}")
    n = min(pred_wav.shape[-1], ref_wav.shape[-1])
    l1 = (pred_wav[..., :n] - ref_wav[..., :n].to(pred_wav.dtype)).abs().mean()
    return -torch.log(d_out).mean() + l1


def discriminator_loss(d_real, d_fake):
    """Non-saturating discriminator objective -log d_real - log(1 - d_fake)."""
    d_real = _tensor(d_real).clamp(DISC_EPS, 1 - DISC_EPS)
    d_fake = _tensor(d_fake).clamp(DISC_EPS, 1 - DISC_EPS)
    return (-torch.log(d_real) - torch.log1p(-d_fake)).mean()


def loss_total(l_ce, l_mel, l_gan, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    return cfg.alpha * l_ce + cfg.beta * l_mel + cfg.gamma * l_gan


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


class TemporalDiscriminator(nn.Module):
    """Strided 1-D conv stack -> global average -> sigmoid."""

    def __init__(self, channels=(16, 32, 64), kernel=15, stride=4, slope=0.2):
        super().__init__()
        self.slope = slope
        convs = []
        c_in = 1
        for c_out in channels:
            convs.append(nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=kernel // 2))
            c_in = c_out
        convs.append(nn.Conv1d(c_in, 1, 3, padding=1))
        self.convs = nn.ModuleList(convs)
        for conv in self.convs:
            nn.init.zeros_(conv.bias)

    def forward(self, wav):
        """[B, N] -> [B] probabilities."""
        h = wav[:, None, :]
        for conv in self.convs[:-1]:
            h = F.leaky_relu(conv(h), self.slope)
        return torch.sigmoid(self.convs[-1](h).mean(dim=(1, 2)))


def discriminator_forward(disc: TemporalDiscriminator, wav) -> float:
    samples = wav.samples if hasattr(wav, "samples") else np.asarray(wav)
    if len(samples) == 0:
        raise DataError("discriminator needs a non-empty waveform")
    dtype = next(disc.parameters()).dtype
    with torch.no_grad():
        return float(disc(torch.as_tensor(samples, dtype=dtype)[None])[0])
