"""Autoregressive codec-token language model with text and speaker cross-attention.

Block layout (post-norm)::

    x1  = LN(x  + MaskedSelfAttn(x))
    x2  = LN(x1 + CrossAttn(x1, text))
    x3  = x2 + CrossAttn(x2, speaker)
    out = LN(x3 + FFN_gelu(x3))
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .codec import EOS, PAD, SOS, VOCAB_SIZE
from .exceptions import DataError, OverLengthError
from .serialization import load_module_state, load_tensors, read_config, save_tensors, write_config

MAX_AUDIO_TOKENS = 604
MAX_TEXT_TOKENS = 1024
D_SPK = 256


@dataclass
class LmConfig:
    hidden_dim: int = 512
    n_heads: int = 4
    n_blocks: int = 6
    ffn_dim: int | None = None
    vocab: int = VOCAB_SIZE
    max_audio_tokens: int = MAX_AUDIO_TOKENS
    max_text_tokens: int = MAX_TEXT_TOKENS
    d_spk: int = D_SPK
    d_text: int | None = None

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.d_text is None:
            self.d_text = self.hidden_dim
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "LmConfig":
        dims = PRESETS[name.upper()]
        return cls(hidden_dim=dims[0], n_heads=dims[1], n_blocks=dims[2], **overrides)


PRESETS = {
    "S": (512, 4, 6),
    "M": (768, 8, 13),
    "L": (1024, 16, 26),
}


def count_parameters(cfg: LmConfig) -> int:
    """Closed-form trainable parameter count of :class:`CodecLM` for ``cfg``."""
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab

    def attention(d_kv):
        return 2 * (d * d + d) + 2 * (d_kv * d + d)

    block = attention(d) + attention(cfg.d_text) + attention(cfg.d_spk) + 3 * 2 * d + (d * f + f) + (f * d + d)
    return v * d + cfg.max_audio_tokens * d + cfg.n_blocks * block + d * v + v


class KvCache:
    """Per-session attention state for incremental decoding.

    Self-attention keys/values grow by one position per step; cross-attention
    keys/values over the (static) text and speaker conditioning are filled once.
    """

    def __init__(self, n_blocks: int):
        self.self_kv = [None] * n_blocks
        self.cross_kv = [dict() for _ in range(n_blocks)]
        self.length = 0


class Attention(nn.Module):
    def __init__(self, d_model, n_heads, d_kv=None):
        super().__init__()
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def project_kv(self, source):
        return self._split(self.k(source)), self._split(self.v(source))

    def forward(self, x, kv, causal_offset=None):
        """``causal_offset`` is the absolute position of ``x[:, 0]``; None disables masking."""
        q = self._split(self.q(x))
        k, v = kv
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal_offset is not None:
            tq, tk = q.shape[2], k.shape[2]
            rows = torch.arange(tq)[:, None] + causal_offset
            future = torch.arange(tk)[None, :] > rows
            scores = scores.masked_fill(future, float("-inf"))
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out(ctx)


class CodecLmBlock(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.self_attn = Attention(d, cfg.n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.text_attn = Attention(d, cfg.n_heads, cfg.d_text)
        self.norm2 = nn.LayerNorm(d)
        self.spk_attn = Attention(d, cfg.n_heads, cfg.d_spk)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d))
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, x_te, x_se, cache=None, index=0):
        offset = 0 if cache is None else cache.length
        k, v = self.self_attn.project_kv(x)
        if cache is not None:
            if cache.self_kv[index] is not None:
                pk, pv = cache.self_kv[index]
                k, v = torch.cat([pk, k], 2), torch.cat([pv, v], 2)
            cache.self_kv[index] = (k, v)
        x = self.norm1(x + self.self_attn(x, (k, v), causal_offset=offset))

        x = self.norm2(x + self.text_attn(x, self._cross(cache, index, "text", self.text_attn, x_te)))
        x = x + self.spk_attn(x, self._cross(cache, index, "spk", self.spk_attn, x_se))
        return self.norm3(x + self.ffn(x))

    @staticmethod
    def _cross(cache, index, key, attn, source):
        if cache is None:
            return attn.project_kv(source)
        store = cache.cross_kv[index]
        if key not in store:
            store[key] = attn.project_kv(source)
        return store[key]


class CodecLM(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.tok_emb = nn.Embedding(cfg.vocab, d)
        self.pos_emb = nn.Embedding(cfg.max_audio_tokens, d)
        self.blocks = nn.ModuleList(CodecLmBlock(cfg) for _ in range(cfg.n_blocks))
        self.head = nn.Linear(d, cfg.vocab)
        self.reset_parameters()

    def reset_parameters(self):
        resid_std = 0.02 / math.sqrt(2 * self.cfg.n_blocks)
        for name, p in self.named_parameters():
            if "norm" in name:
                continue
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif name.endswith("out.weight") or name.endswith("ffn.2.weight"):
                nn.init.normal_(p, std=resid_std)
            else:
                nn.init.normal_(p, std=0.02)

    def forward(self, tokens, x_te, x_se, cache=None):
        """tokens [B, T], x_te [B, Lt, d_text], x_se [B, Ls, d_spk] -> logits [B, T, vocab]."""
        offset = 0 if cache is None else cache.length
        t = tokens.shape[1]
        if offset + t > self.cfg.max_audio_tokens:
            raise OverLengthError(f"{offset + t} audio positions exceeds the cap of {self.cfg.max_audio_tokens}")
        if x_te.shape[1] > self.cfg.max_text_tokens:
            raise OverLengthError(f"{x_te.shape[1]} text positions exceeds the cap of {self.cfg.max_text_tokens}")
        if x_te.shape[-1] != self.cfg.d_text or x_se.shape[-1] != self.cfg.d_spk:
            raise DataError(
                f"conditioning widths ({x_te.shape[-1]}, {x_se.shape[-1]}) != ({self.cfg.d_text}, {self.cfg.d_spk})")
        pos = torch.arange(offset, offset + t)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        for i, block in enumerate(self.blocks):
            x = block(x, x_te, x_se, cache, i)
        if cache is not None:
            cache.length += t
        return self.head(x)


def _as_batch(x, dtype):
    x = torch.as_tensor(x)
    return (x[None] if x.dim() == 2 else x).to(dtype)


def sample_next(logits, sampling="greedy", k=50, temperature=0.9, generator=None) -> int:
    logits = logits.clone()
    logits[SOS] = float("-inf")
    logits[PAD] = float("-inf")
    if sampling == "greedy":
        return int(logits.argmax())
    if sampling != "topk":
        raise ValueError(f"unknown sampling strategy {sampling!r}")
    top, idx = torch.topk(logits / temperature, k)
    probs = F.softmax(top, dim=-1)
    return int(idx[torch.multinomial(probs, 1, generator=generator)])


class CodecLanguageModel(BaseEstimator):
    """Estimator wrapper around :class:`CodecLM`.

    ``fit`` runs teacher-forced training (see :mod:`codec_tts.training`);
    ``generate`` decodes autoregressively from SOS with a KV cache.
    """

    def __init__(self, hidden_dim=128, n_heads=2, n_blocks=2, ffn_dim=None, d_spk=D_SPK, seed=0):
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.ffn_dim = ffn_dim
        self.d_spk = d_spk
        self.seed = seed

    @property
    def config(self) -> LmConfig:
        return LmConfig(hidden_dim=self.hidden_dim, n_heads=self.n_heads, n_blocks=self.n_blocks,
                        ffn_dim=self.ffn_dim, d_spk=self.d_spk)

    def initialize(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = CodecLM(self.config)
        return self

    def fit(self, X, y=None, train_config=None, n_updates=None, **trainer_kwargs):
        from .training import LmTrainer, TrainConfig

        if not hasattr(self, "net_"):
            self.initialize()
        trainer = LmTrainer(self.net_, train_config or TrainConfig(), **trainer_kwargs)
        self.history_ = trainer.fit(list(X), n_updates=n_updates)
        self.trainer_ = trainer
        return self

    def logits(self, tokens, x_te, x_se) -> torch.Tensor:
        check_is_fitted(self, "net_")
        net = self.net_.eval()
        with torch.no_grad():
            dtype = next(net.parameters()).dtype
            tok = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
            return net(tok, _as_batch(x_te, dtype), _as_batch(x_se, dtype))[0]

    def generate(self, x_te, x_se, sampling="greedy", k=50, temperature=0.9, seed=0,
                 use_cache=True, max_tokens=None, return_logits=False):
        """Decode from SOS until EOS or the 604-token cap.

        Returns audio tokens only (no SOS/EOS); with ``return_logits`` also the
        per-step logits as a [n_steps, vocab] tensor.
        """
        check_is_fitted(self, "net_")
        net = self.net_.eval()
        cap = self.config.max_audio_tokens if max_tokens is None else min(max_tokens, self.config.max_audio_tokens)
        dtype = next(net.parameters()).dtype
        te, se = _as_batch(x_te, dtype), _as_batch(x_se, dtype)
        gen = torch.Generator().manual_seed(int(seed))
        cache = KvCache(len(net.blocks)) if use_cache else None
        seq = [SOS]
        out, step_logits = [], []
        with torch.no_grad():
            while len(out) < cap:
                if use_cache:
                    logits = net(torch.tensor([[seq[-1]]]), te, se, cache)[0, -1]
                else:
                    logits = net(torch.tensor([seq]), te, se)[0, -1]
                step_logits.append(logits)
                token = sample_next(logits, sampling, k, temperature, gen)
                if token == EOS:
                    break
                out.append(token)
                seq.append(token)
        tokens = np.asarray(out, dtype=np.int64)
        if return_logits:
            return tokens, torch.stack(step_logits)
        return tokens

    def n_parameters(self) -> int:
        check_is_fitted(self, "net_")
        return sum(p.numel() for p in self.net_.parameters() if p.requires_grad)

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        path = Path(path)
        save_tensors(path, dict(self.net_.state_dict()))
        params = {k: v for k, v in self.get_params().items() if v is not None}
        write_config(path.with_suffix(".cfg"), {"kind": "lm", **params})

    @classmethod
    def load(cls, path) -> "CodecLanguageModel":
        path = Path(path)
        cfg = read_config(path.with_suffix(".cfg"))
        cfg.pop("kind", None)
        model = cls(**cfg).initialize()
        load_module_state(model.net_, load_tensors(path), path)
        model.net_.eval()
        return model
