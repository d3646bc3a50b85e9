"""Byte-level BPE tokenizer and the frozen text encoder that produces text latents."""
from __future__ import annotations

import math
import re
from collections import Counter
from pathlib import Path

import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .exceptions import CheckpointError, DataError, OverLengthError
from .validation import check_token_ids, freeze

MAX_TEXT_TOKENS = 1024
TEXT_ENCODER_SEED = 0xE27
_CHUNK_RE = re.compile(rb" ?\S+|\s+")


def _chunks(text: str):
    return _CHUNK_RE.findall(text.encode("utf-8"))


def _count_pairs(words: dict) -> Counter:
    pairs = Counter()
    for word, freq in words.items():
        for a, b in zip(word, word[1:]):
            pairs[a, b] += freq
    return pairs


def _merge_word(word: tuple, a: int, b: int, new_id: int) -> tuple:
    out = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


class BpeTokenizer(BaseEstimator, TransformerMixin):
    """Greedy byte-pair encoder over a 256-symbol byte alphabet.

    Each training round merges the most frequent adjacent pair; ties go to the
    lexicographically smaller pair of byte strings, so training is reproducible.

    Parameters
    ----------
    vocab_size : int
        Target vocabulary size (256 byte symbols plus learned merges).
    max_tokens : int
        Hard cap on encoded length; longer inputs raise ``OverLengthError``.
    """

    def __init__(self, vocab_size=512, max_tokens=MAX_TEXT_TOKENS):
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens

    def fit(self, X, y=None):
        corpus = list(X)
        if self.vocab_size < 256:
            raise ValueError(f"vocab_size must be >= 256, got {self.vocab_size}")
        if not corpus or not any(corpus):
            raise DataError("cannot train BPE on an empty corpus")

        words = Counter()
        for text in corpus:
            for chunk in _chunks(text):
                words[tuple(chunk)] += 1

        symbols = [bytes([i]) for i in range(256)]
        merges = []
        while len(symbols) < self.vocab_size:
            pairs = _count_pairs(words)
            if not pairs:
                break
            (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], symbols[kv[0][0]], symbols[kv[0][1]]))
            new_id = len(symbols)
            merges.append((a, b))
            symbols.append(symbols[a] + symbols[b])
            words = Counter({_merge_word(w, a, b, new_id): f for w, f in words.items()})

        self._set_merges(merges)
        return self

    def _set_merges(self, merges):
        self.merges_ = list(merges)
        self.symbols_ = [bytes([i]) for i in range(256)]
        for a, b in self.merges_:
            self.symbols_.append(self.symbols_[a] + self.symbols_[b])
        self.ranks_ = {pair: 256 + r for r, pair in enumerate(self.merges_)}
        self.n_vocab_ = len(self.symbols_)
        self._cache = {}

    def _encode_chunk(self, chunk: bytes) -> list:
        if chunk in self._cache:
            return self._cache[chunk]
        word = tuple(chunk)
        while len(word) > 1:
            ranked = [(self.ranks_.get(p), p) for p in zip(word, word[1:]) if p in self.ranks_]
            if not ranked:
                break
            new_id, (a, b) = min(ranked)
            word = _merge_word(word, a, b, new_id)
        self._cache[chunk] = list(word)
        return self._cache[chunk]

    def encode(self, text: str) -> list:
        check_is_fitted(self, "merges_")
        ids = [i for chunk in _chunks(text) for i in self._encode_chunk(chunk)]
        if len(ids) > self.max_tokens:
            raise OverLengthError(f"text encodes to {len(ids)} tokens; the cap is {self.max_tokens}")
        return ids

    def decode(self, ids) -> str:
        check_is_fitted(self, "merges_")
        arr = check_token_ids(ids, self.n_vocab_, "BPE ids")
        return b"".join(self.symbols_[i] for i in arr).decode("utf-8", errors="replace")

    def transform(self, X):
        return [self.encode(t) for t in X]

    def inverse_transform(self, X):
        return [self.decode(ids) for ids in X]

    def save(self, path) -> None:
        check_is_fitted(self, "merges_")
        lines = [f"#bpe-merges v1 vocab_size={self.n_vocab_} max_tokens={self.max_tokens}"]
        lines += [f"{a} {b}" for a, b in self.merges_]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BpeTokenizer":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"BPE model not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("#bpe-merges v1"):
            raise CheckpointError(f"{path}: missing '#bpe-merges v1' header")
        header = dict(field.split("=", 1) for field in lines[0].split()[2:])
        try:
            merges = [tuple(int(v) for v in line.split()) for line in lines[1:] if line.strip()]
        except ValueError as exc:
            raise CheckpointError(f"{path}: malformed merge line") from exc
        for r, (a, b) in enumerate(merges):
            if max(a, b) >= 256 + r:
                raise CheckpointError(f"{path}: merge {r} references an id not yet defined")
        tok = cls(vocab_size=int(header["vocab_size"]), max_tokens=int(header.get("max_tokens", MAX_TEXT_TOKENS)))
        tok._set_merges(merges)
        if tok.n_vocab_ != tok.vocab_size:
            raise CheckpointError(f"{path}: header says {tok.vocab_size} symbols, file defines {tok.n_vocab_}")
        return tok


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


class _TextEncoderNet(nn.Module):
    def __init__(self, vocab_size, d_model, n_heads, n_layers):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_model)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d_model, n_heads, dim_feedforward=2 * d_model, dropout=0.0,
                                       activation="gelu", batch_first=True)
            for _ in range(n_layers)
        )
        self.register_buffer("positions", sinusoidal_positions(MAX_TEXT_TOKENS, d_model), persistent=False)

    def forward(self, ids):
        h = self.embed(ids) * math.sqrt(self.embed.embedding_dim) + self.positions[: ids.shape[-1]]
        for layer in self.layers:
            h = layer(h)
        return h


class TextEncoder(BaseEstimator, TransformerMixin):
    """Frozen bidirectional encoder mapping BPE ids to a [n_tokens, d_model] matrix.

    Weights come from a fixed seed and never receive gradients. ``fit`` only
    builds the network; there is nothing to learn.
    """

    def __init__(self, vocab_size=512, d_model=512, n_heads=4, n_layers=2, seed=TEXT_ENCODER_SEED):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.seed = seed

    def fit(self, X=None, y=None):
        heads = self.n_heads if self.d_model % self.n_heads == 0 else 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = _TextEncoderNet(self.vocab_size, self.d_model, heads, self.n_layers)
        self.module_ = freeze(net)
        return self

    def encode_text(self, ids) -> torch.Tensor:
        check_is_fitted(self, "module_")
        arr = check_token_ids(ids, self.vocab_size, "text ids")
        if arr.size == 0:
            raise DataError("encode_text needs at least one token")
        if arr.size > MAX_TEXT_TOKENS:
            raise OverLengthError(f"{arr.size} text tokens exceeds the cap of {MAX_TEXT_TOKENS}")
        with torch.no_grad():
            return self.module_(torch.as_tensor(arr)[None])[0].clone()

    def transform(self, X):
        return [self.encode_text(ids).numpy() for ids in X]
