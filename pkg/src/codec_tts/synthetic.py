"""Synthetic source-filter "voices" for tests and toy corpora.

A voice is a glottal pulse train at a fixed fundamental passed through a bank
of formant resonators. Utterance content is a per-syllable envelope and vowel
pattern derived from the transcript, so text and audio are correlated.

Run ``python -m codec_tts.synthetic OUT_DIR`` to write a toy corpus.
"""
from __future__ import annotations

import argparse
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio_io import SAMPLE_RATE, Waveform, save_wav

VOWELS = {
    "a": (730, 1090, 2440),
    "e": (530, 1840, 2480),
    "i": (270, 2290, 3010),
    "o": (570, 840, 2410),
    "u": (300, 870, 2240),
}


@dataclass(frozen=True)
class Voice:
    f0: float
    formant_scale: float = 1.0
    brightness: float = 0.97


SPEAKERS = {
    "spk_a": Voice(110.0, 1.00, 0.97),
    "spk_b": Voice(210.0, 1.18, 0.90),
    "spk_c": Voice(155.0, 0.90, 0.95),
}


def _resonator(x, freq, bandwidth, sr=SAMPLE_RATE):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)


def voiced_segment(voice: Voice, vowel: str, n: int, rng, phase=0.0):
    f0 = voice.f0 * (1 + 0.01 * np.sin(2 * np.pi * 5 * np.arange(n) / SAMPLE_RATE))
    ph = phase + np.cumsum(f0) / SAMPLE_RATE
    pulses = np.diff(np.floor(ph), prepend=np.floor(phase)).astype(np.float64)
    source = lfilter([1.0], [1.0, -voice.brightness], pulses) + 0.003 * rng.standard_normal(n)
    out = np.zeros(n)
    for i, f in enumerate(VOWELS[vowel]):
        out += _resonator(source, f * voice.formant_scale, 80 + 40 * i) / (i + 1)
    return out, ph[-1] if n else phase


def _syllables(text: str):
    letters = [c for c in text.lower() if c.isalpha()]
    vowels = [c for c in letters if c in VOWELS] or ["a"]
    return vowels


def utterance(text: str, voice: Voice, seconds: float | None = None, seed: int | None = None) -> Waveform:
    """Render ``text`` in ``voice``: one syllable per vowel, 0.16 s each unless ``seconds`` is given."""
    if seed is None:
        seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")
    rng = np.random.default_rng(seed)
    syl = _syllables(text)
    total = int((seconds if seconds is not None else 0.16 * len(syl) + 0.1) * SAMPLE_RATE)
    per = max(total // len(syl), 1)
    chunks, phase = [], 0.0
    for v in syl:
        seg, phase = voiced_segment(voice, v, per, rng, phase)
        env = np.sin(np.pi * np.linspace(0, 1, per)) ** 0.5
        chunks.append(seg * env)
    x = np.concatenate(chunks)
    x = np.pad(x, (0, max(total - len(x), 0)))[:total]
    x = 0.5 * x / max(np.max(np.abs(x)), 1e-9)
    return Waveform(x.astype(np.float32))


def speaker_clip(voice: Voice, seconds: float, seed: int) -> Waveform:
    """Random vowel sequence in ``voice``."""
    rng = np.random.default_rng(seed)
    text = "".join(rng.choice(list(VOWELS), size=max(int(seconds / 0.16), 1)))
    return utterance(text, voice, seconds=seconds, seed=seed)


def sine_clip(freq: float, seconds: float, amp=0.5) -> Waveform:
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


TOY_SENTENCES = [
    "selamat pagi",
    "apa kabar",
    "terima kasih banyak",
    "saya suka makan nasi",
    "di mana rumah anda",
    "hari ini cuaca cerah",
    "buku itu ada di meja",
    "kami pergi ke pasar",
]


def write_toy_corpus(out_dir, sentences=TOY_SENTENCES, speakers=("spk_a", "spk_b")) -> Path:
    """Write one WAV per (speaker, sentence) plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in speakers:
        for i, text in enumerate(sentences):
            w = utterance(text, SPEAKERS[s])
            rel = Path("wav") / f"{s}_{i:03d}.wav"
            save_wav(out / rel, w)
            lines.append(f"{rel}\t{s}\t{w.duration:.4f}\t{text}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="write a synthetic toy corpus")
    parser.add_argument("out_dir")
    args = parser.parse_args()
    print(write_toy_corpus(args.out_dir))
