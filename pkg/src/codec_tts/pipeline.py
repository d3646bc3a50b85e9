"""End-to-end synthesis, model bundles, corpus statistics, RTF and the length probe."""
from __future__ import annotations

import csv
import logging
import re
import string
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .audio_io import FRAME_RATE, Waveform, load_wav, save_wav
from .codec import NeuralCodec
from .exceptions import CheckpointError, DataError
from .lm import CodecLanguageModel
from .serialization import read_config, write_config
from .speaker import SpeakerEncoder
from .text import BpeTokenizer, TextEncoder
from .training import LmExample, example_nll
from .validation import parameter_checksum
from .vocoder import Vocoder

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
LENGTH_BUCKETS = ((1, 25), (26, 50), (51, 75), (76, 100), (101, None))


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    speaker: str
    duration: float
    transcript: str


def read_manifest(path, check_files=True) -> list:
    """Tab-separated ``path, speaker, duration, transcript`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        audio, speaker, duration, transcript = parts
        try:
            duration = float(duration)
        except ValueError:
            raise DataError(f"{path}:{lineno}: duration {duration!r} is not a number") from None
        if not duration > 0:
            raise DataError(f"{path}:{lineno}: duration must be positive")
        audio = Path(audio)
        if not audio.is_absolute():
            audio = path.parent / audio
        if check_files and not audio.is_file():
            raise DataError(f"{path}:{lineno}: audio file {audio} not found")
        records.append(ManifestRecord(audio, speaker, duration, transcript))
    if not records:
        raise DataError(f"manifest {path} has no records")
    return records


def write_manifest(path, records) -> None:
    lines = [f"{r.path}\t{r.speaker}\t{r.duration}\t{r.transcript}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CorpusStats:
    hours: float
    mean_audio_length: float
    total_words: int
    vocab_size: int
    sentences: int
    mean_word_freq: float
    total_recordings: int


_STRIP = string.punctuation + "“”‘’"


def words_of(text: str) -> list:
    out = []
    for tok in text.lower().split():
        tok = tok.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def count_sentences(text: str) -> int:
    return sum(1 for part in re.split(r"[.!?]+", text) if part.strip())


def corpus_stats(records) -> CorpusStats:
    records = list(records)
    if not records:
        raise DataError("corpus_stats needs at least one record")
    durations = sorted(r.duration for r in records)  # sorted: sum is order-invariant bit for bit
    total = float(sum(durations))
    words = [w for r in records for w in words_of(r.transcript)]
    vocab = len(set(words))
    return CorpusStats(
        hours=total / 3600.0,
        mean_audio_length=total / len(records),
        total_words=len(words),
        vocab_size=vocab,
        sentences=sum(count_sentences(r.transcript) for r in records),
        mean_word_freq=len(words) / vocab if vocab else 0.0,
        total_recordings=len(records),
    )


def compute_rtf(synth_seconds: float, audio_seconds: float) -> float:
    """Synthesis wall-clock divided by produced audio duration; below 1 is faster than real time."""
    if not audio_seconds > 0:
        raise ValueError(f"audio_seconds must be positive, got {audio_seconds}")
    if synth_seconds < 0:
        raise ValueError(f"synth_seconds must be non-negative, got {synth_seconds}")
    return synth_seconds / audio_seconds


@dataclass
class SynthesisReport:
    text: str
    output_path: str | None
    synth_seconds: float
    audio_seconds: float
    rtf: float
    token_count: int


class ModelBundle:
    """Every model the synthesis path needs, stored together in one directory.

    Layout: ``bpe.txt``, ``codec.bin``/``.cfg``, ``lm.bin``/``.cfg``, optional
    ``vocoder.bin``/``.cfg`` and ``bundle.cfg`` holding the format version plus
    checksums of the seed-derived text and speaker encoders.
    """

    def __init__(self, bpe, codec, lm, vocoder=None, text_encoder=None, speaker_encoder=None):
        self.bpe = bpe
        self.codec = codec
        self.lm = lm
        self.vocoder = vocoder if vocoder is not None else Vocoder(mode="deterministic").initialize()
        self.text_encoder = text_encoder or TextEncoder(vocab_size=bpe.n_vocab_, d_model=lm.hidden_dim).fit()
        self.speaker_encoder = speaker_encoder or SpeakerEncoder(d_spk=lm.d_spk).fit()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.bpe.save(d / "bpe.txt")
        self.codec.save(d / "codec.bin")
        self.lm.save(d / "lm.bin")
        self.vocoder.save(d / "vocoder.bin")
        write_config(d / "bundle.cfg", {
            "version": BUNDLE_VERSION,
            "text_encoder_seed": self.text_encoder.seed,
            "text_encoder_checksum": parameter_checksum(self.text_encoder.module_),
            "speaker_seed": self.speaker_encoder.seed,
            "speaker_checksum": parameter_checksum(self.speaker_encoder.module_),
        })

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        d = Path(directory)
        meta = read_config(d / "bundle.cfg")
        if meta.get("version") != BUNDLE_VERSION:
            raise CheckpointError(f"{d}: bundle version {meta.get('version')} != {BUNDLE_VERSION}")
        bpe = BpeTokenizer.load(d / "bpe.txt")
        codec = NeuralCodec.load(d / "codec.bin")
        lm = CodecLanguageModel.load(d / "lm.bin")
        vocoder = Vocoder.load(d / "vocoder.bin") if (d / "vocoder.cfg").is_file() else None
        text_encoder = TextEncoder(vocab_size=bpe.n_vocab_, d_model=lm.hidden_dim,
                                   seed=meta["text_encoder_seed"]).fit()
        speaker_encoder = SpeakerEncoder(d_spk=lm.d_spk, seed=meta["speaker_seed"]).fit()
        if parameter_checksum(text_encoder.module_) != meta["text_encoder_checksum"]:
            raise CheckpointError(f"{d}: text encoder does not match the stored checksum")
        if parameter_checksum(speaker_encoder.module_) != meta["speaker_checksum"]:
            raise CheckpointError(f"{d}: speaker encoder does not match the stored checksum")
        return cls(bpe, codec, lm, vocoder, text_encoder, speaker_encoder)


def synthesize(text: str, reference: Waveform, models: ModelBundle, sampling="topk", k=50,
               temperature=0.9, seed=0, out_path=None):
    """Text + reference voice -> (SynthesisReport, Waveform), timed end to end."""
    if not text or not text.strip():
        raise DataError("cannot synthesize empty text")
    start = time.perf_counter()
    ids = models.bpe.encode(text)
    x_te = models.text_encoder.encode_text(ids)
    x_se = models.speaker_encoder.speaker_latents(reference)
    tokens = models.lm.generate(x_te, x_se, sampling=sampling, k=k, temperature=temperature, seed=seed)
    if tokens.size == 0:
        raise DataError("the language model emitted EOS immediately; no audio produced")
    mel = models.codec.decode_tokens(tokens)
    wav = models.vocoder.vocode(mel, x_se)
    synth_seconds = time.perf_counter() - start
    if out_path is not None:
        save_wav(out_path, wav)
    audio_seconds = tokens.size / FRAME_RATE
    report = SynthesisReport(text, str(out_path) if out_path else None, synth_seconds, audio_seconds,
                             compute_rtf(synth_seconds, audio_seconds), int(tokens.size))
    return report, wav


def bench_rtf(models: ModelBundle, texts, reference, sampling="greedy", seed=0) -> list:
    return [synthesize(t, reference, models, sampling=sampling, seed=seed)[0] for t in texts]


def bucket_of(n_tokens: int):
    for lo, hi in LENGTH_BUCKETS:
        if n_tokens >= lo and (hi is None or n_tokens <= hi):
            return (lo, hi)
    raise ValueError(f"token count {n_tokens} falls in no bucket")


def bucket_label(bucket) -> str:
    lo, hi = bucket
    return f"{lo}+" if hi is None else f"{lo}-{hi}"


def length_probe(lm: CodecLanguageModel, examples, max_seq=500) -> list:
    """Mean teacher-forced NLL per text-length bucket.

    Returns rows ``{"bucket", "count", "nll"}`` for populated buckets only.
    """
    groups = {}
    for ex in examples:
        n = len(ex.text_ids) if ex.text_ids is not None else ex.x_te.shape[0]
        groups.setdefault(bucket_of(n), []).append(example_nll(lm.net_, ex, max_seq))
    rows = []
    for bucket in LENGTH_BUCKETS:
        if bucket not in groups:
            log.info("length probe: bucket %s is empty, skipped", bucket_label(bucket))
            continue
        rows.append({"bucket": bucket_label(bucket), "count": len(groups[bucket]),
                     "nll": float(np.mean(groups[bucket]))})
    return rows


def format_table(rows, columns) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([_fmt(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def stats_rows(stats: CorpusStats) -> list:
    return [{"statistic": k, "value": v} for k, v in asdict(stats).items()]


def build_examples(records, models: ModelBundle, crop=False, seed=0, max_seq=500) -> list:
    """Manifest records -> LM training examples; the reference is another clip of the same speaker when one exists."""
    from .training import prepare_example

    rng = np.random.default_rng(seed)
    by_speaker = {}
    for r in records:
        by_speaker.setdefault(r.speaker, []).append(r)
    examples = []
    for r in records:
        peers = [p for p in by_speaker[r.speaker] if p.path != r.path] or [r]
        ref = peers[int(rng.integers(0, len(peers)))]
        examples.append(prepare_example(r.transcript, load_wav(r.path), load_wav(ref.path), models.bpe,
                                        models.text_encoder, models.codec, models.speaker_encoder,
                                        crop=crop, rng=rng, max_seq=max_seq))
    return examples


def example_from_arrays(tokens, x_te, x_se, text_ids=None) -> LmExample:
    return LmExample(np.asarray(tokens, dtype=np.int64), torch.as_tensor(x_te), torch.as_tensor(x_se),
                     text_ids=text_ids)
