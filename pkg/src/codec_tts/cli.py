"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/checkpoint error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .audio_io import HOP, load_wav, mel_spectrogram, save_wav
from .codec import NeuralCodec
from .exceptions import CheckpointError, DataError, TrainingDivergedError
from .lm import PRESETS, CodecLanguageModel
from .losses import TrainConfig
from .pipeline import (ModelBundle, bench_rtf, build_examples, corpus_stats, format_table, length_probe,
                       read_manifest, stats_rows, synthesize, write_csv)
from .serialization import read_config, read_tokens, write_tokens
from .speaker import SpeakerEncoder
from .text import BpeTokenizer
from .validation import set_deterministic
from .vocoder import Vocoder

log = logging.getLogger("codec_tts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

TINY = {"hidden_dim": 128, "n_heads": 2, "n_blocks": 2}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


SECTIONS = ("codec", "lm", "train", "vocoder", "bpe")


class UsageError(Exception):
    pass


def _section(cfg: dict, prefix: str, allowed=None) -> dict:
    out = {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}
    unknown = sorted(set(out) - set(allowed)) if allowed is not None else []
    if unknown:
        raise UsageError(f"unknown config keys for {prefix}: {', '.join(prefix + '.' + k for k in unknown)}")
    return out


def _estimator_params(cfg: dict, prefix: str, cls) -> dict:
    return _section(cfg, prefix, cls().get_params())


def _train_config(args, updates: int) -> TrainConfig:
    values = {"seed": args.seed, "total_steps": updates, "warmup_steps": max(updates // 10, 0)}
    values.update(_section(args.cfg, "train", TrainConfig().to_dict()))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def cmd_train_codec(args):
    records = read_manifest(args.manifest)
    clips = [load_wav(r.path) for r in records]
    params = {"seed": args.seed, **_estimator_params(args.cfg, "codec", NeuralCodec)}
    if args.steps is not None:
        params["n_steps"] = args.steps
    codec = NeuralCodec(**params).fit(clips)
    args.model_dir.mkdir(parents=True, exist_ok=True)
    codec.save(args.model_dir / "codec.bin")
    h = codec.loss_history_
    print(f"codec trained: {len(h)} steps, recon {h[0]:.4f} -> {h[-1]:.4f}" if h else "codec initialised")
    return EXIT_OK


def cmd_train_vocoder(args):
    records = read_manifest(args.manifest)
    speaker = SpeakerEncoder().fit()
    triples = []
    for r in records:
        w = load_wav(r.path)
        n = len(w) // HOP
        if n == 0:
            raise DataError(f"{r.path} is shorter than one frame")
        triples.append((mel_spectrogram(w).frames[:n], w.samples[:n * HOP], speaker.speaker_latents(w)))
    params = {"seed": args.seed, **_estimator_params(args.cfg, "vocoder", Vocoder), "mode": "neural"}
    if args.steps is not None:
        params["n_steps"] = args.steps
    voc = Vocoder(**params).fit(triples)
    args.model_dir.mkdir(parents=True, exist_ok=True)
    voc.save(args.model_dir / "vocoder.bin")
    first, last = voc.history_[0], voc.history_[-1]
    print(f"vocoder trained: {len(voc.history_)} steps, L1 {first['l1']:.4f} -> {last['l1']:.4f}")
    return EXIT_OK


def cmd_train_lm(args):
    cfg = _train_config(args, args.updates)
    records = read_manifest(args.manifest)
    d = args.model_dir
    codec = NeuralCodec.load(d / "codec.bin")
    if (d / "bpe.txt").is_file():
        bpe = BpeTokenizer.load(d / "bpe.txt")
    else:
        bpe = BpeTokenizer(**_estimator_params(args.cfg, "bpe", BpeTokenizer)).fit(r.transcript for r in records)
    arch = dict(TINY) if args.preset == "tiny" else dict(zip(("hidden_dim", "n_heads", "n_blocks"), PRESETS[args.preset]))
    arch.update(_estimator_params(args.cfg, "lm", CodecLanguageModel))
    lm = CodecLanguageModel(seed=args.seed, **arch).initialize()
    vocoder = Vocoder.load(d / "vocoder.bin") if (d / "vocoder.cfg").is_file() else None
    bundle = ModelBundle(bpe, codec, lm, vocoder)

    examples = build_examples(records, bundle, crop=not args.no_crop, seed=args.seed, max_seq=cfg.max_seq)
    frozen = {"text_encoder": bundle.text_encoder.module_, "speaker_encoder": bundle.speaker_encoder.module_}
    lm.fit(examples, train_config=cfg, n_updates=args.updates, codec=codec, vocoder=bundle.vocoder,
           frozen=frozen, log_path=args.log, checkpoint_dir=d / "checkpoints")
    audit = lm.trainer_.audit_frozen()
    if not all(audit.values()):
        raise CheckpointError(f"frozen modules changed during training: {audit}")
    bundle.save(d)
    last = lm.history_[-1] if lm.history_ else None
    if last:
        print(f"lm trained: {last.step} updates, l_ce {lm.history_[0].l_ce:.4f} -> {last.l_ce:.4f}")
    return EXIT_OK


def _sampling(args):
    return dict(sampling="greedy" if args.sampling == "greedy" else "topk", k=args.k, temperature=args.temperature)


def cmd_synthesize(args):
    if not args.text.strip():
        raise DataError("--text is empty")
    bundle = ModelBundle.load(args.model_dir)
    ref = load_wav(args.ref)
    report, _ = synthesize(args.text, ref, bundle, seed=args.seed, out_path=args.out, **_sampling(args))
    for key, value in asdict(report).items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_encode(args):
    codec = NeuralCodec.load(args.model_dir / "codec.bin")
    codes = codec.encode_audio(load_wav(args.wav))
    if args.all_codebooks:
        Path(args.out).write_text("".join(" ".join(map(str, row)) + "\n" for row in codes))
    else:
        write_tokens(args.out, codes[:, 0])
    print(f"{codes.shape[0]} frames x {codes.shape[1]} codebooks -> {args.out}")
    return EXIT_OK


def cmd_decode(args):
    bundle = ModelBundle.load(args.model_dir)
    tokens = read_tokens(args.tokens)
    mel = bundle.codec.decode_tokens(tokens)
    x_se = bundle.speaker_encoder.speaker_latents(load_wav(args.ref)) if args.ref else None
    if x_se is None and bundle.vocoder.mode == "neural":
        raise DataError("the neural vocoder needs --ref for speaker conditioning")
    save_wav(args.out, bundle.vocoder.vocode(mel, x_se))
    print(f"{len(tokens)} tokens -> {args.out}")
    return EXIT_OK


def _emit(rows, columns, csv_path):
    print(format_table(rows, columns))
    if csv_path:
        write_csv(csv_path, rows, columns)


def cmd_corpus_stats(args):
    stats = corpus_stats(read_manifest(args.manifest, check_files=False))
    _emit(stats_rows(stats), ["statistic", "value"], args.csv)
    return EXIT_OK


def cmd_bench_rtf(args):
    bundle = ModelBundle.load(args.model_dir)
    ref = load_wav(args.ref)
    reports = bench_rtf(bundle, args.text * args.repeat, ref, sampling=args.sampling, seed=args.seed)
    rows = [asdict(r) for r in reports]
    _emit(rows, ["text", "token_count", "audio_seconds", "synth_seconds", "rtf"], args.csv)
    total_synth = sum(r.synth_seconds for r in reports)
    total_audio = sum(r.audio_seconds for r in reports)
    print(f"overall rtf: {total_synth / total_audio:.6g}")
    return EXIT_OK


def cmd_length_probe(args):
    bundle = ModelBundle.load(args.model_dir)
    records = read_manifest(args.manifest)
    examples = build_examples(records, bundle, crop=False, seed=args.seed)
    trained = {r["bucket"]: r for r in length_probe(bundle.lm, examples)}
    baseline = CodecLanguageModel(**bundle.lm.get_params()).initialize()
    base = {r["bucket"]: r for r in length_probe(baseline, examples)}
    rows = [{"bucket": b, "count": r["count"], "nll": r["nll"], "nll_random_init": base[b]["nll"]}
            for b, r in trained.items()]
    _emit(rows, ["bucket", "count", "nll", "nll_random_init"], args.csv)
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import gradient_suite

    results = gradient_suite(epsilon=args.epsilon, max_coords=args.max_coords, seed=args.seed)
    rows = [{"operation": k, "max_rel_err": v, "pass": v < 1e-4} for k, v in results.items()]
    _emit(rows, ["operation", "max_rel_err", "pass"], args.csv)
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codec-tts", description="Neural-codec text-to-speech toolkit")
    p.add_argument("--config", type=Path, help="key=value config file (sections: codec., lm., train., vocoder., bpe.)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    p.add_argument("--model-dir", type=Path, default=Path("models"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-codec", help="train the audio codec")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train-lm", help="train the codec language model")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--updates", type=int, default=300)
    s.add_argument("--preset", choices=["tiny", *PRESETS], default="tiny")
    s.add_argument("--log", type=Path, help="CSV loss log (step,l_ce,l_mel,l_gan,l_total,lr)")
    s.add_argument("--no-crop", action="store_true", help="disable the 2-6 s random crop")
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("train-vocoder", help="train the neural vocoder")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_vocoder)

    s = sub.add_parser("synthesize", help="text + reference voice -> wav")
    s.add_argument("--text", required=True)
    s.add_argument("--ref", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--sampling", choices=["greedy", "topk"], default="topk")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--temperature", type=float, default=0.9)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("encode", help="wav -> codec token file")
    s.add_argument("--wav", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--all-codebooks", action="store_true", help="write all 4 codes per line")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="codec token file -> wav")
    s.add_argument("--tokens", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--ref", type=Path, help="reference voice (needed by the neural vocoder)")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("corpus-stats", help="descriptive statistics of a manifest")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--csv", type=Path)
    s.set_defaults(func=cmd_corpus_stats)

    s = sub.add_parser("bench-rtf", help="real-time factor of the synthesis pipeline")
    s.add_argument("--text", action="append", required=True)
    s.add_argument("--ref", type=Path, required=True)
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--sampling", choices=["greedy", "topk"], default="greedy")
    s.add_argument("--csv", type=Path)
    s.set_defaults(func=cmd_bench_rtf)

    s = sub.add_parser("length-probe", help="teacher-forced NLL by text-length bucket")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--csv", type=Path)
    s.set_defaults(func=cmd_length_probe)

    s = sub.add_parser("grad-check", help="finite-difference gradient suite")
    s.add_argument("--epsilon", type=float, default=1e-4)
    s.add_argument("--max-coords", type=int)
    s.add_argument("--csv", type=Path)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.cfg = read_config(args.config) if args.config else {}
        bad = sorted(k for k in args.cfg if k.split(".", 1)[0] not in SECTIONS or "." not in k)
        if bad:
            raise UsageError(f"config keys must start with one of {', '.join(s + '.' for s in SECTIONS)}: {bad}")
    except (CheckpointError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.deterministic:
        set_deterministic(args.seed)
    else:
        torch.manual_seed(args.seed)
    np.random.seed(args.seed % 2**32)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDivergedError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
