"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at the
end of the pytest output lists all twelve lines.
"""
import contextlib
import csv
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from codec_tts.audio_io import SAMPLE_RATE, Waveform
from codec_tts.cli import main as cli_main
from codec_tts.codec import SOS, rvq_quantize, select_first_codebook
from codec_tts.gradcheck import gradient_suite
from codec_tts.lm import CodecLanguageModel
from codec_tts.losses import LOG_HEADER, TrainConfig, loss_total, lr_at
from codec_tts.pipeline import ManifestRecord, compute_rtf, corpus_stats, length_probe
from codec_tts.training import LmTrainer
from codec_tts.validation import parameter_checksum
from codec_tts.vocoder import Vocoder


@contextlib.contextmanager
def deterministic_mode():
    prev_flag, prev_threads = torch.are_deterministic_algorithms_enabled(), torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_flag)
        torch.set_num_threads(prev_threads)


def test_c01_gradient_suite(acceptance):
    start = time.perf_counter()
    errors = gradient_suite()
    seconds = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and seconds < 120
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + f"; {seconds:.1f}s"
    assert acceptance(1, "gradient suite max rel err < 1e-4 in < 2 min", ok, detail)


def test_c02_causality(acceptance, rng):
    lm = CodecLanguageModel(hidden_dim=128, n_heads=2, n_blocks=2, seed=7).initialize()
    x_te = torch.as_tensor(rng.standard_normal((9, 128)), dtype=torch.float32)
    x_se = torch.as_tensor(rng.standard_normal((40, 256)), dtype=torch.float32)
    seq = [SOS] + rng.integers(0, 1024, 63).tolist()
    mismatches, changed_after = 0, 0
    with deterministic_mode():
        base = lm.logits(seq, x_te, x_se)
        for _ in range(50):
            t = int(rng.integers(1, 64))
            other = list(seq)
            other[t] = (other[t] + int(rng.integers(1, 1024))) % 1024
            got = lm.logits(other, x_te, x_se)
            mismatches += not torch.equal(got[:t], base[:t])
            changed_after += not torch.equal(got[t:], base[t:])
    ok = mismatches == 0 and changed_after == 50
    assert acceptance(2, "causality, 64 tokens x 50 future perturbations", ok,
                      f"{mismatches} prefix mismatches, {changed_after}/50 perturbations visible downstream")


def test_c03_kv_cache(acceptance, overfit):
    worst, equal = 0.0, True
    for ex in overfit.examples:
        a, la = overfit.lm.generate(ex.x_te, ex.x_se, max_tokens=64, return_logits=True)
        b, lb = overfit.lm.generate(ex.x_te, ex.x_se, max_tokens=64, use_cache=False, return_logits=True)
        equal &= len(a) == 64 and np.array_equal(a, b)
        worst = max(worst, float((la - lb).abs().max()))
    ok = equal and worst <= 1e-5
    assert acceptance(3, "KV-cache greedy 64 tokens equals no-cache oracle", ok,
                      f"tokens equal={equal}, max |logit diff| {worst:.2e}")


def test_c04_frame_arithmetic(acceptance, toy_codec, rng):
    bad = []
    for n in rng.integers(294, 5 * SAMPLE_RATE, 100):
        codes = toy_codec.encode_audio(Waveform(0.1 * rng.standard_normal(int(n))))
        if codes.shape != (n // 294, 4):
            bad.append(int(n))
    ten = toy_codec.encode_audio(Waveform(0.1 * rng.standard_normal(10 * SAMPLE_RATE)))
    first = select_first_codebook(ten)
    ok = not bad and ten.shape == (750, 4) and first.shape == (750,)
    assert acceptance(4, "codec frames = floor(N/294); 10 s -> 750x4 -> 750", ok,
                      f"{100 - len(bad)}/100 lengths ok, 10 s -> {ten.shape} -> {first.shape}")


def test_c05_rvq(acceptance, toy_codec, rng):
    books = toy_codec.net_.books.detach().double().numpy()
    assert np.all(books[:, 0] == 0)
    scale = np.sqrt((books[0] ** 2).sum(1).mean())
    increases = 0
    for _ in range(1000):
        latent = rng.standard_normal(books.shape[2]) * scale / np.sqrt(books.shape[2])
        _, norms = rvq_quantize(latent, books)
        chain = [np.sqrt(np.sum(latent ** 2))] + norms
        increases += any(b > a for a, b in zip(chain, chain[1:]))
    nonzero_residual, wrong_id = 0, 0
    for j in rng.integers(1, books.shape[1], 1000):
        ids, norms = rvq_quantize(books[0, j], books)
        nonzero_residual += norms[0] != 0.0
        wrong_id += not np.array_equal(books[0, ids[0]], books[0, j])
    ok = increases == 0 and nonzero_residual == 0 and wrong_id == 0
    assert acceptance(5, "RVQ residual norms non-increasing; exact latents give zero stage-0 residual", ok,
                      f"{increases}/1000 increases, {nonzero_residual}/1000 non-zero exact-match residuals")


def test_c06_overfit(acceptance, overfit):
    ce = [h.l_ce for h in overfit.lm.history_]
    reached = next((i + 1 for i, v in enumerate(ce) if v < 0.1), None)
    reproduced = [np.array_equal(overfit.lm.generate(ex.x_te, ex.x_se), ex.tokens) for ex in overfit.examples]
    ok = reached is not None and len(ce) <= 500 and all(reproduced) and overfit.train_seconds < 600
    assert acceptance(6, "overfit 2 utterances: l_ce < 0.1 within 500 updates, exact greedy reproduction", ok,
                      f"l_ce < 0.1 at update {reached}, final {ce[-1]:.4f}, reproduced {reproduced}, "
                      f"{overfit.train_seconds:.0f}s")


def test_c07_loss_formulas(acceptance, overfit, tmp_path):
    cfg = TrainConfig()
    values = (loss_total(1, 1, 1, cfg), lr_at(32000, cfg), lr_at(16000, cfg), lr_at(cfg.total_steps, cfg))
    formulas = (abs(values[0] - 2.5) < 1e-12 and abs(values[1] - 5e-4) < 1e-15
                and abs(values[2] - 2.5e-4) < 1e-15 and values[3] == 0.0)

    run_cfg = TrainConfig(peak_lr=1e-3, warmup_steps=2, total_steps=20, grad_accum=1, batch=1)
    net = CodecLanguageModel(hidden_dim=128, n_heads=2, n_blocks=1).initialize().net_
    vocoder = Vocoder(channels=8).initialize()
    LmTrainer(net, run_cfg, codec=overfit.bundle.codec, vocoder=vocoder,
              log_path=tmp_path / "log.csv").fit(overfit.examples, 20)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    complete = (lines[0] == LOG_HEADER and [int(r[0]) for r in rows] == list(range(1, 21))
                and all(len(r) == 6 and all(np.isfinite(float(v)) for v in r[1:]) for r in rows)
                and all(float(r[3]) > 0 for r in rows))
    ok = formulas and complete
    assert acceptance(7, "loss_total(1,1,1)=2.5, lr 5e-4/2.5e-4/0, complete loss log", ok,
                      f"total={values[0]}, lr={values[1:]}, log rows={len(rows)} columns={lines[0]}")


def test_c08_rtf(acceptance, bundle_dir, tmp_path):
    exact = compute_rtf(1, 1) == 1.0
    code = cli_main(["--model-dir", str(bundle_dir), "bench-rtf", "--text", "selamat pagi", "--text",
                     "terima kasih banyak", "--ref", str(bundle_dir / "ref.wav"), "--csv", str(tmp_path / "r.csv")])
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    consistent = [float(r["rtf"]) == float(r["synth_seconds"]) / float(r["audio_seconds"]) for r in rows]
    ok = exact and code == 0 and len(rows) == 2 and all(consistent)
    assert acceptance(8, "compute_rtf(1,1)=1; bench-rtf rtf = synth/audio", ok,
                      "rtf " + ", ".join(f"{float(r['rtf']):.4f}" for r in rows) + " (hardware dependent)")


def test_c09_corpus_stats(acceptance, rng):
    s = corpus_stats([ManifestRecord("a.wav", "s", 3.0, "a b a"), ManifestRecord("b.wav", "s", 5.0, "b c")])
    hand = (s.hours == 8 / 3600 and s.mean_audio_length == 4.0 and s.total_words == 5 and s.vocab_size == 3
            and s.mean_word_freq == 5 / 3 and s.total_recordings == 2)
    words = ["apa", "Kabar,", "baik!", "terima", "kasih.", "saya", "suka", "nasi?"]
    records = [ManifestRecord(f"{i}.wav", f"s{i % 3}", float(rng.uniform(0.5, 12.0)),
                              " ".join(rng.choice(words, int(rng.integers(1, 9))))) for i in range(60)]
    reference = corpus_stats(records)
    invariant = all(corpus_stats([records[i] for i in rng.permutation(60)]) == reference for _ in range(10))
    ok = hand and invariant
    assert acceptance(9, "corpus stats hand example exact; invariant over 10 shuffles", ok,
                      f"hand example {hand}, shuffles {invariant}")


def test_c10_end_to_end_determinism(acceptance, bundle_dir, tmp_path):
    outputs, codes = [], []
    for i in range(2):
        out = tmp_path / f"o{i}.wav"
        proc = subprocess.run([sys.executable, "-m", "codec_tts.cli", "--deterministic", "--seed", "0",
                               "--model-dir", str(bundle_dir), "synthesize", "--text", "terima kasih banyak",
                               "--ref", str(bundle_dir / "ref.wav"), "--out", str(out), "--sampling", "greedy"],
                              capture_output=True, text=True, timeout=300)
        codes.append(proc.returncode)
        outputs.append(out.read_bytes() if out.exists() else b"")
    ok = codes == [0, 0] and outputs[0] == outputs[1] and len(outputs[0]) > 44
    assert acceptance(10, "two greedy --deterministic synthesize runs give byte-identical WAVs", ok,
                      f"exit codes {codes}, {len(outputs[0])} bytes, identical={outputs[0] == outputs[1]}")


def test_c11_frozenness(acceptance, overfit):
    b = overfit.bundle
    modules = {"text_encoder": b.text_encoder.module_, "codec": b.codec.net_, "speaker_encoder": b.speaker_encoder.module_}
    before = {k: parameter_checksum(m) for k, m in modules.items()}
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, total_steps=100, grad_accum=1, batch=2)
    net = CodecLanguageModel(hidden_dim=128, n_heads=2, n_blocks=2, seed=11).initialize().net_
    trainer = LmTrainer(net, cfg, codec=b.codec, frozen={"text_encoder": modules["text_encoder"],
                                                         "speaker_encoder": modules["speaker_encoder"]})
    trainer.fit(overfit.examples, 100)
    after = {k: parameter_checksum(m) for k, m in modules.items()}
    no_grads = all(p.grad is None for m in modules.values() for p in m.parameters())
    ok = trainer.updates == 100 and before == after and no_grads and all(trainer.audit_frozen().values())
    assert acceptance(11, "frozen text encoder, codec, speaker encoder unchanged by 100 LM updates", ok,
                      ", ".join(f"{k} {'same' if before[k] == after[k] else 'CHANGED'}" for k in modules))


def test_c12_length_probe(acceptance, overfit):
    trained = {r["bucket"]: r["nll"] for r in length_probe(overfit.lm, overfit.examples)}
    random_init = {r["bucket"]: r["nll"] for r in length_probe(overfit.baseline, overfit.examples)}
    ok = bool(trained) and trained.keys() == random_init.keys() and all(trained[k] < random_init[k] for k in trained)
    assert acceptance(12, "length probe: trained NLL < random-init NLL in every populated bucket", ok,
                      "; ".join(f"{k}: {trained[k]:.4f} vs {random_init[k]:.4f}" for k in trained))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
