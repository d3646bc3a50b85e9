"""Shared fixtures: a small trained codec and an LM overfit on two synthetic utterances.

Training is session-scoped so the expensive fits run once per pytest invocation.
"""
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from codec_tts.codec import NeuralCodec
from codec_tts.lm import CodecLanguageModel
from codec_tts.losses import TrainConfig
from codec_tts.pipeline import ModelBundle
from codec_tts.speaker import SpeakerEncoder
from codec_tts.synthetic import SPEAKERS, speaker_clip, utterance
from codec_tts.text import BpeTokenizer, TextEncoder
from codec_tts.training import prepare_example

OVERFIT_UTTERANCES = [("selamat pagi", "spk_a"), ("terima kasih banyak", "spk_b")]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_waves():
    return [utterance(text, SPEAKERS[spk]) for text, spk in OVERFIT_UTTERANCES]


@pytest.fixture(scope="session")
def toy_codec(overfit_waves):
    return NeuralCodec(n_steps=100).fit(overfit_waves)


@pytest.fixture(scope="session")
def overfit(toy_codec, overfit_waves):
    """hidden 128 / 2 heads / 2 blocks LM trained 500 updates on the two utterances."""
    texts = [t for t, _ in OVERFIT_UTTERANCES]
    bpe = BpeTokenizer(vocab_size=300).fit(texts)
    lm = CodecLanguageModel(hidden_dim=128, n_heads=2, n_blocks=2, seed=0).initialize()
    baseline = CodecLanguageModel(**lm.get_params()).initialize()
    text_encoder = TextEncoder(vocab_size=bpe.n_vocab_, d_model=128).fit()
    speaker_encoder = SpeakerEncoder().fit()
    refs = [speaker_clip(SPEAKERS[spk], 2.0, seed=5) for _, spk in OVERFIT_UTTERANCES]
    examples = [prepare_example(t, w, r, bpe, text_encoder, toy_codec, speaker_encoder)
                for t, w, r in zip(texts, overfit_waves, refs)]
    cfg = TrainConfig(peak_lr=2e-3, warmup_steps=30, total_steps=500, grad_accum=1, batch=2)
    start = time.perf_counter()
    lm.fit(examples, train_config=cfg, codec=toy_codec, n_updates=500)
    seconds = time.perf_counter() - start
    bundle = ModelBundle(bpe, toy_codec, lm, text_encoder=text_encoder, speaker_encoder=speaker_encoder)
    return SimpleNamespace(bpe=bpe, lm=lm, baseline=baseline, examples=examples, refs=refs, texts=texts,
                           bundle=bundle, train_seconds=seconds, cfg=cfg)


@pytest.fixture(scope="session")
def bundle_dir(overfit, tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    overfit.bundle.save(d)
    from codec_tts.audio_io import save_wav

    save_wav(d / "ref.wav", overfit.refs[0])
    return d


@pytest.fixture
def tiny_lm():
    """Random-init LM small enough for exhaustive per-position checks."""
    return CodecLanguageModel(hidden_dim=32, n_heads=2, n_blocks=2, d_spk=16, seed=3).initialize()


@pytest.fixture
def conditioning(rng):
    def make(n_text=5, d_text=32, n_spk=9, d_spk=16):
        x_te = torch.as_tensor(rng.standard_normal((n_text, d_text)), dtype=torch.float32)
        x_se = torch.as_tensor(rng.standard_normal((n_spk, d_spk)), dtype=torch.float32)
        return x_te, x_se

    return make


ACCEPTANCE = {}


@pytest.fixture
def acceptance(capsys):
    """Record one acceptance criterion: prints a PASS/FAIL line and keeps it for the run summary."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [k for k in ACCEPTANCE]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 13):
        terminalreporter.write_line(ACCEPTANCE.get(number, f"criterion {number:2d} [FAIL] did not report (error or not run)"))
