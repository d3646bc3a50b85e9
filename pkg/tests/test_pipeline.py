import csv
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codec_tts.exceptions import CheckpointError, DataError
from codec_tts.pipeline import (LENGTH_BUCKETS, ManifestRecord, ModelBundle, bucket_label, bucket_of, compute_rtf,
                                corpus_stats, count_sentences, format_table, length_probe, read_manifest,
                                synthesize, words_of, write_csv, write_manifest)
from codec_tts.serialization import read_config, write_config


def rec(duration, transcript, path="x.wav", speaker="s"):
    return ManifestRecord(Path(path), speaker, duration, transcript)


def test_corpus_stats_hand_example():
    s = corpus_stats([rec(3.0, "a b a"), rec(5.0, "b c")])
    assert s.hours == 8 / 3600
    assert s.mean_audio_length == 4.0
    assert (s.total_words, s.vocab_size, s.total_recordings) == (5, 3, 2)
    assert s.mean_word_freq == 5 / 3


def test_corpus_stats_single_and_empty():
    assert corpus_stats([rec(2.75, "Halo!")]).mean_audio_length == 2.75
    with pytest.raises(DataError):
        corpus_stats([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 30.0), st.sampled_from(["a b", "C, d.", "e! f? g", "a"])),
                min_size=1, max_size=12), st.randoms())
def test_corpus_stats_permutation_invariant(items, random):
    records = [rec(d, t) for d, t in items]
    shuffled = list(records)
    random.shuffle(shuffled)
    assert corpus_stats(records) == corpus_stats(shuffled)


def test_word_rules():
    assert words_of("Halo, DUNIA!  “apa” kabar...") == ["halo", "dunia", "apa", "kabar"]
    assert words_of(" -- ") == []
    assert count_sentences("Satu. Dua! Tiga? empat") == 4


def test_manifest_roundtrip_and_relative_paths(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"")
    (tmp_path / "m.tsv").write_text("# comment\na.wav\tspk\t1.5\tHalo, apa kabar\n\n")
    records = read_manifest(tmp_path / "m.tsv")
    assert records == [ManifestRecord(tmp_path / "a.wav", "spk", 1.5, "Halo, apa kabar")]
    write_manifest(tmp_path / "n.tsv", records)
    assert read_manifest(tmp_path / "n.tsv") == records


@pytest.mark.parametrize("line", ["a.wav\tspk\t1.5", "a.wav\tspk\tlong\ttext", "a.wav\tspk\t-1\ttext",
                                  "missing.wav\tspk\t1\ttext"])
def test_manifest_errors(tmp_path, line):
    (tmp_path / "a.wav").write_bytes(b"")
    (tmp_path / "m.tsv").write_text(line + "\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_missing_or_empty(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path / "none.tsv")
    (tmp_path / "e.tsv").write_text("# nothing\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "e.tsv")


def test_compute_rtf():
    assert compute_rtf(1.0, 1.0) == 1.0
    assert compute_rtf(0.5, 10.0) == 0.05
    with pytest.raises(ValueError):
        compute_rtf(1.0, 0.0)
    with pytest.raises(ValueError):
        compute_rtf(-1.0, 1.0)


def test_buckets():
    assert [bucket_of(n) for n in (1, 25, 26, 75, 76, 100, 101, 5000)] == [
        LENGTH_BUCKETS[0], LENGTH_BUCKETS[0], LENGTH_BUCKETS[1], LENGTH_BUCKETS[2], LENGTH_BUCKETS[3],
        LENGTH_BUCKETS[3], LENGTH_BUCKETS[4], LENGTH_BUCKETS[4]]
    assert [bucket_label(b) for b in LENGTH_BUCKETS] == ["1-25", "26-50", "51-75", "76-100", "101+"]
    with pytest.raises(ValueError):
        bucket_of(0)


def test_table_and_csv(tmp_path):
    rows = [{"name": "a", "value": 1.23456789}, {"name": "longer", "value": 2}]
    table = format_table(rows, ["name", "value"]).splitlines()
    assert len(table) == 4 and len({len(line) for line in table}) == 1
    write_csv(tmp_path / "t.csv", rows, ["name", "value"])
    with open(tmp_path / "t.csv") as fh:
        back = list(csv.DictReader(fh))
    assert back[0] == {"name": "a", "value": "1.23456789"}


def test_synthesize_empty_text_fails_before_models():
    with pytest.raises(DataError):
        synthesize("   ", reference=None, models=None)


def test_synthesize_report(overfit):
    report, wav = synthesize(overfit.texts[0], overfit.refs[0], overfit.bundle, sampling="greedy")
    assert report.audio_seconds == report.token_count / 75
    assert report.rtf == report.synth_seconds / report.audio_seconds
    assert len(wav) == report.token_count * 294


def test_length_probe_rows(overfit):
    rows = length_probe(overfit.lm, overfit.examples)
    assert [r["bucket"] for r in rows] == ["1-25"]
    assert rows[0]["count"] == 2 and rows[0]["nll"] < 0.5


def test_bundle_roundtrip(bundle_dir, overfit):
    back = ModelBundle.load(bundle_dir)
    ex = overfit.examples[1]
    a = back.lm.generate(ex.x_te, ex.x_se)
    np.testing.assert_array_equal(a, overfit.lm.generate(ex.x_te, ex.x_se))
    assert back.vocoder.mode == "deterministic"


def test_bundle_detects_tampering(bundle_dir, tmp_path):
    d = tmp_path / "b"
    shutil.copytree(bundle_dir, d)
    meta = read_config(d / "bundle.cfg")
    write_config(d / "bundle.cfg", {**meta, "speaker_seed": meta["speaker_seed"] + 1})
    with pytest.raises(CheckpointError):
        ModelBundle.load(d)
    write_config(d / "bundle.cfg", {**meta, "version": 99})
    with pytest.raises(CheckpointError):
        ModelBundle.load(d)
    (d / "bundle.cfg").unlink()
    with pytest.raises(CheckpointError):
        ModelBundle.load(d)
