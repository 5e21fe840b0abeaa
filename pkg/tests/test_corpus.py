from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointkws.corpus import (
    CorpusError,
    ManifestRow,
    UndefinedSNRError,
    Utterance,
    fit_length,
    hash_id,
    load_wav,
    make_split,
    mix,
    plan_mixes,
    read_corpus,
    read_manifest,
    realise,
    save_wav,
    snr_db,
    synth_corpus,
    write_corpus,
    write_manifest,
)
from jointkws.dsp import Waveform, features
from jointkws.kws import KEYWORDS, LABELS, SILENCE


@pytest.fixture(scope="module")
def small_corpus():
    return synth_corpus(5, 10)


def test_gain_examples():
    s = Waveform(np.full(16000, 0.1))
    n = Waveform(np.full(20000, 0.1))
    assert mix(s, n, 0.0, 0).gain == pytest.approx(1.0, abs=1e-12)
    assert mix(s, n, 6.0, 0).gain == pytest.approx(10 ** (-0.3), abs=1e-12)


def test_high_snr_noise_is_negligible():
    rng = np.random.default_rng(0)
    s = Waveform(0.1 * rng.standard_normal(16000))
    n = Waveform(0.1 * rng.standard_normal(20000))
    m = mix(s, n, 100.0, 10)
    rms = np.sqrt(np.mean(s.samples**2))
    assert np.sqrt(np.mean(m.noise_part**2)) < 1e-4 * rms


@pytest.mark.parametrize("snr", [-3.0, 0.0, 3.0, 6.0])
def test_realised_snr_matches_target(snr):
    rng = np.random.default_rng(int(snr) + 10)
    for _ in range(100):
        s = Waveform(rng.uniform(0.01, 0.3) * rng.standard_normal(16000))
        n = Waveform(rng.uniform(0.01, 0.3) * rng.standard_normal(32000))
        m = mix(s, n, snr, int(rng.integers(16001)))
        assert abs(snr_db(m.speech_part, m.noise_part) - snr) < 0.01
        np.testing.assert_array_equal(m.noisy.samples, m.speech_part + m.noise_part)


def test_clipping_rescales_both_parts():
    s = Waveform(np.full(16000, 0.9))
    n = Waveform(np.full(16000, 0.9))
    m = mix(s, n, 0.0, 0)
    assert m.scale < 1.0
    assert np.max(np.abs(m.noisy.samples)) <= 1.0 + 1e-12
    assert snr_db(m.speech_part, m.noise_part) == pytest.approx(0.0, abs=1e-9)


def test_mix_errors():
    s = Waveform(np.ones(16000))
    with pytest.raises(UndefinedSNRError):
        mix(Waveform(np.zeros(16000)), s, 0.0, 0)
    with pytest.raises(UndefinedSNRError):
        mix(s, Waveform(np.zeros(16000)), 0.0, 0)
    with pytest.raises(CorpusError):
        mix(s, Waveform(np.ones(16000)), 0.0, 1)


@given(st.integers(0, 40000))
def test_fit_length(n):
    assert fit_length(np.ones(n)).size == 16000


@pytest.mark.parametrize("per_class,sizes", [(100, (80, 10, 10)), (50, (40, 5, 5))])
def test_split_proportions(per_class, sizes):
    ids = [f"{c}-{i}" for c in range(3) for i in range(per_class)]
    labels = [c for c in range(3) for _ in range(per_class)]
    sp = make_split(ids, labels, 7)
    for c in range(3):
        got = tuple(sum(i.startswith(f"{c}-") for i in part) for part in (sp.train, sp.validation, sp.test))
        assert got == sizes
    assert sorted(sp.train + sp.validation + sp.test) == sorted(ids)
    assert make_split(ids, labels, 7) == sp
    assert make_split(ids, labels, 8) != sp


def test_split_errors():
    with pytest.raises(CorpusError):
        make_split([str(i) for i in range(9)], [0] * 9, 0)
    with pytest.raises(CorpusError):
        make_split(["a"] * 10, [0] * 10, 0)


def test_synth_is_deterministic(small_corpus):
    again = synth_corpus(5, 10)
    for a, b in zip(small_corpus.utterances, again.utterances):
        assert a.source_id == b.source_id
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
    other = synth_corpus(6, 10)
    assert not np.array_equal(small_corpus.utterances[0].waveform.samples, other.utterances[0].waveform.samples)


def test_synth_shapes_and_levels(small_corpus):
    assert len(small_corpus.utterances) == 10 * len(LABELS)
    rms = {lab: [] for lab in range(len(LABELS))}
    for u in small_corpus.utterances:
        assert u.waveform.samples.size == 16000
        assert np.max(np.abs(u.waveform.samples)) <= 1.0
        rms[u.label].append(np.sqrt(np.mean(u.waveform.samples**2)))
    assert np.mean(rms[SILENCE]) < 0.02 * np.mean(rms[0])
    for w in small_corpus.noises.values():
        assert np.sqrt(np.mean(w.samples**2)) == pytest.approx(0.1, rel=1e-9)


def test_keywords_are_linearly_separable():
    corpus = synth_corpus(1, 20)
    feats, labels = [], []
    for u in corpus.utterances:
        if u.label < len(KEYWORDS):
            f = features(u.waveform, "mfcc").values
            feats.append(np.concatenate([f.mean(0), f.std(0)]))
            labels.append(u.label)
    x, y = np.array(feats), np.array(labels)
    x = (x - x.mean(0)) / x.std(0)
    train = np.arange(len(y)) % 20 < 15
    onehot = np.eye(len(KEYWORDS))[y[train]]
    a = np.c_[x[train], np.ones(train.sum())]
    w = np.linalg.solve(a.T @ a + 1e-2 * np.eye(a.shape[1]), a.T @ onehot)
    pred = np.argmax(np.c_[x[~train], np.ones((~train).sum())] @ w, axis=1)
    assert np.mean(pred == y[~train]) >= 0.95


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.99, 0.99, 16000)
    save_wav(tmp_path / "a.wav", Waveform(x))
    back = load_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_wav_rejects_other_rates(tmp_path):
    import wave

    with wave.open(str(tmp_path / "b.wav"), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(b"\0\0" * 800)
    with pytest.raises(CorpusError, match="8000"):
        load_wav(tmp_path / "b.wav")


def test_manifest_and_corpus_round_trip(tmp_path, small_corpus):
    us = small_corpus.utterances
    sp = make_split([u.source_id for u in us], [u.label for u in us], 5)
    rows = plan_mixes(us, small_corpus.noises, sp, seed=5)
    assert rows == plan_mixes(us, small_corpus.noises, sp, seed=5)
    assert len(rows) == len(us)
    write_manifest(tmp_path / "m.tsv", rows)
    assert read_manifest(tmp_path / "m.tsv") == rows
    write_corpus(tmp_path / "c", small_corpus, rows)
    back, back_rows = read_corpus(tmp_path / "c")
    assert back_rows == rows
    assert set(back.noises) == set(small_corpus.noises)
    mixed = realise(rows[:5], back.utterances, back.noises)
    for u, r in zip(mixed, rows[:5]):
        assert u.source_id == r.id
        assert snr_db(u.speech_part, u.noise_part) == pytest.approx(float(r.snr), abs=0.01)


def test_clean_rows_and_multiplicity(small_corpus):
    us = small_corpus.utterances
    sp = make_split([u.source_id for u in us], [u.label for u in us], 0)
    rows = plan_mixes(us, small_corpus.noises, sp, multiplicity=3)
    assert len(rows) == 3 * len(us)
    clean = [ManifestRow(r.id, r.label, r.split, "clean", "", 0, 0) for r in rows[:2]]
    out = realise(clean, us, small_corpus.noises)
    assert np.all(out[0].noise_part == 0)
    with pytest.raises(CorpusError):
        plan_mixes(us, small_corpus.noises, sp, multiplicity=0)


def test_hash_is_stable():
    assert hash_id("") == 2166136261
    assert hash_id("a") == 0xE40C292C


def test_utterance_label_range():
    with pytest.raises(CorpusError):
        Utterance(Waveform(np.zeros(16000)), 12, "x")
