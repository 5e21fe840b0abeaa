"""Small hand-checkable cases for each module's public operations."""

from __future__ import annotations

import numpy as np
import pytest

from jointkws.dsp import Spectrogram, Waveform, hz_to_mel, mel_filterbank, mel_spectrogram, mfcc, stft_power
from jointkws.engine import AdamState, GraphSpec, LayerSpec, ModelGraph, adam_step, count_multiplies, count_params
from jointkws.engine.layers import make_layer, softmax
from jointkws.enhancement import EnhancerSpec, apply_mask, build_bilstm_enhancer, build_enhancer, compute_irm
from jointkws.evaluation import ScoredTrial, accuracy, footprint, roc
from jointkws.kws import build_kws, cross_entropy, keyword_score

FC = GraphSpec("fc", 10, [LayerSpec("fc", "fc", 10, 5)])


def scalar_graph(w0):
    g = ModelGraph(GraphSpec("w", 1, [LayerSpec("fc", "w", 1, 1)]), seed=0)
    g.layers[0].params["weight"][...] = w0
    g.layers[0].params["bias"][...] = 0.0
    return g


# --- engine ------------------------------------------------------------------


def test_fc_counts():
    assert count_params(FC) == 55
    assert count_multiplies(FC, 7) == 350


def test_fc_weight_gradient_counts_positions():
    g = ModelGraph(FC, seed=0)
    y = g.forward(np.ones((2, 7, 10)), "train")
    g.zero_grads()
    g.backward(np.ones_like(y))
    np.testing.assert_array_equal(g.layers[0].grads["weight"], np.full((5, 10), 14.0))


def test_adam_first_step_is_about_lr():
    g = scalar_graph(1.0)
    g.zero_grads()
    g.layers[0].grads["weight"][...] = 3.0
    adam_step(AdamState(lr=0.01), g)
    assert g.layers[0].params["weight"][0, 0] == pytest.approx(1.0 - 0.01, abs=1e-8)


def test_adam_zero_gradient_leaves_parameters():
    g = scalar_graph(1.0)
    g.zero_grads()
    adam_step(AdamState(lr=0.01), g)
    assert g.layers[0].params["weight"][0, 0] == 1.0


def test_adam_minimises_scalar_quadratic():
    g = scalar_graph(0.0)
    state = AdamState(lr=0.1)
    dist = []
    for _ in range(100):
        w = g.layers[0].params["weight"]
        g.zero_grads()
        g.layers[0].grads["weight"][...] = 2.0 * (w - 2.0)
        adam_step(state, g)
        dist.append(abs(float(w[0, 0]) - 2.0))
    assert dist[-1] < 0.5
    assert all(b <= a + 1e-12 for a, b in zip(dist[:20], dist[1:20]))


def test_batchnorm_train_output_is_standardised():
    bn = make_layer(LayerSpec("batchnorm", "bn", 3), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(5.0, 3.0, (8, 20, 3))
    y = bn.forward(x, True).reshape(-1, 3)
    assert np.max(np.abs(y.mean(axis=0))) < 1e-6
    assert np.max(np.abs(y.var(axis=0) - 1.0)) < 1e-4


def test_deconv_equals_conv_input_gradient():
    rng = np.random.default_rng(2)
    conv = make_layer(LayerSpec("conv", "c", 2, 3, (3, 4), (2, 2), (1, 1, 1, 1)), rng)
    deconv = make_layer(LayerSpec("deconv", "d", 3, 2, (3, 4), (2, 2), (1, 1, 1, 1)), rng)
    deconv.params["weight"][...] = conv.params["weight"]
    deconv.params["bias"][...] = 0.0
    x = rng.standard_normal((2, 9, 10, 2))
    y = conv.forward(x, True)
    u = rng.standard_normal(y.shape)
    assert np.max(np.abs(deconv.forward(u, True) - conv.backward(u))) < 1e-10


# --- features ----------------------------------------------------------------


def test_mel_scale_and_filterbank_shape():
    assert float(hz_to_mel(700.0)) == pytest.approx(781.17, abs=0.01)
    fb = mel_filterbank()
    assert fb.shape == (241, 40)
    assert np.all(fb[121:] == 0)
    assert np.all(np.ones(241) @ fb > 0)
    assert np.all(fb.sum(axis=0) > 0)
    for col in fb.T:
        nz = np.flatnonzero(col)
        peak = nz[np.argmax(col[nz])]
        assert np.all(np.diff(col[nz[0] : peak + 1]) >= 0) and np.all(np.diff(col[peak : nz[-1] + 1]) <= 0)


def test_silence_and_linearity():
    zero = stft_power(Waveform(np.zeros(16000)))
    assert zero.values.shape == (98, 241) and not zero.values.any()
    assert not mel_spectrogram(zero).values.any()
    p = Spectrogram(np.random.default_rng(0).random((5, 241)), "power")
    np.testing.assert_allclose(mel_spectrogram(Spectrogram(2 * p.values, "power")).values,
                               2 * mel_spectrogram(p).values, rtol=1e-14)


def test_mfcc_of_constant_frame():
    c = 3.7
    out = mfcc(Spectrogram(np.full((2, 40), c), "mel")).values
    assert out[0, 0] == pytest.approx(np.sqrt(40) * np.log(c), abs=1e-12)
    assert np.max(np.abs(out[:, 1:])) < 1e-12


def test_white_noise_energy_grows_with_length():
    totals = []
    for seconds in (1, 2, 3, 4):
        runs = [stft_power(Waveform(np.random.default_rng([s, seconds]).standard_normal(16000 * seconds))).values.sum()
                for s in range(5)]
        totals.append(np.mean(runs))
    slope = np.polyfit([1, 2, 3, 4], totals, 1)[0]
    assert slope > 0
    assert all(a < b for a, b in zip(totals, totals[1:]))


# --- masks and models ----------------------------------------------------------


def test_irm_worked_values():
    np.testing.assert_allclose(compute_irm(np.array([1.0, 1.0, 2.0]), np.array([4.0, 1.0, 0.0])),
                               [np.sqrt(0.2), np.sqrt(0.5), 1.0])


def test_apply_mask_examples():
    np.testing.assert_array_equal(apply_mask(np.array([[2.0, 4.0]]), np.array([[0.5, 0.25]])), [[1.0, 1.0]])
    y = np.random.default_rng(0).random((3, 4))
    assert not apply_mask(y, np.zeros_like(y)).any()
    m = np.random.default_rng(1).random((3, 4))
    assert np.all(np.abs(apply_mask(y, m)) <= np.abs(y))


def test_mel_crn_16_output_on_100_frames():
    g = ModelGraph(build_enhancer(EnhancerSpec.from_name("mel-crn-16")), seed=0)
    m = g.forward(np.random.default_rng(0).uniform(0, 3, (1, 100, 40)), "eval")
    assert m.shape == (1, 100, 40) and np.all((m > 0) & (m < 1))


def test_bilstm_output_range():
    g = ModelGraph(build_bilstm_enhancer(), seed=0)
    m = g.forward(np.random.default_rng(0).uniform(0, 3, (1, 6, 241)), "eval")
    assert m.shape == (1, 6, 241) and np.all((m > 0) & (m < 1))


def test_cross_entropy_and_softmax_examples():
    uniform = np.full((1, 12), 1 / 12)
    assert cross_entropy(uniform, [4])[0] == pytest.approx(np.log(12))
    confident = np.zeros((1, 12))
    confident[0, 3] = 1.0
    assert cross_entropy(confident, [3])[0] == 0.0
    z = np.random.default_rng(0).standard_normal((4, 12)) * 10
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax(z + 123.0), softmax(z), atol=1e-12)


def test_keyword_score_of_non_keyword_mass():
    p = np.zeros((1, 12))
    p[0, 10], p[0, 11] = 0.25, 0.75
    assert keyword_score(p)[0] == 0.0


# --- metrics -----------------------------------------------------------------


def test_accuracy_examples():
    trials = [ScoredTrial(0.5, True, 1, 1), ScoredTrial(0.5, True, 2, 2), ScoredTrial(0.5, False, 10, 10),
              ScoredTrial(0.5, False, 3, 11)]
    assert accuracy(trials) == 0.75
    assert accuracy(trials[::-1]) == 0.75
    assert accuracy(trials[:3]) == 1.0


def test_lowest_threshold_accepts_everything():
    trials = [ScoredTrial(s, k, 0, 0) for s, k in [(0.0, True), (0.4, False), (0.9, True), (0.0, False)]]
    first = roc(trials)[0]
    assert first.threshold == 0.0 and first.far == 1.0 and first.frr == 0.0


def test_joint_footprint_lists_both_models():
    from jointkws.trainer import Checkpoint, TrainConfig

    ck = Checkpoint(TrainConfig(strategy="joint", enhancer="mel-crn-16"),
                    kws=ModelGraph(build_kws(), seed=0),
                    enhancer=ModelGraph(build_enhancer(EnhancerSpec.from_name("mel-crn-16")), seed=0))
    fp = footprint(ck)
    assert fp["enhancer"]["params"] == pytest.approx(221.5e3, rel=0.01)
    assert fp["kws"]["params"] == pytest.approx(493.7e3, rel=0.01)
