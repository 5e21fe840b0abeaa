from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointkws.dsp import Spectrogram
from jointkws.engine import ModelGraph
from jointkws.enhancement import (
    MaskError,
    apply_mask,
    compute_irm,
    identity_enhancer,
    mse_mask_loss,
)

energies = arrays(np.float64, (3, 5), elements=st.floats(0, 1e6, allow_nan=False))


@given(energies, energies)
def test_irm_in_unit_interval(s, n):
    m = compute_irm(s, n)
    assert np.all((m >= 0) & (m <= 1))


def test_irm_on_many_random_pairs():
    rng = np.random.default_rng(0)
    s = rng.exponential(1.0, 10_000) * (rng.random(10_000) > 0.1)
    n = rng.exponential(1.0, 10_000) * (rng.random(10_000) > 0.1)
    m = compute_irm(s, n)
    assert np.all((m >= 0) & (m <= 1))
    live = (s + n) > 0
    np.testing.assert_allclose(m[live] ** 2, s[live] / (s[live] + n[live]))


def test_irm_examples():
    np.testing.assert_allclose(compute_irm(np.array([1.0, 0.0, 3.0, 0.0]), np.array([1.0, 2.0, 0.0, 0.0])),
                               [np.sqrt(0.5), 0.0, 1.0, 0.0])


def test_irm_errors():
    with pytest.raises(MaskError):
        compute_irm(np.ones(3), np.ones(4))
    with pytest.raises(MaskError):
        compute_irm(np.array([-1.0]), np.array([1.0]))
    with pytest.raises(MaskError):
        compute_irm(Spectrogram(np.ones((2, 2)), "mel"), Spectrogram(np.ones((2, 2)), "power"))


@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1e3)))
def test_all_ones_mask_is_identity(y):
    np.testing.assert_array_equal(apply_mask(y, np.ones_like(y)), y)


def test_apply_mask_shape_mismatch():
    with pytest.raises(MaskError):
        apply_mask(np.ones((2, 3)), np.ones((3, 2)))


@given(st.floats(-3, 3), st.integers(1, 4), st.integers(1, 50))
def test_mse_constant_offset(d, t, f):
    m = np.random.default_rng(t * f).random((t, f))
    loss, _ = mse_mask_loss(m, m + d)
    assert abs(loss - d * d) < 1e-12


def test_mse_gradient_form():
    target = np.zeros((2, 3, 4))
    est = np.ones((2, 3, 4))
    _, g = mse_mask_loss(target, est)
    np.testing.assert_allclose(g, 2.0 / 24)


@pytest.mark.parametrize("domain,bins", [("mel", 40), ("power", 241)])
def test_identity_stub_produces_exact_ones(domain, bins):
    g = ModelGraph(identity_enhancer(domain))
    g.layers[1].params["weight"][...] = 0.0
    g.layers[1].params["bias"][...] = 50.0
    m = g.forward(np.random.default_rng(0).uniform(0, 100, (2, 98, bins)), "eval")
    assert np.all(m == 1.0)
