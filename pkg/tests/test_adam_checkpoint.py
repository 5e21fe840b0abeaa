from __future__ import annotations

import numpy as np
import pytest

from jointkws.engine import (
    AdamState,
    CheckpointError,
    GraphSpec,
    LayerSpec,
    ModelGraph,
    adam_step,
    load_bundle,
    save_bundle,
)
from jointkws.enhancement import EnhancerSpec, build_enhancer


def tiny_graph(seed=0):
    return ModelGraph(GraphSpec("t", 3, [LayerSpec("fc", "fc", 3, 2), LayerSpec("batchnorm", "bn", 2)]), seed=seed)


def test_adam_matches_hand_computation():
    g = tiny_graph()
    w0 = g.layers[0].params["weight"].copy()
    state = AdamState(lr=0.01)
    grads = [np.full_like(w0, 0.5), np.full_like(w0, -0.25)]
    m = np.zeros_like(w0)
    v = np.zeros_like(w0)
    w = w0.copy()
    for t, grad in enumerate(grads, start=1):
        g.zero_grads()
        g.layers[0].grads["weight"][...] = grad
        adam_step(state, g)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad**2
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(g.layers[0].params["weight"], w, rtol=0, atol=1e-15)


def test_adam_skips_frozen_layers():
    g = tiny_graph()
    g.layers[0].frozen = True
    before = g.layers[0].params["weight"].copy()
    g.forward(np.ones((2, 4, 3)))
    g.backward(np.ones((2, 4, 2)))
    adam_step(AdamState(lr=0.1), g)
    np.testing.assert_array_equal(g.layers[0].params["weight"], before)


def test_bundle_round_trip_and_byte_identity(tmp_path):
    g = ModelGraph(build_enhancer(EnhancerSpec.from_name("mel-crn-16")), seed=4)
    g.forward(np.random.default_rng(0).uniform(0, 1, (2, 20, 40)))
    state = AdamState(lr=1e-3)
    g.backward(np.ones((2, 20, 40)))
    adam_step(state, g)
    save_bundle(tmp_path / "a.ckpt", {"enhancer": g}, {"enhancer": state}, {"note": "x"})
    save_bundle(tmp_path / "b.ckpt", {"enhancer": g}, {"enhancer": state}, {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    graphs, adams, meta = load_bundle(tmp_path / "a.ckpt")
    again = graphs["enhancer"]
    assert again.spec == g.spec
    for (k, v), (_, w) in zip(g.named_parameters(), again.named_parameters()):
        np.testing.assert_array_equal(v, w)
    x = np.random.default_rng(1).uniform(0, 1, (1, 30, 40))
    np.testing.assert_array_equal(g.forward(x, "eval"), again.forward(x, "eval"))
    assert adams["enhancer"].step == 1 and meta == {"note": "x"}


def test_corrupt_bundle_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_bundle(path)
