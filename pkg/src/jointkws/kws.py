"""cnn-trad-pool2 keyword classifier and its objective."""

from __future__ import annotations

import numpy as np

from .dsp import N_MELS
from .engine import GraphSpec, LayerSpec, ModelGraph

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
LABELS = KEYWORDS + ("unknown", "silence")
UNKNOWN = LABELS.index("unknown")
SILENCE = LABELS.index("silence")
N_CLASSES = len(LABELS)
# the reference input length the classifier's output layer is sized for
KWS_FRAMES = 101
PROB_FLOOR = 1e-12


def build_kws(n_classes: int = N_CLASSES) -> GraphSpec:
    """conv 64@20x8 -> maxpool 2x2 -> conv 64@10x4 -> softmax; no hidden linear layers.

    Inputs of up to 101 MFCC frames are zero-padded (centred) to 101.
    """
    layers = [
        LayerSpec("pad", "pad_time", options={"length": KWS_FRAMES}),
        LayerSpec("reshape", "reshape_in", options={"mode": "image"}),
        LayerSpec("conv", "conv_1", 1, 64, (20, 8)),
        LayerSpec("activation", "conv_1_relu", activation="relu"),
        LayerSpec("maxpool", "pool_1", kernel=(2, 2), stride=(2, 2)),
        LayerSpec("conv", "conv_2", 64, 64, (10, 4)),
        LayerSpec("activation", "conv_2_relu", activation="relu"),
        LayerSpec("reshape", "flatten", options={"mode": "flatten"}),
    ]
    flat = GraphSpec("probe", N_MELS, layers).output_shape(KWS_FRAMES)[0]
    layers += [
        LayerSpec("fc", "output", flat, n_classes),
        LayerSpec("activation", "softmax", activation="softmax"),
    ]
    return GraphSpec("cnn-trad-pool2", N_MELS, layers)


def cross_entropy(posterior: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean ``-log p[label]`` over the batch and its gradient w.r.t. the logits.

    The gradient is the exact softmax/cross-entropy form ``(p - onehot)/B``,
    to be passed to ``ModelGraph.backward(..., logits=True)``.
    """
    p = np.atleast_2d(np.asarray(posterior, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = np.arange(len(labels))
    loss = float(-np.log(np.maximum(p[rows, labels], PROB_FLOOR)).mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


def keyword_score(posterior: np.ndarray) -> np.ndarray:
    """Detection score ``1 - P(unknown) - P(silence)`` per row, clipped to [0, 1]."""
    p = np.atleast_2d(posterior)
    return np.clip(1.0 - p[:, UNKNOWN] - p[:, SILENCE], 0.0, 1.0)


def classify(graph: ModelGraph, mfcc) -> tuple[int, float]:
    """Argmax class and keyword score for one ``(frames, 40)`` MFCC matrix."""
    values = getattr(mfcc, "values", mfcc)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != N_MELS:
        raise ValueError(f"expected (frames, {N_MELS}) MFCC, got {values.shape}")
    p = graph.forward(values[None], "eval")[0]
    return int(np.argmax(p)), float(keyword_score(p)[0])
