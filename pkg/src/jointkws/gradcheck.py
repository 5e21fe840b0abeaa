"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import GraphSpec, LayerSpec, ModelGraph


@dataclass
class GradCheck:
    name: str
    rel_error: float
    checked: int


# gradients smaller than this (in norm) are compared in absolute terms, e.g.
# a bias feeding straight into batchnorm, whose true gradient is zero
GRAD_FLOOR = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||, GRAD_FLOOR)``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _probe_indices(size: int, count: int, rng) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return rng.choice(size, count, replace=False)


def numeric_grad(fn, x: np.ndarray, idx: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the flat entries ``idx`` of ``x`` (in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for n, k in enumerate(idx):
        keep = flat[k]
        flat[k] = keep + eps
        up = fn()
        flat[k] = keep - eps
        down = fn()
        flat[k] = keep
        out[n] = (up - down) / (2 * eps)
    return out


def check_graph(
    graph: ModelGraph,
    x: np.ndarray,
    mode: str = "train",
    probes: int = 24,
    eps: float = 1e-5,
    seed: int = 0,
) -> list[GradCheck]:
    """Compare analytic and numeric gradients of ``sum(R * graph(x))`` for a fixed random ``R``.

    Returns one record for the input and one per parameter tensor.
    """
    rng = np.random.default_rng([seed, 1])
    x = np.array(x, dtype=np.float64)
    y = graph.forward(x, mode)
    weights = rng.standard_normal(y.shape)
    graph.zero_grads()
    dx = graph.backward(weights)

    def loss():
        return float((graph.forward(x, mode) * weights).sum())

    # batchnorm running statistics drift during probing; restore afterwards
    saved = graph.state_dict()
    records = []
    idx = _probe_indices(x.size, probes, rng)
    records.append(GradCheck("input", rel_error(dx.reshape(-1)[idx], numeric_grad(loss, x, idx, eps)), len(idx)))
    for (key, p), (_, g) in zip(graph.named_parameters(), graph.named_gradients()):
        idx = _probe_indices(p.size, probes, rng)
        num = numeric_grad(loss, p, idx, eps)
        records.append(GradCheck(key, rel_error(g.reshape(-1)[idx], num), len(idx)))
    graph.load_state_dict(saved)
    return records


def check_function(fn, grad_fn, x: np.ndarray, probes: int = 24, eps: float = 1e-5, seed: int = 0) -> GradCheck:
    """Check a scalar function ``fn(x)`` against its analytic gradient ``grad_fn(x)``."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    g = np.asarray(grad_fn(x.copy()))
    idx = _probe_indices(x.size, probes, rng)
    num = numeric_grad(lambda: fn(x), x, idx, eps)
    return GradCheck("function", rel_error(g.reshape(-1)[idx], num), len(idx))


def single_layer_graph(layer: LayerSpec, bins: int, prefix: list[LayerSpec] | None = None) -> GraphSpec:
    return GraphSpec(f"check-{layer.kind}", bins, list(prefix or []) + [layer])


def layer_suite() -> list[tuple[str, GraphSpec, tuple[int, int, int], str]]:
    """Small graphs covering every layer kind: (name, spec, (batch, frames, bins), input kind).

    Input kind is ``"positive"`` for graphs starting with a logarithm or a
    mask product, ``"normal"`` otherwise.
    """
    img = [LayerSpec("reshape", "to_image", options={"mode": "image"})]
    two = img + [LayerSpec("conv", "widen", 1, 2, (1, 1))]
    suite = [
        ("conv", GraphSpec("conv", 7, two + [LayerSpec("conv", "conv", 2, 3, (3, 2), (2, 1), (1, 0, 1, 1))]), (2, 6, 7), "normal"),
        ("deconv", GraphSpec("deconv", 5, two + [LayerSpec("deconv", "deconv", 2, 3, (4, 3), (2, 2), (1, 1, 0, 1))]), (2, 4, 5), "normal"),
        ("bilstm", GraphSpec("bilstm", 4, [LayerSpec("bilstm", "bilstm", 4, 3)]), (2, 5, 4), "normal"),
        ("fc", GraphSpec("fc", 6, [LayerSpec("fc", "fc", 6, 4)]), (2, 3, 6), "normal"),
        ("batchnorm-train", GraphSpec("bn", 5, [LayerSpec("batchnorm", "bn", 5)]), (3, 4, 5), "normal"),
        ("batchnorm-image", GraphSpec("bn2", 5, two + [LayerSpec("batchnorm", "bn", 2)]), (2, 4, 5), "normal"),
        ("batchnorm-fixed", GraphSpec("bn3", 5, [LayerSpec("batchnorm", "bn", 5, options={"affine": False})]), (3, 4, 5), "normal"),
        ("maxpool", GraphSpec("pool", 6, two + [LayerSpec("maxpool", "pool", kernel=(2, 2), stride=(2, 2))]), (2, 6, 6), "normal"),
        ("maxpool-overlap", GraphSpec("pool2", 6, two + [LayerSpec("maxpool", "pool", kernel=(3, 2), stride=(2, 1))]), (2, 7, 6), "normal"),
        ("reshape", GraphSpec("reshape", 4, two + [
            LayerSpec("reshape", "seq", options={"mode": "sequence"}),
            LayerSpec("fc", "mix", 8, 8),
            LayerSpec("reshape", "chan", out_channels=2, options={"mode": "channels"}),
            LayerSpec("reshape", "flat", options={"mode": "flatten"}),
        ]), (2, 3, 4), "normal"),
        ("concat-skip", GraphSpec("skip", 4, two + [
            LayerSpec("conv", "branch", 2, 3, (3, 3), padding=(1, 1, 1, 1)),
            LayerSpec("concat-skip", "skip", source=2),
            LayerSpec("conv", "merge", 5, 1, (1, 1)),
        ]), (2, 4, 4), "normal"),
        ("fixed-matmul", GraphSpec("fixed", 40, [LayerSpec("fixed-matmul", "dct", options={"matrix": "dct"})]), (2, 3, 40), "normal"),
        ("log", GraphSpec("log", 5, [LayerSpec("log", "log")]), (2, 3, 5), "positive"),
        ("elemwise-mul", GraphSpec("mul", 5, [
            LayerSpec("fc", "gate", 5, 5),
            LayerSpec("activation", "sig", activation="sigmoid"),
            LayerSpec("elemwise-mul", "mask", source=0),
        ]), (2, 3, 5), "normal"),
        ("pad-crop", GraphSpec("padcrop", 3, [
            LayerSpec("pad", "pad", options={"multiple": 4}),
            LayerSpec("fc", "fc", 3, 3),
            LayerSpec("crop", "crop"),
        ]), (2, 5, 3), "normal"),
        ("pad-length", GraphSpec("padlen", 3, [
            LayerSpec("pad", "pad", options={"length": 8}),
            LayerSpec("reshape", "flat", options={"mode": "flatten"}),
            LayerSpec("fc", "fc", 24, 2),
        ]), (2, 5, 3), "normal"),
    ]
    for act in ("relu", "lrelu", "sigmoid", "tanh", "softmax", "identity"):
        suite.append((f"activation-{act}", GraphSpec(act, 5, [
            LayerSpec("fc", "fc", 5, 5),
            LayerSpec("activation", act, activation=act),
        ]), (2, 3, 5), "normal"))
    return suite


def make_input(shape: tuple[int, int, int], kind: str, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "positive":
        return rng.uniform(0.2, 2.0, shape)
    return rng.standard_normal(shape)


def run_layer_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Worst relative error per suite entry."""
    out = []
    for name, spec, shape, kind in layer_suite():
        graph = ModelGraph(spec, seed=seed)
        recs = check_graph(graph, make_input(shape, kind, seed), seed=seed)
        out.append((name, max(r.rel_error for r in recs)))
    return out


def run_loss_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Feature transformation blocks, mask product and both losses."""
    from .dsp import ftb_spec
    from .enhancement import apply_mask, mse_mask_loss
    from .engine.layers import softmax
    from .kws import cross_entropy

    rng = np.random.default_rng([seed, 2])
    out = []
    for domain, bins in (("mel", 40), ("power", 241)):
        graph = ModelGraph(ftb_spec(domain))
        recs = check_graph(graph, rng.uniform(0.1, 3.0, (2, 3, bins)), seed=seed)
        out.append((f"ftb-{domain}", max(r.rel_error for r in recs)))

    y = rng.uniform(0.1, 3.0, (2, 4, 6))
    weights = rng.standard_normal(y.shape)
    rec = check_function(lambda m: float((apply_mask(y, m) * weights).sum()), lambda m: y * weights,
                         rng.uniform(0.0, 1.0, y.shape), seed=seed)
    out.append(("mask-product", rec.rel_error))

    target = rng.uniform(0.0, 1.0, (2, 4, 6))
    rec = check_function(lambda m: mse_mask_loss(target, m)[0], lambda m: mse_mask_loss(target, m)[1],
                         rng.uniform(0.0, 1.0, target.shape), seed=seed)
    out.append(("mse-loss", rec.rel_error))

    labels = rng.integers(0, 12, 3)
    rec = check_function(lambda z: cross_entropy(softmax(z), labels)[0],
                         lambda z: cross_entropy(softmax(z), labels)[1],
                         rng.standard_normal((3, 12)), seed=seed)
    out.append(("cross-entropy", rec.rel_error))
    return out


def run_joint_check(seed: int = 0, samples: int = 5, batch: int = 2, frames: int = 98, eps: float = 1e-5) -> float:
    """Cross-entropy gradient of 5 sampled enhancer parameters through the whole MelCRN16 + classifier stack."""
    from .enhancement import EnhancerSpec, build_enhancer
    from .kws import build_kws, cross_entropy
    from .trainer import joint_graph

    enh = ModelGraph(build_enhancer(EnhancerSpec.from_name("mel-crn-16")), seed=[seed, 1])
    clf = ModelGraph(build_kws(), seed=[seed, 2])
    graph = joint_graph(enh, clf)
    rng = np.random.default_rng([seed, 3])
    x = rng.uniform(0.01, 5.0, (batch, frames, 40))
    labels = rng.integers(0, 12, batch)

    def loss():
        return cross_entropy(graph.forward(x, "train"), labels)[0]

    saved = graph.state_dict()
    p = graph.forward(x, "train")
    graph.zero_grads()
    graph.backward(cross_entropy(p, labels)[1], logits=True)
    params = [(k, v, g) for (k, v), (_, g) in zip(enh.named_parameters(), enh.named_gradients())]
    analytic, numeric = [], []
    for n in rng.choice(len(params), samples, replace=len(params) < samples):
        _, v, g = params[n]
        k = int(rng.integers(v.size))
        analytic.append(g.reshape(-1)[k])
        numeric.append(numeric_grad(loss, v, np.array([k]), eps)[0])
    graph.load_state_dict(saved)
    return rel_error(np.array(analytic), np.array(numeric))
