"""Instantiated computation graphs."""

from __future__ import annotations

import numpy as np

from .layers import CropTime, Layer, make_layer
from .spec import CompositionError, GraphSpec


class GraphStateError(RuntimeError):
    """Backward was requested without a cached forward pass."""


class ModelGraph:
    """Parameterised graph built from a :class:`GraphSpec`.

    ``forward`` caches whatever ``backward`` needs.  Gradients accumulate
    across backward calls until :meth:`zero_grads`.
    """

    def __init__(self, spec: GraphSpec, seed: int | None = 0, layers: list[Layer] | None = None):
        self.spec = spec
        if layers is None:
            rng = np.random.default_rng(seed)
            layers = [make_layer(ls, rng) for ls in spec.layers]
        if len(layers) != len(spec.layers):
            raise CompositionError("layer objects do not match the GraphSpec layers")
        self.layers = layers
        self._cached = False

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        """Run a batch ``(batch, frames, bins)`` through the graph."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.spec.input_bins:
            raise CompositionError(
                f"{self.spec.name}: expected input (batch, frames, {self.spec.input_bins}), got {x.shape}"
            )
        shapes = self.spec.shapes(x.shape[1])
        train = mode == "train"
        acts = [x]
        for i, layer in enumerate(self.layers, start=1):
            src = self.spec.layers[i - 1].source
            if isinstance(layer, CropTime):
                layer.frames = x.shape[1]
            y = layer.forward(acts[-1], train, None if src is None else acts[src])
            if y.shape[1:] != shapes[i]:
                raise CompositionError(
                    f"layer {i} ({self.spec.layers[i - 1].label}) produced {y.shape[1:]}, declared {shapes[i]}"
                )
            acts.append(y)
        self._n_acts = len(acts)
        self._shapes = [a.shape for a in acts]
        self._cached = True
        return acts[-1]

    def backward(
        self, output_grad: np.ndarray, logits: bool = False, input_grad: bool = True
    ) -> np.ndarray | None:
        """Back-propagate ``output_grad`` and return the input gradient.

        With ``logits=True`` the gradient refers to the input of the final
        layer (a softmax), which is skipped.  This lets cross-entropy pass
        the exact ``p - onehot`` gradient.  With ``input_grad=False`` only
        parameter gradients are accumulated: propagation stops at the first
        trainable layer and ``None`` is returned.
        """
        if not self._cached:
            raise GraphStateError(f"{self.spec.name}: backward called without a cached forward pass")
        n = len(self.layers)
        last = n
        if logits:
            if self.spec.layers[-1].activation != "softmax":
                raise GraphStateError("logits=True requires a final softmax layer")
            last = n - 1
        stop = 1
        if not input_grad:
            live = [i for i, layer in enumerate(self.layers, start=1) if layer.params and not layer.frozen]
            stop = min(live) if live else last + 1
        grads: dict[int, np.ndarray] = {last: np.asarray(output_grad, dtype=np.float64)}
        for i in range(last, stop - 1, -1):
            g = grads.pop(i, None)
            if g is None:
                g = np.zeros(self._shapes[i])
            layer = self.layers[i - 1]
            if not input_grad and i == stop:
                layer.need_input_grad = False
                try:
                    layer.backward(g)
                finally:
                    layer.need_input_grad = True
                break
            out = layer.backward(g)
            src = self.spec.layers[i - 1].source
            if src is not None:
                out, dsrc = out
                grads[src] = grads[src] + dsrc if src in grads else dsrc
            grads[i - 1] = grads[i - 1] + out if (i - 1) in grads else out
        self._cached = False
        return grads[0] if input_grad else None

    def release(self) -> None:
        """Free every layer's forward cache; a new forward is needed before backward."""
        for layer in self.layers:
            layer.release()
        self._cached = False

    def zero_grads(self) -> None:
        for layer in self.layers:
            for g in layer.grads.values():
                g[...] = 0.0

    def named_parameters(self):
        for i, layer in enumerate(self.layers, start=1):
            for k, v in layer.params.items():
                yield f"{i}.{k}", v

    def named_gradients(self):
        for i, layer in enumerate(self.layers, start=1):
            for k, v in layer.grads.items():
                yield f"{i}.{k}", v

    def trainable(self):
        """(parameter, gradient, key) triples of unfrozen layers."""
        for i, layer in enumerate(self.layers, start=1):
            if layer.frozen:
                continue
            for k, v in layer.params.items():
                yield v, layer.grads[k], f"{i}.{k}"

    def freeze(self, frozen: bool = True) -> None:
        for layer in self.layers:
            layer.frozen = frozen

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and batchnorm running statistics, keyed by layer index."""
        state = {}
        for i, layer in enumerate(self.layers, start=1):
            for k, v in layer.params.items():
                state[f"{i}.{k}"] = v.copy()
            for k, v in layer.buffers.items():
                state[f"{i}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers, start=1):
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{i}.{k}"
                    if key not in state:
                        raise KeyError(f"missing {key} in state")
                    if state[key].shape != store[k].shape:
                        raise CompositionError(f"{key}: shape {state[key].shape} != {store[k].shape}")
                    store[k][...] = state[key]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for _, g in self.named_gradients())))
