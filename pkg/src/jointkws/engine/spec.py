"""Declarative layer lists, shape inference and footprint accounting.

A :class:`GraphSpec` describes a network as an ordered list of
:class:`LayerSpec` records operating on per-utterance tensors.  Batch
dimensions never appear in declared shapes.  Every graph takes a
``(frames, bins)`` input; the frame count is the only free extent.
Image-like activations are ``(time, freq, channels)``.

Activations are numbered so that index 0 is the graph input and index
``i >= 1`` is the output of the i-th layer.  ``LayerSpec.source`` uses the
same numbering.

Multiply convention used by :func:`count_multiplies`: one multiply per
multiply-accumulate; batchnorm, activations and element-wise products cost
one multiply per element; additions, max-pool comparisons, logarithms,
padding and reshapes cost nothing.  A (bi)LSTM direction costs
``4*u*(d+u)`` MACs per step for the gate matrices plus ``3*u`` element-wise
products.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

KINDS = (
    "conv",
    "deconv",
    "bilstm",
    "fc",
    "batchnorm",
    "activation",
    "maxpool",
    "reshape",
    "concat-skip",
    "fixed-matmul",
    "log",
    "elemwise-mul",
    "pad",
    "crop",
)
ACTIVATIONS = ("relu", "lrelu", "sigmoid", "tanh", "softmax", "identity")
RESHAPE_MODES = ("image", "sequence", "channels", "squeeze", "flatten")

MULTIPLY_CONVENTION = (
    "one multiply per MAC; batchnorm/activation/element-wise product = 1 per element; "
    "additions, max-pool comparisons, log, pad/crop and reshapes = 0; "
    "LSTM direction = 4*u*(d+u) + 3*u per step"
)

_FIXED_MATRICES: dict[str, Callable[[], np.ndarray]] = {}


class SpecError(ValueError):
    """A layer declaration is invalid on its own."""


class CompositionError(SpecError):
    """Consecutive layer shapes do not compose."""


def register_fixed_matrix(name: str, factory: Callable[[], np.ndarray]) -> None:
    _FIXED_MATRICES[name] = factory


def fixed_matrix(name: str) -> np.ndarray:
    try:
        return _FIXED_MATRICES[name]()
    except KeyError:
        raise SpecError(f"unknown fixed matrix {name!r}") from None


@dataclass
class LayerSpec:
    """One layer of a graph.

    ``in_channels``/``out_channels`` mean channels for conv/deconv, features
    for fc and fixed-matmul, input features and units per direction for
    bilstm, and channels for batchnorm.  For conv, ``padding`` is zero
    padding ``(t_before, t_after, f_before, f_after)``; for deconv it is the
    crop applied to the full transposed-convolution output.
    """

    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    activation: str = ""
    source: int | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        self.stride = tuple(int(s) for s in self.stride)
        self.padding = tuple(int(p) for p in self.padding)
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if len(self.kernel) != 2 or len(self.stride) != 2 or len(self.padding) != 4:
            raise SpecError(f"{self.label}: kernel/stride need 2 extents, padding 4")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise SpecError(f"{self.label}: kernel/stride must be positive, padding nonnegative")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise SpecError(f"{self.label}: unknown activation {self.activation!r}")
        if self.kind == "reshape" and self.options.get("mode") not in RESHAPE_MODES:
            raise SpecError(f"{self.label}: reshape mode must be one of {RESHAPE_MODES}")
        if self.kind in ("concat-skip", "elemwise-mul") and self.source is None:
            raise SpecError(f"{self.label}: {self.kind} needs a source activation")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def affine(self) -> bool:
        return bool(self.options.get("affine", True))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        for key in ("kernel", "stride", "padding"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class GraphSpec:
    name: str
    input_bins: int
    layers: list[LayerSpec]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_bins": self.input_bins,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSpec":
        return cls(d["name"], int(d["input_bins"]), [LayerSpec.from_dict(x) for x in d["layers"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GraphSpec":
        return cls.from_dict(json.loads(text))

    def shapes(self, frames: int) -> list[tuple[int, ...]]:
        """Per-utterance activation shapes for ``frames`` input frames.

        Raises:
            CompositionError: naming the first layer whose input does not
                fit its declaration.
        """
        shapes: list[tuple[int, ...]] = [(int(frames), self.input_bins)]
        for i, layer in enumerate(self.layers, start=1):
            src = None
            if layer.source is not None:
                if not 0 <= layer.source < i:
                    raise CompositionError(
                        f"layer {i} ({layer.label}): source {layer.source} is not an earlier activation"
                    )
                src = shapes[layer.source]
            try:
                shapes.append(output_shape(layer, shapes[-1], src, int(frames)))
            except CompositionError as exc:
                raise CompositionError(f"layer {i} ({layer.label}): {exc}") from None
        return shapes

    def output_shape(self, frames: int) -> tuple[int, ...]:
        return self.shapes(frames)[-1]


def _time_axis(shape: tuple[int, ...]) -> int:
    if len(shape) in (2, 3):
        return 0
    raise CompositionError(f"shape {shape} has no time axis")


def _conv_extent(n: int, k: int, s: int, p0: int, p1: int) -> int:
    span = n + p0 + p1 - k
    if span < 0:
        raise CompositionError(f"kernel {k} longer than padded extent {n + p0 + p1}")
    return span // s + 1


def _deconv_extent(n: int, k: int, s: int, c0: int, c1: int) -> int:
    full = (n - 1) * s + k
    if c0 + c1 >= full:
        raise CompositionError(f"crop {c0}+{c1} removes the whole extent {full}")
    return full - c0 - c1


def output_shape(layer: LayerSpec, shape, src, frames: int) -> tuple[int, ...]:
    shape = tuple(shape)
    kind = layer.kind
    kt, kf = layer.kernel
    st, sf = layer.stride
    p = layer.padding

    def need_rank(r):
        if len(shape) != r:
            raise CompositionError(f"expected rank-{r} input, got shape {shape}")

    def need_channels(c, declared):
        if c != declared:
            raise CompositionError(f"declared {declared} input channels/features, got {c}")

    if kind in ("conv", "deconv", "maxpool"):
        need_rank(3)
        t, f, c = shape
        if kind == "maxpool":
            return (_conv_extent(t, kt, st, 0, 0), _conv_extent(f, kf, sf, 0, 0), c)
        need_channels(c, layer.in_channels)
        if kind == "conv":
            return (
                _conv_extent(t, kt, st, p[0], p[1]),
                _conv_extent(f, kf, sf, p[2], p[3]),
                layer.out_channels,
            )
        return (
            _deconv_extent(t, kt, st, p[0], p[1]),
            _deconv_extent(f, kf, sf, p[2], p[3]),
            layer.out_channels,
        )
    if kind == "bilstm":
        need_rank(2)
        need_channels(shape[1], layer.in_channels)
        return (shape[0], 2 * layer.out_channels)
    if kind == "fc":
        need_channels(shape[-1], layer.in_channels)
        return shape[:-1] + (layer.out_channels,)
    if kind == "fixed-matmul":
        rows, cols = fixed_matrix(layer.options["matrix"]).shape
        need_channels(shape[-1], rows)
        return shape[:-1] + (cols,)
    if kind == "batchnorm":
        need_channels(shape[-1], layer.in_channels)
        return shape
    if kind in ("activation", "log"):
        return shape
    if kind == "reshape":
        mode = layer.options["mode"]
        if mode == "image":
            need_rank(2)
            return shape + (1,)
        if mode == "squeeze":
            need_rank(3)
            if shape[2] != 1:
                raise CompositionError(f"cannot squeeze {shape[2]} channels")
            return shape[:2]
        if mode == "sequence":
            need_rank(3)
            return (shape[0], shape[1] * shape[2])
        if mode == "channels":
            need_rank(2)
            c = layer.out_channels
            if c <= 0 or shape[1] % c:
                raise CompositionError(f"{shape[1]} features do not split into {c} channels")
            return (shape[0], shape[1] // c, c)
        return (math.prod(shape),)
    if kind == "concat-skip":
        need_rank(3)
        if len(src) != 3 or src[:2] != shape[:2]:
            raise CompositionError(f"skip source shape {src} does not match {shape} on time/frequency")
        return shape[:2] + (shape[2] + src[2],)
    if kind == "elemwise-mul":
        if tuple(src) != shape:
            raise CompositionError(f"source shape {src} differs from {shape}")
        return shape
    if kind == "pad":
        ax = _time_axis(shape)
        n = shape[ax]
        if "multiple" in layer.options:
            m = int(layer.options["multiple"])
            target = -(-n // m) * m
        else:
            target = int(layer.options["length"])
            if n > target:
                raise CompositionError(f"{n} frames exceed the fixed length {target}")
        return shape[:ax] + (target,) + shape[ax + 1 :]
    if kind == "crop":
        ax = _time_axis(shape)
        if shape[ax] < frames:
            raise CompositionError(f"cannot crop {shape[ax]} frames back to {frames}")
        return shape[:ax] + (frames,) + shape[ax + 1 :]
    raise SpecError(f"unhandled layer kind {kind!r}")


def layer_param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes for a layer (empty for fixed layers)."""
    kind = layer.kind
    cin, cout = layer.in_channels, layer.out_channels
    kt, kf = layer.kernel
    if kind == "conv":
        return {"weight": (cout, cin, kt, kf), "bias": (cout,)}
    if kind == "deconv":
        return {"weight": (cin, cout, kt, kf), "bias": (cout,)}
    if kind == "fc":
        return {"weight": (cout, cin), "bias": (cout,)}
    if kind == "batchnorm" and layer.affine:
        return {"gamma": (cin,), "beta": (cin,)}
    if kind == "bilstm":
        shapes = {}
        for d in ("fwd", "bwd"):
            shapes[f"{d}_w_ih"] = (4 * cout, cin)
            shapes[f"{d}_w_hh"] = (4 * cout, cout)
            shapes[f"{d}_b_ih"] = (4 * cout,)
            shapes[f"{d}_b_hh"] = (4 * cout,)
        return shapes
    return {}


def count_params(spec: GraphSpec) -> int:
    """Exact trainable parameter count (weights, biases, batchnorm scale/shift)."""
    return sum(
        math.prod(s) for layer in spec.layers for s in layer_param_shapes(layer).values()
    )


def layer_multiplies(layer: LayerSpec, in_shape, out_shape) -> int:
    kind = layer.kind
    kt, kf = layer.kernel
    if kind == "conv":
        return math.prod(out_shape) * layer.in_channels * kt * kf
    if kind == "deconv":
        return math.prod(in_shape) * layer.out_channels * kt * kf
    if kind == "bilstm":
        d, u = layer.in_channels, layer.out_channels
        return in_shape[0] * 2 * (4 * u * (d + u) + 3 * u)
    if kind in ("fc", "fixed-matmul"):
        return math.prod(out_shape) * in_shape[-1]
    if kind in ("batchnorm", "activation", "elemwise-mul"):
        return math.prod(out_shape)
    return 0


def count_multiplies(spec: GraphSpec, frames: int) -> int:
    """Multiplies for one utterance of ``frames`` frames (see module docstring)."""
    shapes = spec.shapes(frames)
    return sum(
        layer_multiplies(layer, shapes[i], shapes[i + 1]) for i, layer in enumerate(spec.layers)
    )


def shift_sources(layers: list[LayerSpec], offset: int) -> list[LayerSpec]:
    """Copies of ``layers`` with sources renumbered for insertion after ``offset`` activations."""
    out = []
    for layer in layers:
        d = layer.to_dict()
        if layer.source is not None:
            d["source"] = layer.source + offset
        out.append(LayerSpec.from_dict(d))
    return out
