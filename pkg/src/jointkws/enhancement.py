"""Ratio-mask targets, mask application, and the enhancement network builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import N_BINS, N_MELS, Spectrogram
from .engine import GraphSpec, LayerSpec, SpecError
from .engine.layers import LOG_FLOOR

VARIANTS = {
    "pow-crn-16": ("PowCRN", 16, 32),
    "pow-crn-32": ("PowCRN", 32, 64),
    "mel-crn-16": ("MelCRN", 16, 32),
    "mel-crn-32": ("MelCRN", 32, 64),
    "bilstm": ("BiLSTM", 0, 384),
}
BILSTM_UNITS = 384


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class EnhancerSpec:
    variant: str
    width: int = 16
    hidden: int = 32

    def __post_init__(self):
        if self.variant not in ("PowCRN", "MelCRN", "BiLSTM"):
            raise SpecError(f"unknown enhancer variant {self.variant!r}")
        if self.variant != "BiLSTM" and (self.width, self.hidden) not in ((16, 32), (32, 64)):
            raise SpecError(f"(width, hidden) must be (16, 32) or (32, 64), got {(self.width, self.hidden)}")

    @property
    def domain(self) -> str:
        return "mel" if self.variant == "MelCRN" else "power"

    @property
    def bins(self) -> int:
        return N_MELS if self.domain == "mel" else N_BINS

    @classmethod
    def from_name(cls, name: str) -> "EnhancerSpec":
        try:
            variant, width, hidden = VARIANTS[name]
        except KeyError:
            raise SpecError(f"unknown enhancer {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(variant, width, hidden)


def _values(x):
    return x.values if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.float64)


def compute_irm(S, N) -> np.ndarray:
    """Ideal ratio mask ``sqrt(S / (S + N))`` from energy spectrograms; 0/0 gives 0."""
    if isinstance(S, Spectrogram) and isinstance(N, Spectrogram) and S.domain != N.domain:
        raise MaskError(f"domain mismatch: {S.domain} vs {N.domain}")
    s, n = _values(S), _values(N)
    if s.shape != n.shape:
        raise MaskError(f"shape mismatch: {s.shape} vs {n.shape}")
    if (s < 0).any() or (n < 0).any():
        raise MaskError("energies must be nonnegative")
    total = s + n
    ratio = np.divide(s, total, out=np.zeros_like(s), where=total > 0)
    return np.sqrt(ratio)


def apply_mask(Y, mask) -> np.ndarray:
    y, m = _values(Y), np.asarray(mask, dtype=np.float64)
    if y.shape != m.shape:
        raise MaskError(f"shape mismatch: {y.shape} vs {m.shape}")
    return y * m


def mse_mask_loss(target, estimate) -> tuple[float, np.ndarray]:
    """Mean squared mask error and its gradient with respect to ``estimate``.

    The per-utterance loss averages over frames and bins; a leading batch
    axis is averaged as well.
    """
    m, mh = np.asarray(target, dtype=np.float64), np.asarray(estimate, dtype=np.float64)
    if m.shape != mh.shape:
        raise MaskError(f"shape mismatch: {m.shape} vs {mh.shape}")
    diff = mh - m
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _cbr(name, cin, cout, kernel, stride, pad):
    return [
        LayerSpec("conv", name, cin, cout, kernel, stride, pad),
        LayerSpec("batchnorm", f"{name}_bn", cout),
        LayerSpec("activation", f"{name}_relu", activation="relu"),
    ]


def _dbr(name, cin, cout, kernel, stride, crop):
    return [
        LayerSpec("deconv", name, cin, cout, kernel, stride, crop),
        LayerSpec("batchnorm", f"{name}_bn", cout),
        LayerSpec("activation", f"{name}_lrelu", activation="lrelu"),
    ]


def _front(bins, multiple):
    layers = [
        LayerSpec("log", "log_in", options={"floor": LOG_FLOOR}),
        LayerSpec("batchnorm", "norm_in", bins, options={"affine": False}),
    ]
    if multiple > 1:
        layers.append(LayerSpec("pad", "pad_time", options={"multiple": multiple}))
    return layers


def _bottleneck(features, channels, h):
    return [
        LayerSpec("reshape", "reshape_1", options={"mode": "sequence"}),
        LayerSpec("bilstm", "bilstm", features, h),
        LayerSpec("fc", "fc", 2 * h, features),
        LayerSpec("batchnorm", "fc_bn", features),
        LayerSpec("activation", "fc_relu", activation="relu"),
        LayerSpec("reshape", "reshape_2", out_channels=channels, options={"mode": "channels"}),
    ]


def _tail():
    return [
        LayerSpec("conv", "conv_out", kernel=(3, 3), padding=(1, 1, 1, 1)),
        LayerSpec("activation", "sigmoid", activation="sigmoid"),
        LayerSpec("reshape", "reshape_3", options={"mode": "squeeze"}),
        LayerSpec("crop", "crop_time"),
    ]


def _skip(name, source):
    return LayerSpec("concat-skip", name, source=source)


def _pow_crn(f, h):
    layers = _front(N_BINS, 16)
    layers.append(LayerSpec("reshape", "reshape_in", options={"mode": "image"}))
    layers += _cbr("conv_1", 1, f, (8, 8), (4, 4), (2, 2, 2, 2))
    skip_1 = len(layers)
    layers += _cbr("conv_2", f, f, (8, 8), (4, 4), (2, 2, 2, 2))
    skip_2 = len(layers)
    layers += _bottleneck(15 * f, f, h)
    layers.append(_skip("skip_2", skip_2))
    # one extra frequency tap on deconv_2; see README "Footprint"
    layers += _dbr("deconv_2", 2 * f, f, (8, 9), (4, 4), (2, 2, 2, 3))
    layers.append(_skip("skip_1", skip_1))
    layers += _dbr("deconv_1", 2 * f, f, (9, 9), (4, 4), (2, 3, 2, 2))
    tail = _tail()
    tail[0].in_channels, tail[0].out_channels = f, 1
    return layers + tail


def _mel_crn(f, h):
    layers = _front(N_MELS, 4)
    layers.append(LayerSpec("reshape", "reshape_in", options={"mode": "image"}))
    layers += _cbr("conv_1", 1, f, (4, 4), (2, 2), (1, 1, 1, 1))
    skip_1 = len(layers)
    layers += _cbr("conv_2", f, 2 * f, (4, 4), (2, 2), (1, 1, 1, 1))
    skip_2 = len(layers)
    layers += _cbr("conv_3", 2 * f, 4 * f, (3, 4), (1, 2), (1, 1, 1, 1))
    skip_3 = len(layers)
    layers += _bottleneck(20 * f, 4 * f, h)
    layers.append(_skip("skip_3", skip_3))
    layers += _dbr("deconv_3", 8 * f, 2 * f, (3, 4), (1, 2), (1, 1, 1, 1))
    layers.append(_skip("skip_2", skip_2))
    layers += _dbr("deconv_2", 4 * f, f, (4, 4), (2, 2), (1, 1, 1, 1))
    layers.append(_skip("skip_1", skip_1))
    # one extra frequency tap on deconv_1; see README "Footprint"
    layers += _dbr("deconv_1", 2 * f, f, (4, 5), (2, 2), (1, 1, 1, 2))
    tail = _tail()
    tail[0].in_channels, tail[0].out_channels = f, 1
    return layers + tail


def build_enhancer(spec: EnhancerSpec) -> GraphSpec:
    """GraphSpec mapping a ``(frames, bins)`` energy spectrogram to a mask of the same shape.

    The network sees log energies normalised per bin (a parameter-free
    batchnorm).  CRN variants pad the time axis to a multiple of their total
    time stride and crop the mask back.
    """
    if spec.variant == "BiLSTM":
        return build_bilstm_enhancer()
    if spec.variant == "PowCRN":
        layers = _pow_crn(spec.width, spec.hidden)
    else:
        layers = _mel_crn(spec.width, spec.hidden)
    return GraphSpec(f"{spec.variant}{spec.width}", spec.bins, layers)


def build_bilstm_enhancer() -> GraphSpec:
    u = BILSTM_UNITS
    layers = _front(N_BINS, 1) + [
        LayerSpec("bilstm", "bilstm_1", N_BINS, u),
        LayerSpec("bilstm", "bilstm_2", 2 * u, u),
        LayerSpec("fc", "projection", 2 * u, N_BINS),
        LayerSpec("activation", "sigmoid", activation="sigmoid"),
    ]
    return GraphSpec("BiLSTM", N_BINS, layers)


def identity_enhancer(domain: str) -> GraphSpec:
    """A one-conv stub whose mask is exactly 1 once its weight is 0 and bias large."""
    bins = N_MELS if domain == "mel" else N_BINS
    return GraphSpec(
        f"identity-{domain}",
        bins,
        [
            LayerSpec("reshape", "reshape_in", options={"mode": "image"}),
            LayerSpec("conv", "conv_out", 1, 1),
            LayerSpec("activation", "sigmoid", activation="sigmoid"),
            LayerSpec("reshape", "reshape_3", options={"mode": "squeeze"}),
        ],
    )
