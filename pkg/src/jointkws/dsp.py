"""Waveform to power/Mel/MFCC features and the differentiable feature transformation blocks.

Framing: 30 ms periodic-Hann windows every 10 ms at 16 kHz, 480-point FFT
(241 bins).  Mel: 40 HTK-style triangles between 20 Hz and 4 kHz, no area
normalisation.  MFCC: natural log with a 1e-10 floor, then the orthonormal
DCT-II keeping all 40 coefficients.  No pre-emphasis or dithering.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import GraphSpec, LayerSpec, ModelGraph, register_fixed_matrix
from .engine.layers import LOG_FLOOR, rows_matmul

SAMPLE_RATE = 16000
WIN_LENGTH = 480
HOP_LENGTH = 160
N_FFT = 480
N_BINS = N_FFT // 2 + 1
N_MELS = 40
F_MIN = 20.0
F_MAX = 4000.0
DOMAINS = ("power", "mel", "mfcc")


class FeatureError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FeatureError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("waveform contains non-finite samples")


@dataclass
class Spectrogram:
    values: np.ndarray
    domain: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.domain not in DOMAINS:
            raise FeatureError(f"unknown domain {self.domain!r}")
        if self.values.ndim != 2:
            raise FeatureError("spectrogram must be frames x bins")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def num_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


@lru_cache(maxsize=None)
def hann_window() -> np.ndarray:
    n = np.arange(WIN_LENGTH)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)
    w.flags.writeable = False
    return w


def stft_power(w: Waveform) -> Spectrogram:
    """|windowed DFT|^2 per frame, ``floor((N-480)/160)+1`` frames by 241 bins."""
    if w.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
    if w.samples.size < WIN_LENGTH:
        raise FeatureError(f"need at least {WIN_LENGTH} samples, got {w.samples.size}")
    frames = sliding_window_view(w.samples, WIN_LENGTH)[::HOP_LENGTH]
    spec = np.fft.rfft(frames * hann_window(), n=N_FFT, axis=-1)
    return Spectrogram(spec.real**2 + spec.imag**2, "power")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _filterbank() -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    freqs = np.arange(N_BINS) * SAMPLE_RATE / N_FFT
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down)).T
    fb.flags.writeable = False
    return fb


def mel_filterbank() -> np.ndarray:
    """241 x 40 triangular weights (bins x filters)."""
    return _filterbank()


@lru_cache(maxsize=None)
def _dct(n: int) -> np.ndarray:
    k = np.arange(n)[None, :]
    i = np.arange(n)[:, None]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[:, 0] = np.sqrt(1.0 / n)
    m.flags.writeable = False
    return m


def dct_matrix(n: int = N_MELS) -> np.ndarray:
    """Orthonormal DCT-II as an (inputs x coefficients) matrix: ``coeffs = x @ M``."""
    return _dct(n)


register_fixed_matrix("mel", mel_filterbank)
register_fixed_matrix("dct", dct_matrix)


def mel_spectrogram(p: Spectrogram) -> Spectrogram:
    if p.domain != "power":
        raise FeatureError(f"mel_spectrogram needs a power spectrogram, got {p.domain}")
    if p.bins != N_BINS:
        raise FeatureError(f"expected {N_BINS} bins, got {p.bins}")
    return Spectrogram(rows_matmul(p.values, mel_filterbank()), "mel")


def mfcc(m: Spectrogram) -> Spectrogram:
    if m.domain != "mel":
        raise FeatureError(f"mfcc needs a mel spectrogram, got {m.domain}")
    logm = np.log(np.maximum(m.values, LOG_FLOOR))
    return Spectrogram(rows_matmul(logm, dct_matrix()), "mfcc")


def ftb_layers(domain: str) -> list[LayerSpec]:
    """Feature transformation block: enhanced spectrogram -> MFCC as fixed layers."""
    tail = [
        LayerSpec("log", name="ftb_log", options={"floor": LOG_FLOOR}),
        LayerSpec("fixed-matmul", name="ftb_dct", options={"matrix": "dct"}),
    ]
    if domain == "mel":
        return tail
    if domain == "power":
        return [LayerSpec("fixed-matmul", name="ftb_mel", options={"matrix": "mel"})] + tail
    raise FeatureError(f"no feature transformation block for domain {domain!r}")


def ftb_spec(domain: str) -> GraphSpec:
    bins = N_MELS if domain == "mel" else N_BINS
    return GraphSpec(f"ftb-{domain}", bins, ftb_layers(domain))


def ftb_mel(x: np.ndarray) -> np.ndarray:
    """Mel energies ``(batch, frames, 40)`` -> MFCC through the graph layers."""
    return ModelGraph(ftb_spec("mel")).forward(x, "eval")


def ftb_pow(x: np.ndarray) -> np.ndarray:
    """Power spectra ``(batch, frames, 241)`` -> MFCC through the graph layers."""
    return ModelGraph(ftb_spec("power")).forward(x, "eval")


def features(w: Waveform, domain: str) -> Spectrogram:
    p = stft_power(w)
    if domain == "power":
        return p
    m = mel_spectrogram(p)
    return m if domain == "mel" else mfcc(m)


def write_feature_dump(path, spec: Spectrogram) -> None:
    """Text matrix with a one-line header ``# domain=<tag> T=<frames> F=<bins>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"domain={spec.domain} T={spec.frames} F={spec.bins}"
    np.savetxt(path, spec.values, fmt="%.17g", header=header)


def read_feature_dump(path) -> Spectrogram:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise FeatureError(f"{path}: missing feature header")
    fields = dict(item.split("=", 1) for item in first[2:].split())
    values = np.loadtxt(path, ndmin=2)
    t, f = int(fields["T"]), int(fields["F"])
    if values.shape != (t, f):
        raise FeatureError(f"{path}: header says {t}x{f}, body is {values.shape}")
    return Spectrogram(values, fields["domain"])
