"""Audio I/O, SNR-controlled mixing, dataset splits and a synthetic desk-scale corpus."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, Waveform
from .kws import KEYWORDS, LABELS, SILENCE, UNKNOWN

UTTERANCE_SAMPLES = SAMPLE_RATE
NOISE_SECONDS = 4
NOISE_TYPES = ("white", "pink", "babble", "hum")
NOISES_PER_TYPE = 2
DEFAULT_SNRS = (-3.0, 0.0, 3.0, 6.0)
MANIFEST_FIELDS = ("id", "label", "split", "snr", "noise_id", "offset", "seed")


class CorpusError(ValueError):
    pass


class UndefinedSNRError(CorpusError):
    """Speech or noise segment has zero power."""


def fit_length(samples: np.ndarray, n: int = UTTERANCE_SAMPLES) -> np.ndarray:
    """Zero-pad or crop to exactly ``n`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size >= n:
        return samples[:n].copy()
    return np.pad(samples, (0, n - samples.size))


@dataclass
class Utterance:
    """A one-second utterance.

    For mixtures, ``speech_part`` and ``noise_part`` hold the two scaled
    components; ``waveform`` is exactly their sum.
    """

    waveform: Waveform
    label: int
    source_id: str
    snr: str | float = "clean"
    noise_id: str | None = None
    speech_part: np.ndarray | None = field(default=None, repr=False)
    noise_part: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.waveform.samples.size != UTTERANCE_SAMPLES:
            self.waveform = Waveform(fit_length(self.waveform.samples), self.waveform.sample_rate)
        if not 0 <= self.label < len(LABELS):
            raise CorpusError(f"label {self.label} out of range")


@dataclass
class Mixture:
    noisy: Waveform
    speech_part: np.ndarray
    noise_part: np.ndarray
    gain: float
    scale: float


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_db(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(speech) / power(noise))


def mix(speech: Waveform, noise: Waveform, snr: float, offset: int) -> Mixture:
    """Add ``noise[offset:offset+len(speech)]`` scaled to ``snr`` dB below/above the speech.

    If the sum clips, both parts are scaled by one common factor so the
    peak is 1; the SNR is unaffected and the factor is returned.
    """
    s = speech.samples
    n_total = noise.samples.size
    if offset < 0 or offset + s.size > n_total:
        raise CorpusError(f"noise of {n_total} samples cannot cover {s.size} samples from offset {offset}")
    seg = noise.samples[offset : offset + s.size]
    ps, pn = power(s), power(seg)
    if ps == 0.0:
        raise UndefinedSNRError("speech is all zeros")
    if pn == 0.0:
        raise UndefinedSNRError("noise segment is all zeros")
    gain = float(np.sqrt(ps / (pn * 10.0 ** (snr / 10.0))))
    scaled = gain * seg
    peak = float(np.max(np.abs(s + scaled)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    sp = s * scale if scale != 1.0 else s.copy()
    npart = scaled * scale if scale != 1.0 else scaled
    return Mixture(Waveform(sp + npart, speech.sample_rate), sp, npart, gain, scale)


def mix_at_snr(speech: Waveform, noise: Waveform, snr: float, offset: int) -> Waveform:
    return mix(speech, noise, snr, offset).noisy


@dataclass
class SplitManifest:
    train: list[str]
    validation: list[str]
    test: list[str]

    def split_of(self) -> dict[str, str]:
        out = {}
        for name in ("train", "validation", "test"):
            for item in getattr(self, name):
                out[item] = name
        return out


def make_split(ids, labels, seed: int) -> SplitManifest:
    """Per-class shuffled 8:1:1 split (validation and test get round(n/10) each)."""
    ids = list(ids)
    labels = list(labels)
    if len(ids) != len(labels):
        raise CorpusError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise CorpusError("utterance ids are not unique")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in sorted(set(labels)):
        members = [i for i, lab in zip(ids, labels) if lab == label]
        if len(members) < 10:
            raise CorpusError(f"class {label!r} has {len(members)} items; need at least 10")
        order = rng.permutation(len(members))
        members = [members[k] for k in order]
        tenth = int(round(len(members) / 10))
        val += members[:tenth]
        test += members[tenth : 2 * tenth]
        train += members[2 * tenth :]
    return SplitManifest(train, val, test)


# --- WAV I/O -----------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Read 16-bit mono 16 kHz PCM, scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise CorpusError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected 16-bit samples, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise CorpusError(f"{path}: expected sample rate {SAMPLE_RATE} Hz, got {fh.getframerate()} Hz")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0)


def save_wav(path, w: Waveform) -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise CorpusError(f"only {SAMPLE_RATE} Hz audio is written, got {w.sample_rate}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# --- synthetic corpus --------------------------------------------------------

# fixed per-keyword recipes: each syllable is (f0 start, f0 end, duration s, F1, F2)
_TEMPLATE_SEED = 20190603


def _templates() -> list[list[tuple[float, float, float, float, float]]]:
    rng = np.random.default_rng(_TEMPLATE_SEED)
    f1_grid = np.linspace(300, 850, 5)
    f2_grid = np.linspace(1000, 2600, 6)
    pairs = [(f1, f2) for f1 in f1_grid for f2 in f2_grid]
    picks = rng.choice(len(pairs), size=2 * len(KEYWORDS), replace=False)
    out = []
    for k in range(len(KEYWORDS)):
        syllables = []
        for j in range(1 + k % 2):
            f1, f2 = pairs[picks[2 * k + j]]
            f0a = 110 + 18 * k
            f0b = f0a * (1.25 if (k + j) % 3 == 0 else 0.8 if (k + j) % 3 == 1 else 1.0)
            syllables.append((f0a, f0b, 0.22 + 0.03 * (k % 4), f1, f2))
        out.append(syllables)
    return out


TEMPLATES = _templates()


def _envelope(n: int) -> np.ndarray:
    ramp = max(1, int(0.02 * SAMPLE_RATE))
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r:
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = up
        env[n - r :] = up[::-1]
    return env


def _voice(f0a, f0b, dur, f1, f2, rng=None) -> np.ndarray:
    """Harmonic tone with a linear pitch glide and two formant-like resonances."""
    n = max(int(dur * SAMPLE_RATE), 16)
    f0 = np.linspace(f0a, f0b, n)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    out = np.zeros(n)
    for h in range(1, int(4000 // max(f0a, f0b)) + 1):
        fh = h * f0
        amp = np.exp(-0.5 * ((fh - f1) / 120.0) ** 2) + 0.7 * np.exp(-0.5 * ((fh - f2) / 180.0) ** 2) + 0.05
        out += amp * np.sin(h * phase)
    return out * _envelope(n)


def _place(parts: list[np.ndarray], onset: int, gap: int) -> np.ndarray:
    sig = np.zeros(UTTERANCE_SAMPLES)
    pos = onset
    for p in parts:
        end = min(pos + p.size, UTTERANCE_SAMPLES)
        if end > pos:
            sig[pos:end] += p[: end - pos]
        pos = end + gap
    return sig


def _normalise(sig: np.ndarray, rms: float) -> np.ndarray:
    return sig * (rms / np.sqrt(power(sig)))


def synth_keyword(k: int, rng: np.random.Generator) -> np.ndarray:
    pitch = rng.uniform(0.92, 1.08)
    stretch = rng.uniform(0.9, 1.1)
    parts = []
    for f0a, f0b, dur, f1, f2 in TEMPLATES[k]:
        form = rng.uniform(0.96, 1.04)
        parts.append(_voice(f0a * pitch, f0b * pitch, dur * stretch, f1 * form, f2 * form))
    onset = int(rng.uniform(0.05, 0.3) * SAMPLE_RATE)
    sig = _place(parts, onset, int(0.04 * SAMPLE_RATE))
    return _normalise(sig, rng.uniform(0.05, 0.1))


def synth_unknown(rng: np.random.Generator) -> np.ndarray:
    """Off-template speech-like pattern: random pitch, formants and syllable count."""
    parts = []
    for _ in range(int(rng.integers(1, 4))):
        f0a = rng.uniform(90, 320)
        parts.append(
            _voice(f0a, f0a * rng.uniform(0.7, 1.4), rng.uniform(0.12, 0.3), rng.uniform(250, 950), rng.uniform(900, 3000))
        )
    onset = int(rng.uniform(0.02, 0.3) * SAMPLE_RATE)
    sig = _place(parts, onset, int(rng.uniform(0.01, 0.08) * SAMPLE_RATE))
    return _normalise(sig, rng.uniform(0.05, 0.1))


def synth_silence(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(1e-4, 4e-4) * rng.standard_normal(UTTERANCE_SAMPLES)


def synth_noise(kind: str, rng: np.random.Generator, seconds: int = NOISE_SECONDS) -> np.ndarray:
    n = seconds * SAMPLE_RATE
    if kind == "white":
        sig = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spec /= np.sqrt(np.maximum(f, 20.0))
        sig = np.fft.irfft(spec, n)
    elif kind == "babble":
        sig = np.zeros(n)
        t = np.arange(n) / SAMPLE_RATE
        for _ in range(6):
            f0 = rng.uniform(90, 260)
            v = _voice(f0, f0 * rng.uniform(0.8, 1.2), seconds, rng.uniform(300, 900), rng.uniform(900, 2800))
            rate = rng.uniform(2.0, 5.0)
            gate = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
            sig += v[:n] * gate
        sig += 0.05 * rng.standard_normal(n)
    elif kind == "hum":
        t = np.arange(n) / SAMPLE_RATE
        base = rng.choice([50.0, 60.0])
        sig = sum((0.8**h) * np.sin(2 * np.pi * base * h * t + rng.uniform(0, 2 * np.pi)) for h in range(1, 20))
        sig = sig + 0.02 * rng.standard_normal(n)
    else:
        raise CorpusError(f"unknown noise type {kind!r}")
    return _normalise(sig, 0.1)


@dataclass
class SynthCorpus:
    utterances: list[Utterance]
    noises: dict[str, Waveform]


def synth_corpus(seed: int, per_class: int) -> SynthCorpus:
    """Clean utterances for all 12 classes plus a bank of synthetic noises; pure in its arguments."""
    if per_class < 10:
        raise CorpusError(f"per_class must be at least 10, got {per_class}")
    utterances = []
    for label, name in enumerate(LABELS):
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            if label == UNKNOWN:
                sig = synth_unknown(rng)
            elif label == SILENCE:
                sig = synth_silence(rng)
            else:
                sig = synth_keyword(label, rng)
            utterances.append(Utterance(Waveform(sig), label, f"{name}-{i:04d}"))
    noises = {}
    for t, kind in enumerate(NOISE_TYPES):
        for j in range(NOISES_PER_TYPE):
            rng = np.random.default_rng([seed, 1000 + t, j])
            noises[f"{kind}-{j}"] = Waveform(synth_noise(kind, rng))
    return SynthCorpus(utterances, noises)


# --- mixing plans and manifests ----------------------------------------------


@dataclass
class ManifestRow:
    id: str
    label: str
    split: str
    snr: str
    noise_id: str
    offset: int
    seed: int

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in MANIFEST_FIELDS}


def plan_mixes(
    utterances: list[Utterance],
    noises: dict[str, Waveform],
    split: SplitManifest,
    snrs=DEFAULT_SNRS,
    seed: int = 0,
    multiplicity: int = 1,
) -> list[ManifestRow]:
    """Draw (noise, SNR, offset) for each clean utterance ``multiplicity`` times."""
    if multiplicity < 1:
        raise CorpusError("multiplicity must be at least 1")
    where = split.split_of()
    noise_ids = sorted(noises)
    rows = []
    for u in utterances:
        if u.source_id not in where:
            continue
        for m in range(multiplicity):
            mix_seed = int(np.random.default_rng([seed, hash_id(u.source_id), m]).integers(2**31))
            rng = np.random.default_rng(mix_seed)
            nid = noise_ids[int(rng.integers(len(noise_ids)))]
            snr = float(snrs[int(rng.integers(len(snrs)))])
            offset = int(rng.integers(noises[nid].samples.size - UTTERANCE_SAMPLES + 1))
            rows.append(ManifestRow(u.source_id, LABELS[u.label], where[u.source_id], f"{snr:g}", nid, offset, mix_seed))
    return rows


def hash_id(text: str) -> int:
    """Stable (process-independent) 32-bit hash of an id."""
    h = 2166136261
    for b in text.encode():
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


def realise(rows: list[ManifestRow], utterances: list[Utterance], noises: dict[str, Waveform]) -> list[Utterance]:
    """Mix every manifest row into a noisy :class:`Utterance` carrying its components."""
    by_id = {u.source_id: u for u in utterances}
    out = []
    for r in rows:
        clean = by_id[r.id]
        if r.snr == "clean":
            s = clean.waveform.samples
            out.append(Utterance(clean.waveform, clean.label, r.id, "clean", None, s, np.zeros_like(s)))
            continue
        m = mix(clean.waveform, noises[r.noise_id], float(r.snr), r.offset)
        out.append(Utterance(m.noisy, clean.label, r.id, float(r.snr), r.noise_id, m.speech_part, m.noise_part))
    return out


def write_manifest(path, rows: list[ManifestRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.to_row())


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise CorpusError(f"{path}: manifest columns must be {MANIFEST_FIELDS}")
        rows = []
        for rec in reader:
            if rec["label"] not in LABELS:
                raise CorpusError(f"{path}: unknown label {rec['label']!r}")
            rows.append(
                ManifestRow(rec["id"], rec["label"], rec["split"], rec["snr"], rec["noise_id"], int(rec["offset"]), int(rec["seed"]))
            )
    return rows


def write_corpus(root, corpus: SynthCorpus, rows: list[ManifestRow]) -> None:
    """``clean/<id>.wav``, ``noise/<noise_id>.wav`` and ``manifest.tsv`` under ``root``."""
    root = Path(root)
    for u in corpus.utterances:
        save_wav(root / "clean" / f"{u.source_id}.wav", u.waveform)
    for nid, w in corpus.noises.items():
        save_wav(root / "noise" / f"{nid}.wav", w)
    write_manifest(root / "manifest.tsv", rows)


def read_corpus(root) -> tuple[SynthCorpus, list[ManifestRow]]:
    root = Path(root)
    rows = read_manifest(root / "manifest.tsv")
    labels = {}
    for r in rows:
        labels[r.id] = LABELS.index(r.label)
    utterances = [Utterance(load_wav(root / "clean" / f"{uid}.wav"), lab, uid) for uid, lab in labels.items()]
    noises = {p.stem: load_wav(p) for p in sorted((root / "noise").glob("*.wav"))}
    missing = {r.noise_id for r in rows if r.snr != "clean"} - set(noises)
    if missing:
        raise CorpusError(f"{root}: manifest references missing noises {sorted(missing)}")
    return SynthCorpus(utterances, noises), rows
