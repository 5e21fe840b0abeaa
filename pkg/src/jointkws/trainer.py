"""Training strategies: multi-condition baseline, frozen and retrained enhancer front-ends, joint training."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import corpus as corpus_mod
from .dsp import ftb_layers, ftb_spec, mel_spectrogram, stft_power
from .engine import (
    AdamState,
    GraphSpec,
    LayerSpec,
    ModelGraph,
    SpecError,
    adam_step,
    load_bundle,
    save_bundle,
    shift_sources,
)
from .engine.layers import make_layer
from .enhancement import EnhancerSpec, build_enhancer, compute_irm, mse_mask_loss
from .kws import LABELS, build_kws, cross_entropy

STRATEGIES = ("baseline", "kws-frozen-enh", "retrain", "joint")
# fixed chunking for inference so batched results never depend on the caller
CHUNK = 64


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "baseline"
    enhancer: str | None = None
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    patience: int = 10
    snrs: list[float] = field(default_factory=lambda: list(corpus_mod.DEFAULT_SNRS))
    # enhancer pretraining
    enhancer_epochs: int = 50
    enhancer_lr: float | None = None
    # joint: start the classifier from scratch or from a multi-condition run
    kws_init: str = "fresh"
    # learning rate of that multi-condition run (default: lr)
    kws_lr: float | None = None
    # kws-frozen-enh: what the classifier is trained on
    frozen_kws_input: str = "noisy"
    # data: a corpus directory, or a synthetic corpus built in memory
    corpus_dir: str | None = None
    synth_seed: int = 0
    per_class: int = 200
    multiplicity: int = 1

    def validate(self) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.lr > 0 or any(r is not None and not r > 0 for r in (self.enhancer_lr, self.kws_lr)):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0 or self.enhancer_epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be nonnegative and patience positive")
        if self.strategy == "baseline" and self.enhancer is not None:
            raise ConfigError("the baseline strategy uses no enhancer")
        if self.strategy != "baseline":
            if self.enhancer is None:
                raise ConfigError(f"strategy {self.strategy!r} needs an enhancer")
            try:
                EnhancerSpec.from_name(self.enhancer)
            except SpecError as exc:
                raise ConfigError(str(exc)) from None
        if self.kws_init not in ("fresh", "pretrained"):
            raise ConfigError("kws_init must be 'fresh' or 'pretrained'")
        if self.frozen_kws_input not in ("noisy", "clean"):
            raise ConfigError("frozen_kws_input must be 'noisy' or 'clean'")
        if not self.snrs:
            raise ConfigError("snrs must not be empty")
        if self.per_class < 10 or self.multiplicity < 1:
            raise ConfigError("per_class must be >= 10 and multiplicity >= 1")
        return self

    @property
    def domain(self) -> str:
        return EnhancerSpec.from_name(self.enhancer).domain if self.enhancer else "mel"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.snrs = [float(s) for s in cfg.snrs]
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_json(text)


@dataclass
class Checkpoint:
    """Best-validation model(s) plus the run's config and history."""

    config: TrainConfig
    kws: ModelGraph | None = None
    enhancer: ModelGraph | None = None
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    initial: dict = field(default_factory=dict)
    labels: tuple[str, ...] = LABELS

    @property
    def val_accuracy_history(self) -> list[float]:
        return [h["val_accuracy"] for h in self.history if "val_accuracy" in h]

    def save(self, path) -> None:
        graphs = {}
        if self.enhancer is not None:
            graphs["enhancer"] = self.enhancer
        if self.kws is not None:
            graphs["kws"] = self.kws
        meta = {
            "config": asdict(self.config),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "initial": self.initial,
            "labels": list(self.labels),
        }
        save_bundle(path, graphs, None, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        graphs, _, meta = load_bundle(path)
        return cls(
            config=TrainConfig.from_dict(meta["config"]),
            kws=graphs.get("kws"),
            enhancer=graphs.get("enhancer"),
            history=meta["history"],
            best_epoch=meta["best_epoch"],
            initial=meta["initial"],
            labels=tuple(meta["labels"]),
        )


# --- data --------------------------------------------------------------------


class SplitData:
    """Utterances of one split with lazily computed, cached spectra."""

    def __init__(self, utterances: list[corpus_mod.Utterance]):
        self.utterances = utterances
        self.labels = np.array([u.label for u in utterances], dtype=np.int64)
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.utterances)

    def spectra(self, domain: str, which: str = "noisy") -> np.ndarray:
        """``(N, frames, bins)`` energies of the noisy mixture or one of its parts."""
        key = (domain, which)
        if key not in self._cache:
            rows = []
            for u in self.utterances:
                samples = {"noisy": u.waveform.samples, "speech": u.speech_part, "noise": u.noise_part}[which]
                p = stft_power(corpus_mod.Waveform(samples))
                rows.append(p.values if domain == "power" else mel_spectrogram(p).values)
            self._cache[key] = np.stack(rows)
        return self._cache[key]

    def irm(self, domain: str) -> np.ndarray:
        key = (domain, "irm")
        if key not in self._cache:
            self._cache[key] = compute_irm(self.spectra(domain, "speech"), self.spectra(domain, "noise"))
        return self._cache[key]


def prepare_data(cfg: TrainConfig) -> dict[str, SplitData]:
    """Build (or read) the corpus, split it 8:1:1 per class and mix every utterance once per multiplicity."""
    if cfg.corpus_dir:
        synth, rows = corpus_mod.read_corpus(cfg.corpus_dir)
    else:
        synth = corpus_mod.synth_corpus(cfg.synth_seed, cfg.per_class)
        split = corpus_mod.make_split(
            [u.source_id for u in synth.utterances], [u.label for u in synth.utterances], cfg.synth_seed
        )
        rows = corpus_mod.plan_mixes(synth.utterances, synth.noises, split, cfg.snrs, cfg.synth_seed, cfg.multiplicity)
    mixed = corpus_mod.realise(rows, synth.utterances, synth.noises)
    out = {}
    for name in ("train", "validation", "test"):
        out[name] = SplitData([u for u, r in zip(mixed, rows) if r.split == name])
    if not len(out["train"]) or not len(out["validation"]):
        raise ConfigError("corpus has an empty train or validation split")
    return out


def corpus_rows(cfg: TrainConfig) -> list[corpus_mod.ManifestRow]:
    if cfg.corpus_dir:
        return corpus_mod.read_manifest(Path(cfg.corpus_dir) / "manifest.tsv")
    synth = corpus_mod.synth_corpus(cfg.synth_seed, cfg.per_class)
    split = corpus_mod.make_split([u.source_id for u in synth.utterances], [u.label for u in synth.utterances], cfg.synth_seed)
    return corpus_mod.plan_mixes(synth.utterances, synth.noises, split, cfg.snrs, cfg.synth_seed, cfg.multiplicity)


# --- graphs ------------------------------------------------------------------


def new_enhancer(cfg: TrainConfig) -> ModelGraph:
    return ModelGraph(build_enhancer(EnhancerSpec.from_name(cfg.enhancer)), seed=[cfg.seed, 1])


def new_kws(cfg: TrainConfig) -> ModelGraph:
    return ModelGraph(build_kws(), seed=[cfg.seed, 2])


def joint_graph(enhancer: ModelGraph, kws: ModelGraph) -> ModelGraph:
    """enhancer -> mask * input -> feature transformation -> classifier, sharing layer objects."""
    domain = graph_domain(enhancer)
    ftb = ModelGraph(ftb_spec(domain))
    mul = LayerSpec("elemwise-mul", "apply_mask", source=0)
    specs = list(enhancer.spec.layers) + [mul] + ftb_layers(domain)
    specs += shift_sources(kws.spec.layers, len(specs))
    layers = enhancer.layers + [make_layer(mul)] + ftb.layers + kws.layers
    return ModelGraph(GraphSpec(f"joint-{enhancer.spec.name}", enhancer.spec.input_bins, specs), layers=layers)


def graph_domain(enhancer: ModelGraph) -> str:
    return "mel" if enhancer.spec.input_bins == ftb_spec("mel").input_bins else "power"


def clone(graph: ModelGraph) -> ModelGraph:
    """Independent copy with the same parameters, statistics and frozen flags."""
    out = ModelGraph(graph.spec, seed=None)
    out.load_state_dict(graph.state_dict())
    for a, b in zip(out.layers, graph.layers):
        a.frozen = b.frozen
    return out


def kws_features(spectra: np.ndarray, domain: str, enhancer: ModelGraph | None = None) -> np.ndarray:
    """MFCC of (optionally mask-enhanced) energies, computed in fixed chunks with frozen graphs."""
    ftb = ModelGraph(ftb_spec(domain))
    out = []
    for i in range(0, len(spectra), CHUNK):
        y = spectra[i : i + CHUNK]
        if enhancer is not None:
            y = y * enhancer.forward(y, "eval")
        out.append(ftb.forward(y, "eval"))
    if enhancer is not None:
        enhancer.release()
    return np.concatenate(out) if out else np.zeros((0,) + spectra.shape[1:2] + (40,))


def predict(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    out = np.concatenate([graph.forward(x[i : i + CHUNK], "eval") for i in range(0, len(x), CHUNK)])
    # inference caches of a chunk run to ~1 GB for the classifier; several graphs stay alive
    graph.release()
    return out


# --- generic loop ------------------------------------------------------------


Logger = Callable[[dict], None]


def _no_log(record: dict) -> None:
    pass


def jsonl_logger(path) -> Logger:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def log(record: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    return log


def _fit(
    cfg: TrainConfig,
    stage: str,
    graphs: dict[str, ModelGraph],
    n_train: int,
    step: Callable[[np.ndarray], float],
    evaluate: Callable[[], dict],
    score_key: str,
    higher_is_better: bool,
    epochs: int,
    lr: float,
    log: Logger,
) -> tuple[list[dict], int, dict]:
    """Mini-batch Adam over shuffled batches with best-validation selection.

    Returns the per-epoch history, the selected epoch (0 = untrained) and
    the initial evaluation.  The graphs are left holding the selected state.
    """
    adams = {name: AdamState(lr=lr) for name in graphs}
    initial = evaluate()
    log({"stage": stage, "epoch": 0, **initial})
    sign = 1.0 if higher_is_better else -1.0
    best_score, best_epoch = -np.inf, 0
    best_state = {name: g.state_dict() for name, g in graphs.items()}
    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        total, seen = 0.0, 0
        for b in range(0, n_train, cfg.batch_size):
            idx = np.sort(order[b : b + cfg.batch_size])
            for g in graphs.values():
                g.zero_grads()
            loss = step(idx)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"{stage}: non-finite loss {loss} at epoch {epoch}, batch {b // cfg.batch_size}")
            for name, g in graphs.items():
                adam_step(adams[name], g)
            total += loss * len(idx)
            seen += len(idx)
        record = {"epoch": epoch, "train_loss": total / seen, **evaluate()}
        history.append(record)
        log({"stage": stage, **record, "wall_time": time.perf_counter() - start})
        score = sign * record[score_key]
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = {name: g.state_dict() for name, g in graphs.items()}
        elif epoch - best_epoch >= cfg.patience:
            break
    for name, g in graphs.items():
        g.load_state_dict(best_state[name])
    return history, best_epoch, initial


def _classifier_eval(kws: ModelGraph, x: np.ndarray, y: np.ndarray) -> dict:
    p = predict(kws, x)
    loss, _ = cross_entropy(p, y)
    return {"val_loss": loss, "val_accuracy": float(np.mean(p.argmax(axis=1) == y))}


def _train_classifier(cfg, stage, kws, x_train, y_train, x_val, y_val, log) -> Checkpoint:
    def step(idx):
        p = kws.forward(x_train[idx], "train")
        loss, grad = cross_entropy(p, y_train[idx])
        kws.backward(grad, logits=True, input_grad=False)
        return loss

    history, best, initial = _fit(
        cfg, stage, {"kws": kws}, len(y_train), step,
        lambda: _classifier_eval(kws, x_val, y_val), "val_accuracy", True, cfg.epochs, cfg.lr, log,
    )
    return Checkpoint(cfg, kws=kws, history=history, best_epoch=best, initial=initial)


# --- strategies --------------------------------------------------------------


def pretrain_enhancer(cfg: TrainConfig, data: dict[str, SplitData], log: Logger = _no_log) -> Checkpoint:
    """Fit the mask estimator to ideal ratio masks with the mean squared error."""
    if cfg.enhancer is None:
        raise ConfigError("pretraining needs an enhancer variant")
    enh = new_enhancer(cfg)
    domain = cfg.domain
    train, val = data["train"], data["validation"]
    y_tr, m_tr = train.spectra(domain), train.irm(domain)
    y_val, m_val = val.spectra(domain), val.irm(domain)

    def step(idx):
        est = enh.forward(y_tr[idx], "train")
        loss, grad = mse_mask_loss(m_tr[idx], est)
        enh.backward(grad, input_grad=False)
        return loss

    def evaluate():
        return {"val_loss": mse_mask_loss(m_val, predict(enh, y_val))[0]}

    lr = cfg.enhancer_lr or cfg.lr
    history, best, initial = _fit(
        cfg, "pretrain-enh", {"enhancer": enh}, len(train), step, evaluate, "val_loss", False, cfg.enhancer_epochs, lr, log
    )
    return Checkpoint(cfg, enhancer=enh, history=history, best_epoch=best, initial=initial)


def train_kws_noisy(
    cfg: TrainConfig, data: dict[str, SplitData], enhancer: Checkpoint | None = None, log: Logger = _no_log
) -> Checkpoint:
    """Multi-condition training on noisy MFCC; ``kws-frozen-enh`` attaches a frozen front-end for evaluation."""
    enh = None
    if cfg.strategy == "kws-frozen-enh":
        if enhancer is None or enhancer.enhancer is None:
            raise ConfigError("kws-frozen-enh needs a pretrained enhancer checkpoint")
        enh = clone(enhancer.enhancer)
        enh.freeze()
    which = "speech" if cfg.strategy == "kws-frozen-enh" and cfg.frozen_kws_input == "clean" else "noisy"
    domain = cfg.domain
    train, val = data["train"], data["validation"]
    x_tr = kws_features(train.spectra(domain, which), domain)
    x_val = kws_features(val.spectra(domain, which), domain)
    ck = _train_classifier(cfg, "train-kws", new_kws(cfg), x_tr, train.labels, x_val, val.labels, log)
    ck.enhancer = enh
    return ck


def retrain_kws_enhanced(
    cfg: TrainConfig, data: dict[str, SplitData], enhancer: Checkpoint, log: Logger = _no_log
) -> Checkpoint:
    """Train the classifier on MFCC of spectra enhanced by a frozen mask estimator."""
    if enhancer.enhancer is None:
        raise ConfigError("retraining needs a pretrained enhancer")
    enh = clone(enhancer.enhancer)
    domain = cfg.domain
    if enh.spec.input_bins != ftb_spec(domain).input_bins:
        raise ConfigError(f"enhancer takes {enh.spec.input_bins} bins but the {domain} feature block needs {ftb_spec(domain).input_bins}")
    enh.freeze()
    train, val = data["train"], data["validation"]
    x_tr = kws_features(train.spectra(domain), domain, enh)
    x_val = kws_features(val.spectra(domain), domain, enh)
    ck = _train_classifier(cfg, "retrain-kws", new_kws(cfg), x_tr, train.labels, x_val, val.labels, log)
    ck.enhancer = enh
    return ck


def train_joint(
    cfg: TrainConfig,
    data: dict[str, SplitData],
    enhancer: Checkpoint,
    kws: Checkpoint | None = None,
    log: Logger = _no_log,
) -> Checkpoint:
    """Back-propagate the classifier's cross-entropy through the feature block and mask into the enhancer."""
    if enhancer.enhancer is None:
        raise ConfigError("joint training needs a pretrained enhancer")
    if cfg.kws_init == "pretrained" and (kws is None or kws.kws is None):
        raise ConfigError("kws_init='pretrained' needs a trained classifier checkpoint")
    enh = clone(enhancer.enhancer)
    enh.freeze(False)
    clf = clone(kws.kws) if cfg.kws_init == "pretrained" else new_kws(cfg)
    clf.freeze(False)
    graph = joint_graph(enh, clf)
    domain = cfg.domain
    train, val = data["train"], data["validation"]
    y_tr, y_val = train.spectra(domain), val.spectra(domain)

    def step(idx):
        p = graph.forward(y_tr[idx], "train")
        loss, grad = cross_entropy(p, train.labels[idx])
        graph.backward(grad, logits=True, input_grad=False)
        return loss

    history, best, initial = _fit(
        cfg, "joint", {"joint": graph}, len(train), step,
        lambda: _classifier_eval(graph, y_val, val.labels), "val_accuracy", True, cfg.epochs, cfg.lr, log,
    )
    return Checkpoint(cfg, kws=clf, enhancer=enh, history=history, best_epoch=best, initial=initial)


def evaluation_graph(ck: Checkpoint) -> tuple[ModelGraph, str]:
    """The inference graph of a checkpoint and the spectral domain it consumes."""
    if ck.kws is None:
        raise ConfigError("checkpoint holds no classifier")
    if ck.enhancer is None:
        domain = "mel"
        ftb = ModelGraph(ftb_spec(domain))
        specs = ftb_layers(domain) + list(ck.kws.spec.layers)
        return ModelGraph(GraphSpec("ftb+kws", ftb.spec.input_bins, specs), layers=ftb.layers + ck.kws.layers), domain
    return joint_graph(ck.enhancer, ck.kws), graph_domain(ck.enhancer)


def run_strategy(cfg: TrainConfig, data: dict[str, SplitData], log: Logger = _no_log) -> dict[str, Checkpoint]:
    """Every stage a strategy needs, in order; returns the checkpoints by stage name."""
    cfg.validate()
    out: dict[str, Checkpoint] = {}
    if cfg.strategy == "baseline":
        out["kws"] = train_kws_noisy(cfg, data, log=log)
        return out
    out["enhancer"] = pretrain_enhancer(cfg, data, log)
    if cfg.strategy == "kws-frozen-enh":
        out["kws"] = train_kws_noisy(cfg, data, out["enhancer"], log)
    elif cfg.strategy == "retrain":
        out["kws"] = retrain_kws_enhanced(cfg, data, out["enhancer"], log)
    else:
        pre = None
        if cfg.kws_init == "pretrained":
            base = TrainConfig(**{**asdict(cfg), "strategy": "baseline", "enhancer": None, "lr": cfg.kws_lr or cfg.lr})
            pre = train_kws_noisy(base, data, log=log)
            out["kws-pretrained"] = pre
        out["kws"] = train_joint(cfg, data, out["enhancer"], pre, log)
    return out
