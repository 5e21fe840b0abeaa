"""Accuracy, FAR/FRR curves, AUC, EER and the consolidated evaluation report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import MULTIPLY_CONVENTION, count_multiplies, count_params
from .kws import KEYWORDS, LABELS, keyword_score

AUC_CONVENTION = (
    "trapezoidal area under FRR (y) versus FAR (x); thresholds are the distinct scores plus a "
    "reject-all point; the curve is closed with (0, max FRR) and (max FAR, 0); lower is better"
)
REPORT_FRAMES = 98


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    is_keyword: bool
    predicted: int
    true: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise MetricError(f"non-finite score {self.score}")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    far: float
    frr: float


def accuracy(trials) -> float:
    trials = list(trials)
    if not trials:
        raise MetricError("accuracy of an empty trial set")
    return sum(t.predicted == t.true for t in trials) / len(trials)


def roc(trials) -> list[RocPoint]:
    """One point per distinct score (accept score >= threshold), plus a reject-all point at +inf.

    Points are ordered by increasing threshold, so FAR falls and FRR rises.
    """
    trials = list(trials)
    scores = np.array([t.score for t in trials], dtype=np.float64)
    kw = np.array([t.is_keyword for t in trials], dtype=bool)
    n_kw, n_non = int(kw.sum()), int((~kw).sum())
    if n_kw == 0 or n_non == 0:
        raise MetricError("ROC needs both keyword and non-keyword trials")
    kw_scores = np.sort(scores[kw])
    non_scores = np.sort(scores[~kw])
    thresholds = np.append(np.unique(scores), np.inf)
    # counts of scores strictly below each threshold
    kw_below = np.searchsorted(kw_scores, thresholds, side="left")
    non_below = np.searchsorted(non_scores, thresholds, side="left")
    return [
        RocPoint(float(th), float((n_non - nb) / n_non), float(kb / n_kw))
        for th, kb, nb in zip(thresholds, kw_below, non_below)
    ]


def _curve(points: list[RocPoint]) -> tuple[np.ndarray, np.ndarray]:
    far = np.array([p.far for p in points])
    frr = np.array([p.frr for p in points])
    far = np.concatenate([[0.0], far, [far.max()]])
    frr = np.concatenate([[frr.max()], frr, [0.0]])
    order = np.lexsort((-frr, far))
    return far[order], frr[order]


def auc(points: list[RocPoint]) -> float:
    if not points:
        raise MetricError("empty ROC")
    far, frr = _curve(points)
    return float(np.sum(np.diff(far) * (frr[1:] + frr[:-1]) / 2.0))


def eer(points: list[RocPoint]) -> float:
    """FAR where FAR = FRR, linearly interpolated between the bracketing thresholds."""
    if not points:
        raise MetricError("empty ROC")
    pts = sorted(points, key=lambda p: p.threshold)
    for a, b in zip(pts, pts[1:]):
        da, db = a.far - a.frr, b.far - b.frr
        if da >= 0 >= db:
            if da == db:
                return a.far
            t = da / (da - db)
            return float(a.far + t * (b.far - a.far))
    # FAR - FRR never changes sign (cannot happen with the reject-all point)
    return float(min((abs(p.far - p.frr), p.far) for p in pts)[1])


def frr_at_far(points: list[RocPoint], max_far: float = 0.02) -> float:
    return float(min(p.frr for p in points if p.far <= max_far))


def trials_from_posteriors(posteriors: np.ndarray, labels) -> list[ScoredTrial]:
    labels = np.asarray(labels)
    scores = keyword_score(posteriors)
    preds = np.argmax(posteriors, axis=1)
    n_kw = len(KEYWORDS)
    return [ScoredTrial(float(s), bool(y < n_kw), int(p), int(y)) for s, p, y in zip(scores, preds, labels)]


def confusion(trials, n_classes: int = len(LABELS)) -> list[list[int]]:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t in trials:
        m[t.true, t.predicted] += 1
    return m.tolist()


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    eer: float
    frr_at_far_2pct: float
    roc: list[RocPoint]
    confusion: list[list[int]]
    footprint: dict[str, dict[str, int]]
    n_trials: int
    strategy: str = ""
    labels: list[str] = field(default_factory=lambda: list(LABELS))
    auc_convention: str = AUC_CONVENTION
    footprint_frames: int = REPORT_FRAMES
    multiply_convention: str = MULTIPLY_CONVENTION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = [[p.threshold, p.far, p.frr] for p in self.roc]
        return d

    def to_json(self) -> str:
        # the reject-all threshold is written as the JSON extension Infinity
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["roc"] = [RocPoint(*p) for p in d["roc"]]
        return cls(**d)

    def write(self, report_path, roc_path=None) -> None:
        Path(report_path).write_text(self.to_json() + "\n")
        if roc_path is not None:
            write_roc_csv(roc_path, self.roc)


def write_roc_csv(path, points: list[RocPoint]) -> None:
    lines = ["threshold,far,frr"] + [f"{p.threshold!r},{p.far!r},{p.frr!r}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def footprint(checkpoint) -> dict[str, dict[str, int]]:
    out = {}
    for name in ("enhancer", "kws"):
        g = getattr(checkpoint, name)
        if g is not None:
            out[name] = {
                "params": count_params(g.spec),
                "multiplies": count_multiplies(g.spec, REPORT_FRAMES),
            }
    return out


def make_report(checkpoint, split) -> EvalReport:
    """Score every utterance of ``split`` (a trainer ``SplitData``) with the checkpoint's inference graph."""
    from .trainer import ConfigError, evaluation_graph, predict

    graph, domain = evaluation_graph(checkpoint)
    spectra = split.spectra(domain)
    if spectra.shape[-1] != graph.spec.input_bins:
        raise ConfigError(f"features have {spectra.shape[-1]} bins, graph expects {graph.spec.input_bins}")
    trials = trials_from_posteriors(predict(graph, spectra), split.labels)
    points = roc(trials)
    return EvalReport(
        accuracy=accuracy(trials),
        auc=auc(points),
        eer=eer(points),
        frr_at_far_2pct=frr_at_far(points, 0.02),
        roc=points,
        confusion=confusion(trials),
        footprint=footprint(checkpoint),
        n_trials=len(trials),
        strategy=checkpoint.config.strategy,
    )
