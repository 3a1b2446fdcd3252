"""Verification / identification metrics and the wall-clock timing benchmark.

Verification scores are *negated* cosine distances, so a higher score means a
more likely match and a pair is predicted positive when ``score > threshold``.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .dataset import GalleryTrial, ImageStore, VerificationPairSet
from .facerec import VictimModel, embed_batch, model_fingerprint

log = logging.getLogger(__name__)

Attack = Callable[[torch.Tensor], torch.Tensor]


class MetricError(ValueError):
    pass


def _as_bool_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        arr = arr == "positive"
    return arr.astype(bool)


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.all() or not labels.any():
        raise MetricError("both positive and negative labels are required")


def roc_auc(scores: Sequence[float], labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_bool_labels(labels)
    _check_two_classes(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_candidates(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    if len(u) == 1:
        return u
    return (u[:-1] + u[1:]) / 2.0


def eer_threshold(scores: Sequence[float], labels) -> float:
    """Midpoint threshold minimizing |FPR - FNR|; ties go to the smaller threshold.

    FPR counts negatives with ``score > t``; FNR counts positives with ``score <= t``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_bool_labels(labels)
    _check_two_classes(labels)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    cand = _threshold_candidates(scores)
    fp = len(neg) - np.searchsorted(neg, cand, side="right")
    fn = np.searchsorted(pos, cand, side="right")
    # |fp/n_neg - fn/n_pos| compared exactly in integers
    gap = np.abs(fp * len(pos) - fn * len(neg))
    return float(cand[int(np.argmin(gap))])


def rates_at(scores, labels, threshold: float) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_bool_labels(labels)
    pred = scores > threshold
    fpr = float(pred[~labels].mean()) if (~labels).any() else 0.0
    fnr = float((~pred[labels]).mean()) if labels.any() else 0.0
    return fpr, fnr


@dataclass
class MetricsReport:
    v_auc: float = float("nan")
    v_acc: float = float("nan")
    recall_pos: float = float("nan")
    rank1_acc: float = float("nan")
    threshold: float = float("nan")  # cosine-distance threshold (match when distance < threshold)
    n_pairs: int = 0
    n_trials: int = 0
    timing: dict | None = None
    name: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        d = {k: (float("nan") if v is None and k in _FLOAT_FIELDS else v) for k, v in d.items()}
        return cls(**d)


_FLOAT_FIELDS = {"v_auc", "v_acc", "recall_pos", "rank1_acc", "threshold"}


@dataclass(frozen=True)
class Threshold:
    """Score-space EER threshold tied to the model it was computed on."""

    value: float
    model_fingerprint: str

    @property
    def distance(self) -> float:
        return -self.value


def embedding_distance(emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
    """Cosine distance of unit rows in 64-bit, as ``||a - b||^2 / 2`` (exactly 0 for equal rows)."""
    diff = emb_a.double() - emb_b.double()
    return 0.5 * (diff * diff).sum(dim=-1)


def pair_scores(emb_a: torch.Tensor, emb_b: torch.Tensor) -> np.ndarray:
    """Negated cosine distance of matched rows."""
    return (-embedding_distance(emb_a, emb_b)).numpy()


def _embed_ids(model, store: ImageStore, ids: Sequence[str], attack: Attack | None, batch_size: int):
    uniq = list(dict.fromkeys(ids))
    out = {}
    for i in range(0, len(uniq), batch_size):
        chunk = uniq[i : i + batch_size]
        x = store.load(chunk)
        if attack is not None:
            x = attack(x)
        for k, e in zip(chunk, embed_batch(model, x)):
            out[k] = e
    return torch.stack([out[k] for k in ids])


def verification_scores(model: VictimModel, pairs: VerificationPairSet, store: ImageStore,
                        attack: Attack | None = None, batch_size: int = 128,
                        attacked_store: ImageStore | None = None) -> np.ndarray:
    """Scores for every pair; only the second image is perturbed.

    The perturbed image comes from ``attack`` applied on the fly, or is read
    from ``attacked_store`` (pre-generated adversarial images, same ids).
    """
    emb_a = _embed_ids(model, store, [p.image_id_a for p in pairs.pairs], None, batch_size)
    emb_b = _embed_ids(model, attacked_store or store, [p.image_id_b for p in pairs.pairs], attack, batch_size)
    return pair_scores(emb_a, emb_b)


def compute_threshold(model: VictimModel, pairs: VerificationPairSet, store: ImageStore) -> Threshold:
    scores = verification_scores(model, pairs, store)
    return Threshold(eer_threshold(scores, pairs.labels), model_fingerprint(model))


def verification_metrics(scores, labels, threshold: float) -> dict:
    labels = _as_bool_labels(labels)
    pred = np.asarray(scores) > threshold
    return {
        "v_auc": roc_auc(scores, labels),
        "v_acc": 100.0 * float((pred == labels).mean()),
        "recall_pos": 100.0 * float(pred[labels].mean()),
        "threshold": -float(threshold),
        "n_pairs": int(len(labels)),
    }


def verification_eval(model: VictimModel, pairs: VerificationPairSet, store: ImageStore,
                      threshold: Threshold, attack: Attack | None = None,
                      batch_size: int = 128, attacked_store: ImageStore | None = None) -> MetricsReport:
    """V-AUC, V-Acc and positive-pair recall at a clean, model-specific threshold."""
    if threshold.model_fingerprint != model_fingerprint(model):
        raise MetricError("threshold was computed on a different model")
    scores = verification_scores(model, pairs, store, attack, batch_size, attacked_store)
    return MetricsReport(**verification_metrics(scores, pairs.labels, threshold.value))


def rank1_correct(gallery_emb: torch.Tensor, probe_emb: torch.Tensor, true_index: int) -> bool:
    """Nearest gallery entry by cosine distance; ties resolve to the first index."""
    if len(gallery_emb) == 0:
        raise MetricError("empty gallery")
    dist = embedding_distance(gallery_emb, probe_emb.unsqueeze(0))
    best = int(torch.argmin(dist))
    if int((dist == dist[best]).sum()) > 1:
        log.warning("rank-1 tie between %d gallery entries; taking the first", int((dist == dist[best]).sum()))
    return best == true_index


def identification_eval(model: VictimModel, trials: Sequence[GalleryTrial], store: ImageStore,
                        attack: Attack | None = None, batch_size: int = 128,
                        attacked_store: ImageStore | None = None) -> float:
    """Rank-1 accuracy (percent); galleries stay clean, probes are attacked."""
    if not trials:
        raise MetricError("no identification trials")
    gallery_ids = [g for t in trials for g, _ in t.gallery]
    if not gallery_ids:
        raise MetricError("empty gallery")
    g_emb = dict(zip(gallery_ids, _embed_ids(model, store, gallery_ids, None, batch_size)))
    p_emb = _embed_ids(model, attacked_store or store, [t.probe_image_id for t in trials], attack, batch_size)
    hits = 0
    for t, pe in zip(trials, p_emb):
        ge = torch.stack([g_emb[g] for g, _ in t.gallery])
        true_index = [ident for _, ident in t.gallery].index(t.probe_identity)
        hits += rank1_correct(ge, pe, true_index)
    return 100.0 * hits / len(trials)


def evaluate_model(model: VictimModel, store: ImageStore, eval_pairs: VerificationPairSet,
                   trials: Sequence[GalleryTrial] | None, threshold: Threshold,
                   attack: Attack | None = None, name: str = "") -> MetricsReport:
    report = verification_eval(model, eval_pairs, store, threshold, attack)
    if trials:
        report.rank1_acc = identification_eval(model, trials, store, attack)
        report.n_trials = len(trials)
    report.name = name
    return report


def average_reports(reports: Sequence[MetricsReport], name: str = "") -> MetricsReport:
    """Model-set metrics: plain average over the members."""
    if not reports:
        raise MetricError("no reports to average")
    out = MetricsReport(name=name, n_pairs=reports[0].n_pairs, n_trials=reports[0].n_trials)
    for f in ("v_auc", "v_acc", "recall_pos", "rank1_acc", "threshold"):
        setattr(out, f, float(np.mean([getattr(r, f) for r in reports])))
    out.extra["members"] = len(reports)
    return out


def timing_bench(methods: Mapping[str, Callable[[torch.Tensor], object]], images: torch.Tensor,
                 reps: int = 5, warmup: int = 1) -> dict[str, float]:
    """Median wall-clock seconds per image for each method (warm-up runs excluded)."""
    out = {}
    n = len(images)
    for name, fn in methods.items():
        for _ in range(warmup):
            fn(images)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(images)
            times.append((time.perf_counter() - t0) / n)
        out[name] = statistics.median(times)
    return out
