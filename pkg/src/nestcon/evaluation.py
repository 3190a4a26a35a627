"""Linear probing, kNN, classification and ranking metrics on frozen embeddings."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EvalError, ProbeError
from .iohelpers import atomic_write_text
from .numerics import normalize_rows
from .retrieval import extrapolate, truth_ranks
from .trainer import adamw_update

MODALITIES = ("image", "lesion", "patient")


@dataclass
class FeatureSet:
    X: np.ndarray  # (n, D * #modalities)
    labels: np.ndarray
    labeled: np.ndarray  # bool; unlabeled rows are skipped when fitting
    flags: tuple = ("image", "lesion", "patient")
    num_classes: int = 2

    def __post_init__(self):
        if self.X.shape[0] != self.labels.shape[0] or self.labeled.shape != self.labels.shape:
            raise ConfigError("features, labels and labeled mask must have the same length")


def _check_flags(flags):
    flags = tuple(flags)
    if not flags:
        raise ConfigError("at least one modality must be selected")
    bad = set(flags) - set(MODALITIES)
    if bad:
        raise ConfigError(f"unknown modalities {sorted(bad)}")
    return tuple(m for m in MODALITIES if m in flags)


def build_features(model, dataset, flags=MODALITIES, pools=None, variant="I2L2P"):
    """Concatenate the selected frozen embeddings for every lesion of ``dataset``.

    Nested models provide image ``w``, lesion ``h`` and patient ``x`` (the
    owner's embedding, repeated per lesion). With ``pools`` the metadata
    modalities are replaced by retrieved pseudo embeddings. Flat models map
    ``lesion`` to their joint metadata embedding and have no patient modality.
    """
    flags = _check_flags(flags)
    image_only = flags == ("image",)
    emb = model.embed(dataset, image_only=image_only or pools is not None)
    parts = {"image": emb["W"]}
    if image_only:
        pass
    elif model.config.architecture == "flat":
        if "patient" in flags:
            raise ConfigError("flat models have no patient-level embedding")
        parts["lesion"] = emb["G"]
    elif pools is not None:
        ext = extrapolate(emb["W"], pools, model.fusion, variant)
        parts["lesion"], parts["patient"] = ext.h, ext.x
    else:
        parts["lesion"] = emb["H"]
        parts["patient"] = emb["X"][emb["owner"]]
    X = np.concatenate([parts[f] for f in flags], axis=1)
    labeled = np.array([les.labeled for _, les in dataset.lesions()], dtype=bool)
    return FeatureSet(X, dataset.labels(), labeled, flags, dataset.schema.num_classes)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float  # percent
    balanced_accuracy: float  # percent
    f1: float  # positive-class F1 for binary tasks, NaN otherwise
    f1_macro: float
    f1_weighted: float
    auc: float

    def as_dict(self):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def binary_auc(labels, scores):
    """Probability a positive outscores a negative, ties counting one half (Mann-Whitney)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    # midranks are half-integers, so the sum and U are exact in float64
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(labels, predictions, scores, num_classes=None) -> MetricsReport:
    """Accuracy, balanced accuracy, F1 variants and AUC.

    ``scores`` is the positive-class score for binary tasks or an ``(n, C)``
    matrix for multiclass ones (one-vs-rest AUC, macro averaged). Metrics that
    are undefined for the given labels are NaN.
    """
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if y.shape != p.shape or y.ndim != 1:
        raise EvalError("labels and predictions must be aligned 1-D arrays")
    if y.size == 0:
        raise EvalError("no samples")
    C = int(num_classes) if num_classes is not None else int(max(y.max(), p.max()) + 1)
    C = max(C, 2)
    acc = 100.0 * float(np.mean(y == p))
    present = [c for c in range(C) if np.any(y == c)]
    recalls = [float(np.mean(p[y == c] == c)) for c in present]
    ba = 100.0 * float(np.mean(recalls)) if len(present) >= 2 else float("nan")

    f1s, supports = {}, {}
    for c in range(C):
        tp = int(np.sum((y == c) & (p == c)))
        fp = int(np.sum((y != c) & (p == c)))
        fn = int(np.sum((y == c) & (p != c)))
        if tp + fp + fn > 0:
            f1s[c] = 2.0 * tp / (2.0 * tp + fp + fn)
            supports[c] = int(np.sum(y == c))
    f1_bin = f1s.get(1, float("nan")) if C == 2 else float("nan")
    f1_macro = float(np.mean(list(f1s.values()))) if f1s else float("nan")
    total = sum(supports.values())
    f1_weighted = sum(f1s[c] * supports[c] for c in f1s) / total if total else float("nan")

    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        if C != 2:
            raise EvalError("multiclass AUC needs an (n, C) score matrix")
        auc = binary_auc(y, s)
    else:
        if s.shape != (y.size, C):
            raise EvalError(f"score matrix shape {s.shape} != ({y.size}, {C})")
        if C == 2:
            auc = binary_auc(y, s[:, 1])
        else:
            per = [binary_auc((y == c).astype(np.int64), s[:, c]) for c in range(C)]
            per = [a for a in per if not math.isnan(a)]
            auc = float(np.mean(per)) if per else float("nan")
    return MetricsReport(acc, ba, f1_bin, f1_macro, float(f1_weighted), auc)


# ---------------------------------------------------------------------------
# linear probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 150
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    standardize: bool = True


@dataclass
class ProbeWeights:
    weight: np.ndarray  # (F, 1) for binary, (F, C) for multiclass
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def logits(self, X):
        return ((X - self.mean) / self.std) @ self.weight + self.bias


def _predict(probe, X, C):
    z = probe.logits(X)
    if C == 2:
        prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
        return (prob >= 0.5).astype(np.int64), prob
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    return prob.argmax(axis=1), prob


def linear_probe(train: FeatureSet, evalset: FeatureSet, cfg: ProbeConfig = ProbeConfig()):
    """Full-batch AdamW on BCE (binary) or softmax cross-entropy (multiclass).

    Features are standardized with statistics of the labelled training rows.
    Returns ``(weights, MetricsReport on evalset)``.
    """
    X = train.X[train.labeled]
    y = train.labels[train.labeled]
    C = train.num_classes
    if np.unique(y).size < 2:
        raise ProbeError("linear probe needs at least two classes in the labelled training rows")
    if evalset.X.shape[1] != X.shape[1]:
        raise ProbeError("train and eval feature widths differ")
    mean = X.mean(axis=0) if cfg.standardize else np.zeros(X.shape[1])
    std = X.std(axis=0) if cfg.standardize else np.ones(X.shape[1])
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    k = 1 if C == 2 else C
    w, b = np.zeros((X.shape[1], k)), np.zeros(k)
    mw, vw, mb, vb = np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b)
    target = y[:, None].astype(np.float64) if C == 2 else np.eye(C)[y]
    n = X.shape[0]
    for t in range(1, cfg.epochs + 1):
        z = Xs @ w + b
        if C == 2:
            prob = 1.0 / (1.0 + np.exp(-z))
        else:
            e = np.exp(z - z.max(axis=1, keepdims=True))
            prob = e / e.sum(axis=1, keepdims=True)
        dz = (prob - target) / n
        adamw_update(w, Xs.T @ dz, mw, vw, t, cfg)
        adamw_update(b, dz.sum(axis=0), mb, vb, t, cfg)
    probe = ProbeWeights(w, b, mean, std)
    pred, prob = _predict(probe, evalset.X, C)
    return probe, compute_metrics(evalset.labels, pred, prob, C)


# ---------------------------------------------------------------------------
# kNN


def knn_classify(train: FeatureSet, evalset: FeatureSet, k=20):
    """Cosine-distance kNN with majority vote.

    Neighbours are ordered by distance, then train index. Vote ties go to the
    class with the smaller summed neighbour distance, then the lower class
    index. Scores are per-class neighbour fractions.
    """
    X = train.X[train.labeled]
    y = train.labels[train.labeled]
    if X.shape[0] == 0:
        raise EvalError("empty kNN training set")
    if not 1 <= k <= X.shape[0]:
        raise ConfigError(f"k must be in [1, {X.shape[0]}]")
    C = train.num_classes
    Tn, _ = normalize_rows(X)
    Qn, _ = normalize_rows(evalset.X)
    dist = 1.0 - np.clip(Qn @ Tn.T, -1.0, 1.0)
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nd = np.take_along_axis(dist, nbr, axis=1)
    ny = y[nbr]
    counts = np.stack([(ny == c).sum(axis=1) for c in range(C)], axis=1)
    dsum = np.stack([np.where(ny == c, nd, 0.0).sum(axis=1) for c in range(C)], axis=1)
    pred = np.empty(len(nbr), dtype=np.int64)
    for i in range(len(nbr)):
        best = counts[i].max()
        cands = [c for c in range(C) if counts[i, c] == best]
        pred[i] = min(cands, key=lambda c: (dsum[i, c], c))
    frac = counts / k
    scores = frac[:, 1] if C == 2 else frac
    return pred, compute_metrics(evalset.labels, pred, scores, C)


# ---------------------------------------------------------------------------
# ranking metrics


@dataclass
class RankingReport:
    recall: dict  # k -> percent
    ndcg: dict  # k -> [0, 1]
    mAP: float
    ranks: np.ndarray = field(repr=False)

    def as_dict(self):
        return {"recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()}, "mAP": self.mAP}


def metrics_from_ranks(ranks, ks=(1, 5, 10)):
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise EvalError("no queries")
    recall = {k: 100.0 * float(np.mean(r <= k)) for k in ks}
    gain = 1.0 / np.log2(1.0 + r)
    ndcg = {k: float(np.mean(np.where(r <= k, gain, 0.0))) for k in ks}
    return RankingReport(recall, ndcg, float(np.mean(1.0 / r)), np.asarray(ranks))


def ranking_metrics(rankings, truths, ks=(1, 5, 10)):
    """R@k, NDCG@k and mAP for queries with a single relevant item each."""
    ranks = []
    for q, (ranked, truth) in enumerate(zip(rankings, truths)):
        ranked = list(ranked)
        try:
            ranks.append(ranked.index(truth) + 1)
        except ValueError:
            raise EvalError(f"query {q}: truth id {truth!r} missing from its ranking") from None
    if len(ranks) != len(truths):
        raise EvalError("rankings and truths differ in length")
    return metrics_from_ranks(ranks, ks)


def eval_crossmodal(model, dataset, direction="img2meta", ks=(1, 5, 10)):
    """Instance-level retrieval between lesion images and lesion metadata.

    Each query's ground truth is the other modality of the same lesion.
    Returns ``(RankingReport, lesion ids)``.
    """
    emb = model.embed(dataset)
    meta = emb["H"] if model.config.architecture == "nested" else emb["G"]
    if direction == "img2meta":
        Q, Cd = emb["W"], meta
    elif direction == "meta2img":
        Q, Cd = meta, emb["W"]
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    ids = [les.lesion_id for _, les in dataset.lesions()]
    Qn, _ = normalize_rows(Q)
    Cn, _ = normalize_rows(Cd)
    sims = np.clip(Qn @ Cn.T, -1.0, 1.0)
    ranks = truth_ranks(sims, np.arange(len(ids)))
    return metrics_from_ranks(ranks, ks), ids


def write_rankings(report: RankingReport, ids, path):
    lines = ["query_id,rank_of_truth"] + [f"{i},{int(r)}" for i, r in zip(ids, report.ranks)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_report(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
