"""Saliency metrics: AUC_Borji, AUC_Judd, NSS, CC, SIM, KLD.

All functions take 2-D numpy-compatible maps. ``pred`` is the predicted
saliency map; ``gt`` a ground-truth saliency map; ``fixation`` a binary mask.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError

KLD_EPS = 1e-7
BORJI_SPLITS = 100
BORJI_SEED = 0

METRIC_NAMES = ("AUC_Borji", "AUC_Judd", "NSS", "CC", "SIM", "KLD")
FIXATION_METRICS = ("AUC_Borji", "AUC_Judd", "NSS")
_ALIASES = {name.lower(): name for name in METRIC_NAMES}


def _as_map(x, name="map") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ContractError(f"{name} is empty")
    if not np.isfinite(a).all():
        raise ContractError(f"{name} contains non-finite values")
    return a


def _pair(pred, gt):
    p, g = _as_map(pred, "pred"), _as_map(gt, "gt")
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def _distribution(a, name):
    if (a < 0).any():
        raise UndefinedMetricError(f"{name} has negative values; cannot treat it as a distribution")
    total = a.sum()
    if total <= 0:
        raise UndefinedMetricError(f"{name} has zero mass")
    return a / total


def _fixations(pred, fixation):
    p = _as_map(pred, "pred")
    f = np.asarray(fixation).astype(bool)
    if f.shape != p.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs fixation {f.shape}")
    n_fix = int(f.sum())
    if n_fix == 0:
        raise UndefinedMetricError("fixation map has no fixations")
    if n_fix == f.size:
        raise UndefinedMetricError("fixation map has no non-fixated pixels")
    return p, f


def cc(pred, gt) -> float:
    """Pearson correlation between two maps."""
    p, g = _pair(pred, gt)
    p = p - p.mean()
    g = g - g.mean()
    sp, sg = np.sqrt((p * p).sum()), np.sqrt((g * g).sum())
    if sp == 0 or sg == 0:
        raise UndefinedMetricError("CC is undefined for a constant map")
    return float((p * g).sum() / (sp * sg))


def sim(pred, gt) -> float:
    """Histogram intersection of the two maps normalized to unit mass."""
    p, g = _pair(pred, gt)
    return float(np.minimum(_distribution(p, "pred"), _distribution(g, "gt")).sum())


def kld(pred, gt, eps: float = KLD_EPS) -> float:
    """KL divergence of ``gt`` from ``pred`` (both normalized to unit mass); lower is better."""
    p, g = _pair(pred, gt)
    p, g = _distribution(p, "pred"), _distribution(g, "gt")
    return float((g * np.log(g / (p + eps) + eps)).sum())


def nss(pred, fixation) -> float:
    """Mean z-scored prediction (population std) at fixated pixels."""
    p = _as_map(pred, "pred")
    f = np.asarray(fixation).astype(bool)
    if f.shape != p.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs fixation {f.shape}")
    if not f.any():
        raise UndefinedMetricError("fixation map has no fixations")
    std = p.std()
    if std == 0:
        raise UndefinedMetricError("NSS is undefined for a constant map")
    return float(((p - p.mean()) / std)[f].mean())


def _trapezoid(fpr, tpr) -> float:
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_judd(pred, fixation) -> float:
    """ROC area thresholding at each distinct fixated saliency value."""
    p, f = _fixations(pred, fixation)
    pos = p[f]
    neg = np.sort(p[~f])
    thresholds = np.unique(pos)[::-1]
    pos_sorted = np.sort(pos)
    n_pos, n_neg = pos.size, neg.size
    # counts of values >= t via sorted search
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    return _trapezoid(fpr, tpr)


def _roc_auc(pos, neg) -> float:
    """Exact ROC area over all distinct thresholds (ties split evenly)."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / pos.size])
    fpr = np.concatenate([[0.0], fp / neg.size])
    return _trapezoid(fpr, tpr)


def auc_borji(pred, fixation, n_splits: int = BORJI_SPLITS, seed: int = BORJI_SEED) -> float:
    """Mean ROC area over ``n_splits`` draws of uniformly sampled non-fixated negatives."""
    p, f = _fixations(pred, fixation)
    pos = p[f]
    candidates = p[~f]
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_splits):
        neg = candidates[rng.integers(0, candidates.size, size=pos.size)]
        scores.append(_roc_auc(pos, neg))
    return float(np.mean(scores))


METRIC_FUNCS = {
    "AUC_Borji": auc_borji,
    "AUC_Judd": auc_judd,
    "NSS": nss,
    "CC": cc,
    "SIM": sim,
    "KLD": kld,
}


def parse_metric_names(names: str | Sequence[str] | None) -> tuple[str, ...]:
    """``"all"`` or a comma list like ``"cc,sim,auc_judd"`` -> canonical names in table order."""
    if names is None or names == "all":
        return METRIC_NAMES
    items = names.split(",") if isinstance(names, str) else list(names)
    chosen = set()
    for item in items:
        key = item.strip().lower()
        if key not in _ALIASES:
            raise ValueError(f"unknown metric {item!r}; choose from {', '.join(METRIC_NAMES)}")
        chosen.add(_ALIASES[key])
    return tuple(n for n in METRIC_NAMES if n in chosen)


@dataclass
class MetricConfig:
    metrics: tuple[str, ...] = METRIC_NAMES
    borji_splits: int = BORJI_SPLITS
    borji_seed: int = BORJI_SEED
    kld_eps: float = KLD_EPS

    def to_dict(self) -> dict:
        return {"metrics": list(self.metrics), "borji_splits": self.borji_splits,
                "borji_seed": self.borji_seed, "kld_eps": self.kld_eps,
                "nss_std": "population", "roc_integration": "trapezoid",
                "aggregation": "per-sample mean"}


@dataclass
class MetricReport:
    values: dict[str, float | None]
    n_samples: int
    config: dict = field(default_factory=dict)

    @property
    def unavailable(self) -> list[str]:
        return [k for k in METRIC_NAMES if k in self.values and self.values[k] is None]

    def __getitem__(self, name):
        return self.values[name]

    def to_dict(self) -> dict:
        return {**{k: self.values[k] for k in METRIC_NAMES if k in self.values},
                "unavailable": self.unavailable, "n_samples": self.n_samples, "config": self.config}


def _sample_fields(sample):
    if isinstance(sample, Mapping):
        return sample["sample_id"], sample["saliency_gt"], sample.get("fixation")
    return sample.sample_id, sample.saliency_gt, sample.fixation


def evaluate_all(samples, predictions: Mapping, config: MetricConfig | None = None) -> MetricReport:
    """Per-sample metrics averaged over the set.

    ``samples`` yield (id, saliency ground truth, optional fixation mask);
    ``predictions`` maps id -> predicted map of the same shape. If any sample
    lacks fixations, the fixation-based metrics are reported as unavailable
    for the whole set.
    """
    config = config or MetricConfig()
    rows = [_sample_fields(s) for s in samples]
    if not rows:
        raise ValueError("no samples to evaluate")
    if not predictions:
        raise ValueError("no predictions to evaluate")
    ids = [r[0] for r in rows]
    missing = [i for i in ids if i not in predictions]
    extra = sorted(set(predictions) - set(ids))
    if missing or extra:
        raise ContractError(f"prediction/sample id mismatch; missing predictions: {missing}, unknown ids: {extra}")
    with_fix = all(r[2] is not None for r in rows)
    values: dict[str, float | None] = {}
    for name in config.metrics:
        if name in FIXATION_METRICS and not with_fix:
            values[name] = None
            continue
        scores = []
        for sid, gt, fix in rows:
            pred = np.asarray(predictions[sid], dtype=np.float64)
            if name == "AUC_Borji":
                scores.append(auc_borji(pred, fix, config.borji_splits, config.borji_seed))
            elif name == "KLD":
                scores.append(kld(pred, gt, config.kld_eps))
            elif name in FIXATION_METRICS:
                scores.append(METRIC_FUNCS[name](pred, fix))
            else:
                scores.append(METRIC_FUNCS[name](pred, gt))
        values[name] = float(np.mean(scores))
    return MetricReport(values, len(rows), config.to_dict())
