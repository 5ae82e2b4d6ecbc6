"""Classification metrics, the chance-level band and a paired signed-rank test."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_WILCOXON_MAX_N = 15


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns are predictions."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=int).ravel()
    p = np.asarray(y_pred, dtype=int).ravel()
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} labels vs {p.size} predictions")
    for name, v in (("true", t), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise MetricError(f"{name} labels outside 0..{n_classes - 1}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return ConfusionMatrix(m)


def accuracy(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise MetricError("empty confusion matrix")
    return float(np.trace(m.counts)) / m.total


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # undefined per-class terms count as 0
    out = np.zeros_like(num, dtype=float)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_precision_recall(m: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    tp = np.diag(m.counts).astype(float)
    return _safe_div(tp, m.counts.sum(axis=0)), _safe_div(tp, m.counts.sum(axis=1))


def macro_precision(m: ConfusionMatrix) -> float:
    return float(per_class_precision_recall(m)[0].mean())


def macro_recall(m: ConfusionMatrix) -> float:
    return float(per_class_precision_recall(m)[1].mean())


def macro_f1(m: ConfusionMatrix) -> float:
    if m.n_classes < 2:
        raise MetricError("macro F1 needs at least two classes")
    p, r = per_class_precision_recall(m)
    return float(_safe_div(2 * p * r, p + r).mean())


def cohen_kappa(m: ConfusionMatrix) -> float:
    n = m.total
    if n < 1:
        raise MetricError("empty confusion matrix")
    c = m.counts.astype(float)
    p_o = np.trace(c) / n
    p_e = float((c.sum(axis=1) / n) @ (c.sum(axis=0) / n))
    if math.isclose(p_e, 1.0, rel_tol=0, abs_tol=1e-12):
        raise MetricError("kappa undefined: expected agreement is 1 (single class)")
    return float((p_o - p_e) / (1.0 - p_e))


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney form of the ROC area; ties earn half credit."""
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positives and negatives")
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_ovr(y_true: Sequence[int], scores: np.ndarray) -> float:
    """Unweighted mean of one-vs-rest areas over the classes present in ``y_true``."""
    y = np.asarray(y_true, dtype=int).ravel()
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise MetricError(f"scores must be (N, C) with N={y.size}, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    areas = []
    for c in range(s.shape[1]):
        pos = y == c
        if not pos.any():
            warnings.warn(f"class {c} absent from labels; skipped in AUC", RuntimeWarning, stacklevel=2)
            continue
        if pos.all():
            warnings.warn(f"class {c} has no negatives; skipped in AUC", RuntimeWarning, stacklevel=2)
            continue
        areas.append(binary_auc(pos, s[:, c]))
    if not areas:
        raise MetricError("no class has both positives and negatives")
    return float(np.mean(areas))


def chance_interval(p: float, n: int, z: float = 1.96) -> tuple[float, float]:
    """Normal-approximation band around the random-guess accuracy ``p``."""
    if not 0 < p < 1:
        raise MetricError("p must lie in (0, 1)")
    if n < 1:
        raise MetricError("n must be positive")
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


def wilcoxon_signed_rank(differences: Sequence[float]) -> tuple[float, float]:
    """Two-sided signed-rank test on paired differences.

    Zero differences are dropped. The statistic is the positive-rank sum W+.
    Up to 15 non-zero pairs the p-value enumerates every sign assignment of
    the (mid-)ranks; beyond that it uses the tie-corrected normal
    approximation without continuity correction.
    """
    d = np.asarray(differences, dtype=float).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise MetricError("all differences are zero; test undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    center = n * (n + 1) / 4.0
    if n <= EXACT_WILCOXON_MAX_N:
        # W+ for every sign pattern: signs @ ranks, vectorized over 2^n rows
        signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
        null = signs @ ranks
        dev = abs(w_plus - center)
        p = float(np.mean(np.abs(null - center) >= dev - 1e-9))
        return w_plus, min(1.0, p)
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return w_plus, 1.0
    z = (w_plus - center) / math.sqrt(var)
    return w_plus, float(min(1.0, 2 * norm.sf(abs(z))))


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    kappa: float
    auc: float
    n: int
    n_classes: int

    def to_dict(self) -> dict:
        return asdict(self)


def report(y_true: Sequence[int], y_pred: Sequence[int], scores: np.ndarray | None, n_classes: int) -> MetricsReport:
    m = confusion(y_true, y_pred, n_classes)
    try:
        kappa = cohen_kappa(m)
    except MetricError:
        kappa = float("nan")
    auc = float("nan")
    if scores is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                auc = auc_ovr(y_true, scores)
            except MetricError:
                pass
    return MetricsReport(accuracy(m), macro_precision(m), macro_recall(m), macro_f1(m),
                         kappa, auc, m.total, n_classes)


def _nan_stat(fn, values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(fn(v)) if v.size else float("nan")


def summarize(groups: dict, n_classes: int, p_chance: float | None = None, z: float = 1.96) -> dict:
    """Per-group reports, their mean and std (primary), the pooled report and
    the chance band for the pooled N.

    ``groups`` maps a key (fold or subject) to ``(y_true, y_pred, scores)``.
    """
    per = {str(k): report(t, p, s, n_classes) for k, (t, p, s) in groups.items()}
    if not per:
        raise MetricError("nothing to summarize")
    fields = list(MetricsReport.__dataclass_fields__)[:6]
    mean = {f: _nan_stat(np.mean, [getattr(r, f) for r in per.values()]) for f in fields}
    std = {f: _nan_stat(np.std, [getattr(r, f) for r in per.values()]) for f in fields}
    yt = np.concatenate([np.asarray(t) for t, _, _ in groups.values()])
    yp = np.concatenate([np.asarray(p) for _, p, _ in groups.values()])
    scores = [s for _, _, s in groups.values()]
    pooled_scores = None if any(s is None for s in scores) else np.concatenate([np.asarray(s) for s in scores])
    pooled = report(yt, yp, pooled_scores, n_classes)
    p0 = 1.0 / n_classes if p_chance is None else p_chance
    return {
        "groups": {k: r.to_dict() for k, r in per.items()},
        "mean": mean,
        "std": std,
        "pooled": pooled.to_dict(),
        "chance": {"p": p0, "n": pooled.n, "z": z, "interval": list(chance_interval(p0, pooled.n, z))},
    }


def format_table(summary: dict) -> str:
    cols = ["accuracy", "macro_f1", "kappa", "auc", "n"]
    rows = [(k, v) for k, v in summary["groups"].items()] + [("pooled", summary["pooled"])]
    width = max(len(k) for k, _ in rows + [("mean", None)])
    lines = [f"{'':<{width}}  " + "  ".join(f"{c:>9}" for c in cols)]
    for k, r in rows:
        lines.append(f"{k:<{width}}  " + "  ".join(f"{r[c]:>9.4f}" if c != "n" else f"{r[c]:>9d}" for c in cols))
    m = summary["mean"]
    lines.append(f"{'mean':<{width}}  " + "  ".join(f"{m[c]:>9.4f}" for c in cols[:-1]))
    lo, hi = summary["chance"]["interval"]
    lines.append(f"chance band for n={summary['chance']['n']}: [{lo:.4f}, {hi:.4f}]")
    return "\n".join(lines)
