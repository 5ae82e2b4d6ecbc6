"""Integrated Gradients saliency and dense sliding-window tokenizer timelines."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import FastConfig, ParamStore, fast_forward, st_forward
from .montage import RegionPartition, apply_partition
from .preprocess import UTTERANCE_S, EEGTrial, SegmentPlan


ENDPOINT_NUDGE = 1e-7


class AttributionError(ValueError):
    pass


# --------------------------------------------------------------------------
# integrated gradients


@dataclass
class AttributionMap:
    values: np.ndarray            # same shape as the input trial
    target: int
    baseline_id: str
    steps: int
    completeness_gap: float       # |sum(values) - delta| / |delta|
    delta: float                  # F(x) - F(baseline)

    @property
    def total(self) -> float:
        return float(self.values.sum())


def model_function(P: ParamStore, cfg: FastConfig, partition: RegionPartition, plan: SegmentPlan,
                   rate: float = 200.0, mode: str = "fast") -> Callable[[torch.Tensor], torch.Tensor]:
    """Eval-mode map (B, C, T) -> (B, n_classes) pre-softmax logits."""
    def f(x: torch.Tensor) -> torch.Tensor:
        return fast_forward(P, cfg, x, partition, plan, rate, training=False, mode=mode)
    return f


def trapezoid_weights(steps: int) -> np.ndarray:
    w = np.full(steps + 1, 1.0 / steps)
    w[0] = w[-1] = 0.5 / steps
    return w


def integrated_gradients(
    f: Callable[[torch.Tensor], torch.Tensor],
    x,
    baseline=None,
    target: int = 0,
    steps: int = 64,
    batch_size: int = 32,
    baseline_id: str | None = None,
) -> AttributionMap:
    """Straight-line path integral of the target logit's input gradient,
    trapezoidal rule over ``steps`` intervals, times ``x - baseline``.

    ``baseline=None`` uses the all-zero input.
    """
    if steps < 1:
        raise AttributionError("steps must be at least 1")
    if isinstance(x, EEGTrial):
        x = x.data
    xt = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    dtype = xt.dtype if xt.is_floating_point() else torch.float64
    xt = xt.to(dtype)
    if baseline is None:
        bt = torch.zeros_like(xt)
        baseline_id = baseline_id or "zeros"
    else:
        if isinstance(baseline, EEGTrial):
            baseline = baseline.data
        bt = torch.as_tensor(np.asarray(baseline) if not isinstance(baseline, torch.Tensor) else baseline).to(dtype)
        baseline_id = baseline_id or "custom"
    if bt.shape != xt.shape:
        raise AttributionError(f"baseline shape {tuple(bt.shape)} != input shape {tuple(xt.shape)}")
    diff = xt - bt
    weights = torch.as_tensor(trapezoid_weights(steps), dtype=dtype)
    alphas = torch.linspace(0.0, 1.0, steps + 1, dtype=dtype)
    # Endpoint gradients are taken as one-sided limits. At an all-zero
    # baseline every max-pool window is tied and autograd's subgradient there
    # is not the derivative along the path, which costs a full O(1/steps).
    alphas[0], alphas[-1] = ENDPOINT_NUDGE, 1.0 - ENDPOINT_NUDGE
    grad_sum = torch.zeros_like(xt)
    for start in range(0, steps + 1, batch_size):
        a = alphas[start:start + batch_size]
        pts = (bt.unsqueeze(0) + a.view(-1, *([1] * xt.dim())) * diff.unsqueeze(0)).requires_grad_(True)
        out = f(pts)[:, target]
        (g,) = torch.autograd.grad(out.sum(), pts)
        grad_sum += torch.tensordot(weights[start:start + batch_size], g, dims=1)
    values = (diff * grad_sum).detach()
    with torch.no_grad():
        ends = f(torch.stack([xt, bt]))[:, target]
    delta = float(ends[0] - ends[1])
    total = float(values.sum())
    if delta != 0:
        gap = abs(total - delta) / abs(delta)
    else:
        gap = 0.0 if total == 0 else float("inf")
    return AttributionMap(values.numpy(), int(target), baseline_id, steps, gap, delta)


# --------------------------------------------------------------------------
# activation timelines


@dataclass
class ActivationTimeline:
    values: np.ndarray            # (windows, M, F)
    times: np.ndarray             # window start, seconds relative to the cue
    region_names: tuple[str, ...]
    window_s: float
    step_s: float
    zscored: bool = False

    @property
    def n_windows(self) -> int:
        return self.values.shape[0]


def timeline_count(n_samples: int, rate: float, window_s: float, step_s: float) -> int:
    w, s = SegmentPlan(window_s, step_s).samples(rate)
    if n_samples < w:
        raise AttributionError(f"trial of {n_samples} samples shorter than one {w}-sample window")
    return (n_samples - w) // s + 1


@torch.no_grad()
def activation_timeline(
    P: ParamStore,
    cfg: FastConfig,
    trial: EEGTrial,
    partition: RegionPartition,
    window_s: float = 1.0,
    step_s: float = 0.02,
    batch_size: int = 128,
) -> ActivationTimeline:
    """Run the tokenizer alone on every window of a dense scan over the trial."""
    rate = trial.sample_rate
    n = timeline_count(trial.n_samples, rate, window_s, step_s)
    w, s = SegmentPlan(window_s, step_s).samples(rate)
    x = torch.as_tensor(trial.data).to(P.params["te.cls"].dtype)
    wins = x.unfold(-1, w, s).permute(1, 0, 2)          # (n, C, w)
    out = []
    for start in range(0, n, batch_size):
        blocks = apply_partition(partition, wins[start:start + batch_size])
        out.append(st_forward(P, cfg, blocks, training=False))
    times = (np.arange(n) * s - trial.cue_onset) / rate
    return ActivationTimeline(torch.cat(out).numpy(), times, partition.region_names, window_s, step_s)


def zscore_time(values: np.ndarray) -> np.ndarray:
    """Standardize along axis 0; constant traces map to zeros."""
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean(axis=0, keepdims=True)
    sd = v.std(axis=0, keepdims=True)
    return np.divide(v - mu, sd, out=np.zeros_like(v), where=sd > 0)


@dataclass
class ClassMaps:
    classes: tuple[int, ...]
    maps: dict[int, np.ndarray]        # z-scored class means, (windows, M, F)
    contrasts: dict[int, np.ndarray]   # class map minus the mean of the other class maps
    times: np.ndarray
    region_names: tuple[str, ...]


def normalize_and_average(timelines: Sequence[ActivationTimeline], labels: Sequence[int],
                          classes: Sequence[int] | None = None) -> ClassMaps:
    if len(timelines) != len(labels) or not timelines:
        raise AttributionError("need one label per timeline and at least one timeline")
    labels = np.asarray(labels, dtype=int)
    classes = tuple(sorted(set(labels.tolist()))) if classes is None else tuple(classes)
    if len(classes) < 2:
        raise AttributionError("one-vs-all contrasts need at least two classes")
    stack = np.stack([t.values for t in timelines]).astype(np.float64)
    maps = {}
    for c in classes:
        members = labels == c
        if not members.any():
            raise AttributionError(f"class {c} has no trials")
        maps[c] = zscore_time(stack[members].mean(axis=0))
    contrasts = {c: maps[c] - np.mean([maps[o] for o in classes if o != c], axis=0) for c in classes}
    return ClassMaps(classes, maps, contrasts, timelines[0].times, timelines[0].region_names)


# --------------------------------------------------------------------------
# channel saliency


@dataclass
class ChannelSaliency:
    labels: tuple[str, ...]
    overall: np.ndarray                    # (channels,)
    per_utterance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (utterances, channels)


def channel_saliency(maps: Sequence[AttributionMap], labels: Sequence[str], rate: float = 200.0,
                     cue_onset: int = 0, utterance_s: float = UTTERANCE_S) -> ChannelSaliency:
    """Mean |IG| per channel, overall and within each utterance span after the cue."""
    if not maps:
        raise AttributionError("no attribution maps")
    a = np.abs(np.stack([m.values for m in maps]).astype(np.float64))   # (n, C, T)
    if a.shape[1] != len(labels):
        raise AttributionError(f"maps have {a.shape[1]} channels, {len(labels)} labels given")
    span = int(round(utterance_s * rate))
    n_utt = max(0, (a.shape[2] - cue_onset) // span)
    per = np.stack([a[:, :, cue_onset + u * span:cue_onset + (u + 1) * span].mean(axis=(0, 2))
                    for u in range(n_utt)]) if n_utt else np.zeros((0, a.shape[1]))
    return ChannelSaliency(tuple(labels), a.mean(axis=(0, 2)), per)


# --------------------------------------------------------------------------
# exports


def _write_grid(path: Path, values: np.ndarray, times: np.ndarray, region_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_time", "region", "feature", "value"])
        for i, t in enumerate(times):
            for j, r in enumerate(region_names):
                for k in range(values.shape[2]):
                    w.writerow([f"{t:.4f}", r, k, repr(float(values[i, j, k]))])


def write_timeline_csv(path: str | Path, timeline: ActivationTimeline) -> None:
    _write_grid(Path(path), timeline.values, timeline.times, timeline.region_names)


def write_contrast_csvs(directory: str | Path, cm: ClassMaps) -> list[Path]:
    out = []
    for c in cm.classes:
        p = Path(directory) / f"contrast_{c}.csv"
        _write_grid(p, cm.contrasts[c], cm.times, cm.region_names)
        out.append(p)
    return out


def write_saliency_csv(path: str | Path, sal: ChannelSaliency) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "value", "utterance_index"])
        for lab, v in zip(sal.labels, sal.overall):
            w.writerow([lab, repr(float(v)), ""])
        for u, row in enumerate(sal.per_utterance):
            for lab, v in zip(sal.labels, row):
                w.writerow([lab, repr(float(v)), u])
