"""Offline conditioning of EEG trials: FIR filtering, decimation, baseline
correction, epoching, ST-window segmentation and utterance cropping."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve, firwin

UTTERANCE_S = 2.0
N_UTTERANCES = 5


@dataclass
class EEGTrial:
    data: np.ndarray          # (channels, samples), microvolts
    sample_rate: float
    label: int = 0
    subject: int = 0
    block: int = 0
    cue_onset: int = 0        # sample index of t = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"trial data must be (channels, samples), got shape {self.data.shape}")
        if not 0 <= self.cue_onset <= self.data.shape[1]:
            raise ValueError(f"cue_onset {self.cue_onset} outside the trial")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    def with_data(self, data: np.ndarray, **changes) -> "EEGTrial":
        return replace(self, data=data, **changes)


# --------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterSpec:
    """Hamming-windowed sinc FIR design request.

    ``n_taps=None`` derives an odd tap count from the transition width as
    ``3.3 * fs / transition_hz`` (Hamming main-lobe width).
    """

    kind: str                 # lowpass | highpass | bandpass | bandstop
    edges: tuple[float, ...]
    sample_rate: float
    n_taps: int | None = None
    transition_hz: float = 1.0
    zero_phase: bool = True

    def taps(self) -> int:
        if self.n_taps is not None:
            return self.n_taps
        n = math.ceil(3.3 * self.sample_rate / self.transition_hz)
        return n if n % 2 else n + 1


def bandpass_spec(sample_rate: float, low: float = 1.0, high: float = 40.0, **kw) -> FilterSpec:
    return FilterSpec("bandpass", (low, high), sample_rate, **kw)


def notch_spec(sample_rate: float, center: float = 50.0, half_width: float = 1.0, **kw) -> FilterSpec:
    return FilterSpec("bandstop", (center - half_width, center + half_width), sample_rate, **kw)


def design_fir(spec: FilterSpec) -> np.ndarray:
    nyq = spec.sample_rate / 2.0
    edges = tuple(float(e) for e in spec.edges)
    if any(e <= 0 or e >= nyq for e in edges):
        raise ValueError(f"band edges {edges} must lie strictly between 0 and Nyquist ({nyq} Hz)")
    n = spec.taps()
    if n % 2 == 0:
        raise ValueError("tap count must be odd (type I linear phase)")
    expected = {"lowpass": 1, "highpass": 1, "bandpass": 2, "bandstop": 2}
    if spec.kind not in expected:
        raise ValueError(f"unknown filter kind {spec.kind!r}")
    if len(edges) != expected[spec.kind]:
        raise ValueError(f"{spec.kind} needs {expected[spec.kind]} edge(s)")
    pass_zero = {"lowpass": True, "highpass": False, "bandpass": False, "bandstop": True}[spec.kind]
    cutoff = edges[0] if len(edges) == 1 else list(edges)
    # scipy's bandstop is the spectral inversion of the matching bandpass
    return firwin(n, cutoff, pass_zero=pass_zero, window="hamming", fs=spec.sample_rate)


def filtfilt_fir(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Forward-backward FIR filtering along the last axis with reflection padding."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = len(coeffs)
    t = x.shape[-1]
    if t <= 3 * n and n > 1:
        raise ValueError(f"signal of {t} samples too short for a {n}-tap zero-phase filter (need > {3 * n})")
    pad = n
    xp = np.pad(np.asarray(x, dtype=np.float64), [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")
    length = xp.shape[-1]
    h = coeffs.reshape((1,) * (x.ndim - 1) + (n,))
    fwd = fftconvolve(xp, h, axes=-1)[..., :length]
    back = fftconvolve(fwd[..., ::-1], h, axes=-1)[..., :length][..., ::-1]
    return back[..., pad:pad + t]


def apply_zero_phase(coeffs: np.ndarray, x: EEGTrial) -> EEGTrial:
    return x.with_data(filtfilt_fir(coeffs, x.data).astype(np.float32))


# --------------------------------------------------------------------------
# resampling, baseline, epoching


def decimation_factor(source_rate: float, target_rate: float) -> int:
    k = source_rate / target_rate
    if k < 1 or not math.isclose(k, round(k), rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"{source_rate} Hz -> {target_rate} Hz is not an integer decimation")
    return int(round(k))


def decimate(x: EEGTrial, target_rate: float) -> EEGTrial:
    """Keep every k-th sample; the anti-alias lowpass must already be applied."""
    k = decimation_factor(x.sample_rate, target_rate)
    if k == 1:
        return x
    return x.with_data(np.ascontiguousarray(x.data[:, ::k]), sample_rate=float(target_rate),
                       cue_onset=int(round(x.cue_onset / k)))


def baseline_correct(x: EEGTrial, baseline_s: float = 1.0) -> EEGTrial:
    n = int(round(baseline_s * x.sample_rate))
    if n < 1 or x.cue_onset < n:
        raise ValueError(f"need {n} pre-cue samples for baseline correction, trial has {x.cue_onset}")
    base = x.data[:, x.cue_onset - n:x.cue_onset].astype(np.float64).mean(axis=1, keepdims=True)
    return x.with_data((x.data - base).astype(np.float32))


def epoch(x: EEGTrial, tmin_s: float, tmax_s: float) -> EEGTrial:
    """Crop to [cue + tmin, cue + tmax); the result's cue_onset is re-indexed."""
    start = x.cue_onset + int(round(tmin_s * x.sample_rate))
    stop = x.cue_onset + int(round(tmax_s * x.sample_rate))
    if start < 0 or stop > x.n_samples or stop <= start:
        raise ValueError(f"epoch [{tmin_s}, {tmax_s}) s exceeds the recorded trial")
    return x.with_data(np.ascontiguousarray(x.data[:, start:stop]), cue_onset=x.cue_onset - start)


def utterance_crop(x: EEGTrial, k: int) -> EEGTrial:
    """Keep the first ``k`` two-second utterances after the cue."""
    if not 1 <= k <= N_UTTERANCES:
        raise ValueError(f"utterance count must be in 1..{N_UTTERANCES}, got {k}")
    return epoch(x, 0.0, k * UTTERANCE_S)


def reject_artifacts(x: EEGTrial, threshold_uv: float = 150.0) -> bool:
    """True to keep the trial: no sample strictly exceeds the threshold in magnitude."""
    if threshold_uv <= 0:
        raise ValueError("threshold must be positive")
    return not bool(np.any(np.abs(x.data) > threshold_uv))


# --------------------------------------------------------------------------
# ST segmentation


@dataclass(frozen=True)
class SegmentPlan:
    window_s: float = 1.0
    stride_s: float = 0.5

    def samples(self, rate: float) -> tuple[int, int]:
        w = int(round(self.window_s * rate))
        s = int(round(self.stride_s * rate))
        if w < 1 or s < 1:
            raise ValueError("window and stride must cover at least one sample")
        return w, s

    def n_segments(self, n_samples: int, rate: float) -> int:
        w, s = self.samples(rate)
        if n_samples < w:
            raise ValueError(f"window of {w} samples longer than trial of {n_samples}")
        return (n_samples - w) // s + 1


def segment(x: EEGTrial | np.ndarray, plan: SegmentPlan, rate: float | None = None) -> np.ndarray:
    """(channels, samples) -> (S, channels, window) in temporal order."""
    if isinstance(x, EEGTrial):
        data, rate = x.data, x.sample_rate
    else:
        data = np.asarray(x)
        if rate is None:
            raise ValueError("rate is required for raw arrays")
    w, s = plan.samples(rate)
    plan.n_segments(data.shape[-1], rate)
    view = sliding_window_view(data, w, axis=-1)[..., ::s, :]
    return np.ascontiguousarray(np.moveaxis(view, -2, 0))


def preprocess_trial(
    x: EEGTrial,
    bandpass: np.ndarray | None,
    notch: np.ndarray | None,
    target_rate: float,
    baseline_s: float | None = 1.0,
    tmin_s: float = 0.0,
    tmax_s: float = 10.0,
) -> EEGTrial:
    """bandpass -> notch -> decimate -> baseline-correct -> epoch."""
    if bandpass is not None:
        x = apply_zero_phase(bandpass, x)
    if notch is not None:
        x = apply_zero_phase(notch, x)
    x = decimate(x, target_rate)
    if baseline_s:
        x = baseline_correct(x, baseline_s)
    return epoch(x, tmin_s, tmax_s)
