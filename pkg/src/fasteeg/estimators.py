"""scikit-learn compatible wrappers around the model and the preprocessing steps.

Inputs are trial arrays shaped ``(n_trials, n_channels, n_samples)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .model import FastConfig, init_params, load_checkpoint, save_checkpoint
from .montage import build_partition, default_layout, load_layout, toy_layout
from .preprocess import (EEGTrial, FilterSpec, baseline_correct, bandpass_spec, decimate, design_fir, filtfilt_fir,
                         notch_spec, utterance_crop, SegmentPlan)
from .protocols import DESK_OVERRIDES
from .training import TrainSettings, _softmax, fit, predict_scores

_MODEL_KEYS = ("F", "L_t", "L_s", "L", "heads_spatial", "heads_temporal", "ffn_multiplier", "k_t",
               "conv_t_filters", "k_c", "pool_window", "S_max", "dropout", "head_hidden")


def check_trials(X, *, min_samples: int = 1) -> np.ndarray:
    """Validate a (trials, channels, samples) float array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim != 3:
        raise ValueError(f"expected (trials, channels, samples), got shape {X.shape}")
    if X.shape[2] < min_samples:
        raise ValueError(f"trials of {X.shape[2]} samples; at least {min_samples} required")
    return X


def _layout_for(channels, n_channels: int, rate: float):
    if channels is not None:
        lay = load_layout({"channels": list(channels), "sample_rate": rate})
    elif n_channels == 62:
        lay = default_layout(rate)
    elif n_channels == 8:
        lay = toy_layout(rate)
    else:
        raise ValueError(f"no default layout for {n_channels} channels; pass channels=")
    if lay.n_channels != n_channels:
        raise ValueError(f"{len(lay.labels)} channel labels for {n_channels}-channel input")
    return lay


class FASTClassifier(ClassifierMixin, BaseEstimator):
    """Functional-area tokenizer plus transformer classifier.

    ``preset='desk'`` swaps in the reduced configuration for CPU-scale
    experiments; explicit model arguments still override it.
    ``warm_start`` names a checkpoint whose weights initialize ``fit``.
    """

    def __init__(self, partition="M8", channels=None, sample_rate=200.0, window_s=1.0, stride_s=0.5,
                 preset="default", F=None, L_t=None, L_s=None, L=None, heads_spatial=None, heads_temporal=None,
                 ffn_multiplier=None, k_t=None, conv_t_filters=None, k_c=None, pool_window=None, S_max=None,
                 dropout=None, head_hidden=None, mode="fast", epochs=200, batch_size=32, lr=1e-3,
                 weight_decay=0.01, warmup_epochs=10, floor_fraction=0.1, clip_norm=5.0, random_state=0,
                 warm_start=None):
        self.partition = partition
        self.channels = channels
        self.sample_rate = sample_rate
        self.window_s = window_s
        self.stride_s = stride_s
        self.preset = preset
        self.F = F
        self.L_t = L_t
        self.L_s = L_s
        self.L = L
        self.heads_spatial = heads_spatial
        self.heads_temporal = heads_temporal
        self.ffn_multiplier = ffn_multiplier
        self.k_t = k_t
        self.conv_t_filters = conv_t_filters
        self.k_c = k_c
        self.pool_window = pool_window
        self.S_max = S_max
        self.dropout = dropout
        self.head_hidden = head_hidden
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.floor_fraction = floor_fraction
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.warm_start = warm_start

    def _model_config(self, partition, n_classes: int) -> FastConfig:
        if self.preset not in ("default", "desk"):
            raise ValueError(f"unknown preset {self.preset!r}")
        over = dict(DESK_OVERRIDES) if self.preset == "desk" else {}
        over.update({k: getattr(self, k) for k in _MODEL_KEYS if getattr(self, k) is not None})
        return FastConfig.for_partition(partition, n_classes=n_classes, **over)

    def _plan(self) -> SegmentPlan:
        return SegmentPlan(self.window_s, self.stride_s)

    def fit(self, X, y):
        X = check_trials(X)
        check_classification_targets(y)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} trials but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.layout_ = _layout_for(self.channels, X.shape[1], self.sample_rate)
        self.partition_ = build_partition(self.layout_, self.partition)
        self.config_ = self._model_config(self.partition_, len(self.classes_))
        if self.warm_start is not None:
            P, cfg, _ = load_checkpoint(self.warm_start)
            if cfg != self.config_:
                raise ValueError("warm-start checkpoint does not match this estimator's configuration")
        else:
            P = init_params(self.config_, int(self.random_state))
        settings = TrainSettings(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                 weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                                 floor_fraction=self.floor_fraction, clip_norm=self.clip_norm,
                                 seed=int(self.random_state), mode=self.mode)
        self.run_ = fit(P, self.config_, X, y_idx, self.partition_, self._plan(), self.sample_rate, settings)
        self.params_ = P
        self.n_channels_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_trials(X)
        if X.shape[1] != self.n_channels_in_:
            raise ValueError(f"fitted on {self.n_channels_in_} channels, got {X.shape[1]}")
        return predict_scores(self.params_, self.config_, X, self.partition_, self._plan(), self.sample_rate,
                              self.mode)

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "params_")
        meta = {"estimator": self.get_params(), "classes": self.classes_.tolist(),
                "channels": list(self.layout_.labels)}
        save_checkpoint(self.params_, self.config_, path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "FASTClassifier":
        P, cfg, meta = load_checkpoint(path)
        est = cls(**meta["estimator"])
        est.classes_ = np.asarray(meta["classes"])
        est.layout_ = _layout_for(meta["channels"], len(meta["channels"]), est.sample_rate)
        est.partition_ = build_partition(est.layout_, est.partition)
        est.config_, est.params_ = cfg, P
        est.n_channels_in_ = len(meta["channels"])
        return est


# --------------------------------------------------------------------------
# preprocessing transformers (stateless; fit only validates)


class _TrialTransformer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        X = check_trials(X)
        self.n_channels_in_ = X.shape[1]
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "n_channels_in_")
        X = check_trials(X)
        if X.shape[1] != self.n_channels_in_:
            raise ValueError(f"fitted on {self.n_channels_in_} channels, got {X.shape[1]}")
        return X


class FIRFilter(_TrialTransformer):
    """Zero-phase Hamming-windowed FIR filter."""

    def __init__(self, kind="bandpass", edges=(1.0, 40.0), sample_rate=200.0, n_taps=None, transition_hz=1.0):
        self.kind = kind
        self.edges = edges
        self.sample_rate = sample_rate
        self.n_taps = n_taps
        self.transition_hz = transition_hz

    def fit(self, X, y=None):
        super().fit(X, y)
        self.coef_ = design_fir(FilterSpec(self.kind, tuple(np.atleast_1d(self.edges).tolist()), self.sample_rate,
                                           self.n_taps, self.transition_hz))
        return self

    def transform(self, X):
        X = self._check(X)
        return filtfilt_fir(self.coef_, X).astype(np.float32)


class Decimator(_TrialTransformer):
    """Keep every k-th sample (apply the anti-alias filter first)."""

    def __init__(self, source_rate=5000.0, target_rate=200.0):
        self.source_rate = source_rate
        self.target_rate = target_rate

    def transform(self, X):
        X = self._check(X)
        return np.stack([decimate(EEGTrial(x, self.source_rate), self.target_rate).data for x in X])


class BaselineCorrector(_TrialTransformer):
    """Subtract each channel's mean over the ``baseline_s`` seconds before ``cue_onset``."""

    def __init__(self, sample_rate=200.0, cue_onset=200, baseline_s=1.0):
        self.sample_rate = sample_rate
        self.cue_onset = cue_onset
        self.baseline_s = baseline_s

    def transform(self, X):
        X = self._check(X)
        return np.stack([baseline_correct(EEGTrial(x, self.sample_rate, cue_onset=self.cue_onset),
                                          self.baseline_s).data for x in X])


class UtteranceCropper(_TrialTransformer):
    def __init__(self, utterances=5, sample_rate=200.0, cue_onset=0):
        self.utterances = utterances
        self.sample_rate = sample_rate
        self.cue_onset = cue_onset

    def transform(self, X):
        X = self._check(X)
        return np.stack([utterance_crop(EEGTrial(x, self.sample_rate, cue_onset=self.cue_onset),
                                        self.utterances).data for x in X])


def bandpass_filter(sample_rate=200.0, low=1.0, high=40.0, **kw) -> FIRFilter:
    s = bandpass_spec(sample_rate, low, high)
    return FIRFilter(s.kind, s.edges, sample_rate, **kw)


def notch_filter(sample_rate=200.0, center=50.0, half_width=1.0, **kw) -> FIRFilter:
    s = notch_spec(sample_rate, center, half_width)
    return FIRFilter(s.kind, s.edges, sample_rate, **kw)
