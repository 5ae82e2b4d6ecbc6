"""Multi-run experiment recipes and the reduced desk-scale model preset.

The full-size model costs roughly 66 ms per trial for one forward/backward
pass on a single CPU core. The desk preset shrinks the tokenizer and the
transformer depth so that full LOBO sweeps over synthetic data finish in
minutes. The default architecture stays the reference configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import chance_interval
from .model import FastConfig, init_params
from .montage import RegionPartition
from .preprocess import SegmentPlan
from .synthdata import DatasetContainer
from .training import (DatasetIndex, Experiment, FoldResult, TrainSettings, evaluate_fold, finetune,
                       finetune_from_scratch, fit, prepare_arrays, pretrain_loso)

DESK_OVERRIDES = dict(F=8, L_t=3, conv_t_filters=8, L=2, L_s=1, head_hidden=64, pool_window=4,
                      heads_spatial=2)
DESK_PLAN = SegmentPlan(1.0, 1.0)
DESK_PRETRAIN_EPOCHS = 30
DESK_FINETUNE_EPOCHS = 50


def desk_config(partition: RegionPartition, **overrides) -> FastConfig:
    return FastConfig.for_partition(partition, **{**DESK_OVERRIDES, **overrides})


def subject_mean_accuracy(results: dict[int, list[FoldResult]]) -> tuple[float, int]:
    """Mean over subjects of the pooled fold accuracy, and the total test count."""
    accs, n = [], 0
    for folds in results.values():
        yt = np.concatenate([f.y_true for f in folds])
        yp = np.concatenate([f.y_pred for f in folds])
        accs.append(float(np.mean(yt == yp)))
        n += len(yt)
    return float(np.mean(accs)), n


@dataclass
class LearningReport:
    per_subject: dict[int, float]
    mean_accuracy: float
    n_test: int
    chance_high: float

    @property
    def above_chance(self) -> bool:
        return self.mean_accuracy > self.chance_high


def lobo_from_scratch(exp: Experiment, container: DatasetContainer, seed: int = 0,
                      subjects=None, jobs: int = 1) -> tuple[LearningReport, dict[int, list[FoldResult]]]:
    X, y = prepare_arrays(container)
    index = DatasetIndex.from_container(container)
    subjects = container.subjects if subjects is None else subjects
    results = {s: finetune_from_scratch(exp, X, y, index, s, seed, jobs) for s in subjects}
    mean, n = subject_mean_accuracy(results)
    per = {s: subject_mean_accuracy({s: r})[0] for s, r in results.items()}
    hi = chance_interval(1.0 / exp.cfg.n_classes, n)[1]
    return LearningReport(per, mean, n, hi), results


@dataclass
class BenefitReport:
    seeds: list[int]
    pretrained: list[float]
    scratch: list[float]
    loso: list[float] = field(default_factory=list)

    @property
    def mean_pretrained(self) -> float:
        return float(np.mean(self.pretrained))

    @property
    def mean_scratch(self) -> float:
        return float(np.mean(self.scratch))


def pretraining_benefit(exp: Experiment, container: DatasetContainer, subject: int, seeds=(0, 1, 2),
                        pretrain_epochs: int = DESK_PRETRAIN_EPOCHS,
                        finetune_epochs: int = DESK_FINETUNE_EPOCHS) -> BenefitReport:
    """Both fine-tuning arms on one held-out subject, per seed.

    The pretrained arm starts from a LOSO model trained on every other subject.
    """
    X, y = prepare_arrays(container)
    index = DatasetIndex.from_container(container)
    rep = BenefitReport(list(seeds), [], [])
    for seed in seeds:
        pre = replace(exp, settings=replace(exp.settings, epochs=pretrain_epochs))
        P, _, loso = pretrain_loso(pre, X, y, index, subject, seed)
        ft = replace(exp, settings=replace(exp.settings, epochs=finetune_epochs))
        rep.loso.append(loso.accuracy)
        rep.pretrained.append(subject_mean_accuracy({subject: finetune(ft, P, X, y, index, subject, seed)})[0])
        rep.scratch.append(subject_mean_accuracy({subject: finetune_from_scratch(ft, X, y, index, subject, seed)})[0])
    return rep


@dataclass
class UtteranceReport:
    ks: list[int]
    seeds: list[int]
    accuracy: np.ndarray          # (len(ks), len(seeds))

    @property
    def mean(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)

    def non_decreasing(self, tolerance: float = 0.02) -> bool:
        m = self.mean
        return bool(np.all(np.diff(m) >= -tolerance))


def utterance_sweep(exp: Experiment, container: DatasetContainer, ks=(1, 2, 3, 4, 5), seeds=(0, 1, 2),
                    train_blocks=(0, 1, 2)) -> UtteranceReport:
    """Train on the first ``k`` utterances of every trial, for each ``k``.

    Subjects are pooled; trials of ``train_blocks`` train the model and all
    remaining blocks are tested once.
    """
    index = DatasetIndex.from_container(container)
    train = np.flatnonzero(np.isin(index.blocks, train_blocks))
    test = np.flatnonzero(~np.isin(index.blocks, train_blocks))
    if train.size == 0 or test.size == 0:
        raise ValueError("block split leaves an empty train or test set")
    acc = np.zeros((len(ks), len(seeds)))
    for i, k in enumerate(ks):
        X, y = prepare_arrays(container, utterances=k)
        for j, seed in enumerate(seeds):
            P = init_params(exp.cfg, seed)
            fit(P, exp.cfg, X[train], y[train], exp.partition, exp.plan, exp.rate, replace(exp.settings, seed=seed))
            acc[i, j] = evaluate_fold(P, exp.cfg, X, y, test, exp.partition, exp.plan, exp.rate,
                                      exp.settings.mode, f"k{k}", {"utterances": k}, "scratch").accuracy
    return UtteranceReport(list(ks), list(seeds), acc)
