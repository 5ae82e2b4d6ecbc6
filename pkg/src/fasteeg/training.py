"""Subject-independent pretraining (LOSO) and subject-dependent fine-tuning
(LOBO) around a deterministic mini-batch AdamW loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .model import FastConfig, ParamStore, fast_forward, init_params, load_checkpoint
from .montage import RegionPartition
from .preprocess import SegmentPlan, utterance_crop
from .synthdata import DatasetContainer

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# bookkeeping


@dataclass
class DatasetIndex:
    subjects: np.ndarray
    blocks: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_container(cls, c: DatasetContainer) -> "DatasetIndex":
        return cls(np.array([t.subject for t in c.trials], dtype=int),
                   np.array([t.block for t in c.trials], dtype=int),
                   np.array([t.label for t in c.trials], dtype=int))

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self) -> dict[int, dict[int, int]]:
        out: dict[int, dict[int, int]] = {}
        for s, b in zip(self.subjects, self.blocks):
            out.setdefault(int(s), {}).setdefault(int(b), 0)
            out[int(s)][int(b)] += 1
        return out


def loso_split(index: DatasetIndex, held_out_subject: int) -> tuple[np.ndarray, np.ndarray]:
    test = np.flatnonzero(index.subjects == held_out_subject)
    if test.size == 0:
        raise KeyError(f"unknown subject {held_out_subject}")
    return np.flatnonzero(index.subjects != held_out_subject), test


def lobo_folds(index: DatasetIndex, subject: int, n_blocks: int = 5) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """(held-out block, train indices, test indices) for every block of one subject."""
    mine = np.flatnonzero(index.subjects == subject)
    if mine.size == 0:
        raise KeyError(f"unknown subject {subject}")
    blocks = np.unique(index.blocks[mine])
    if len(blocks) != n_blocks:
        raise ValueError(f"subject {subject} has {len(blocks)} blocks, LOBO needs {n_blocks}")
    return [(int(b), mine[index.blocks[mine] != b], mine[index.blocks[mine] == b]) for b in blocks]


@dataclass
class TrainSettings:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: int = 10
    floor_fraction: float = 0.1
    clip_norm: float | None = 5.0
    seed: int = 0
    mode: str = "fast"            # fast | no-te

    def schedule(self) -> nx.Schedule:
        return nx.Schedule(self.lr, self.warmup_epochs, max(self.epochs, 1), self.floor_fraction)


@dataclass
class TrainRun:
    config: dict
    settings: dict
    seed: int
    log: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    init: str = "scratch"

    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.log]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    fold_id: str
    held_out: dict
    trial_ids: list[int]
    y_true: list[int]
    y_pred: list[int]
    scores: list[list[float]]
    init: str = "scratch"

    @property
    def accuracy(self) -> float:
        return float(np.mean(np.array(self.y_true) == np.array(self.y_pred))) if self.y_true else float("nan")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "FoldResult":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "FoldResult":
        return cls.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# data preparation


def prepare_arrays(container: DatasetContainer, utterances: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Crop every trial to its first ``utterances`` utterances and stack."""
    if not container.trials:
        raise ValueError("empty dataset")
    X = np.stack([utterance_crop(t, utterances).data for t in container.trials])
    y = np.array([t.label for t in container.trials], dtype=int)
    return X, y


# --------------------------------------------------------------------------
# optimization loop


def _global_clip(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())).item()
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return norm


def fit(
    P: ParamStore,
    cfg: FastConfig,
    X: np.ndarray,
    y: np.ndarray,
    partition: RegionPartition,
    plan: SegmentPlan,
    rate: float,
    settings: TrainSettings,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainRun:
    """Train ``P`` in place for exactly ``settings.epochs`` epochs (no early stopping)."""
    if len(X) == 0:
        raise ValueError("empty training set")
    y = np.asarray(y, dtype=int)
    run = TrainRun(cfg.to_dict(), asdict(settings), settings.seed)
    if settings.epochs == 0:
        return run
    torch.manual_seed(settings.seed)
    Xt = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))
    yt = torch.from_numpy(y)
    names = list(P.params)
    opt = nx.OptimizerState(lr=settings.lr, weight_decay=settings.weight_decay)
    sched = settings.schedule()
    for epoch in range(settings.epochs):
        lr = nx.schedule_lr(sched, epoch)
        order = np.random.default_rng([settings.seed, epoch]).permutation(len(X))
        total, steps, t0 = 0.0, 0, time.time()
        for start in range(0, len(order), settings.batch_size):
            idx = torch.from_numpy(order[start:start + settings.batch_size])
            leaves = {n: P.params[n].requires_grad_(True) for n in names}
            logits = fast_forward(P, cfg, Xt[idx], partition, plan, rate, training=True, mode=settings.mode)
            loss = nx.cross_entropy(logits, yt[idx])
            if not torch.isfinite(loss):
                raise nx.NumericError(f"non-finite loss at epoch {epoch}, step {steps}")
            used = [n for n in names if leaves[n].requires_grad]
            grads = torch.autograd.grad(loss, [leaves[n] for n in used], allow_unused=True)
            grads = {n: g for n, g in zip(used, grads) if g is not None}
            for n in names:
                P.params[n].requires_grad_(False)
            if settings.clip_norm:
                _global_clip(grads, settings.clip_norm)
            nx.adamw_step(P.params, grads, opt, lr)
            total += loss.item() * len(idx)
            steps += 1
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / len(X), "steps": steps,
                 "seconds": round(time.time() - t0, 3)}
        run.log.append(entry)
        log.debug("epoch %d lr %.2e loss %.4f", epoch, lr, entry["train_loss"])
        if on_epoch is not None:
            on_epoch(entry)
    return run


@torch.no_grad()
def predict_scores(
    P: ParamStore,
    cfg: FastConfig,
    X: np.ndarray,
    partition: RegionPartition,
    plan: SegmentPlan,
    rate: float,
    mode: str = "fast",
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode logits for every trial in ``X``."""
    out = []
    for start in range(0, len(X), batch_size):
        xb = torch.from_numpy(np.ascontiguousarray(X[start:start + batch_size], dtype=np.float32))
        out.append(fast_forward(P, cfg, xb, partition, plan, rate, training=False, mode=mode).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, cfg.n_classes))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate_fold(P, cfg, X, y, ids, partition, plan, rate, mode, fold_id, held_out, init) -> FoldResult:
    logits = predict_scores(P, cfg, X[ids], partition, plan, rate, mode)
    probs = _softmax(logits)
    return FoldResult(fold_id, held_out, [int(i) for i in ids], [int(v) for v in y[ids]],
                      [int(v) for v in probs.argmax(1)], probs.tolist(), init)


# --------------------------------------------------------------------------
# the two-phase scheme


@dataclass
class Experiment:
    """Everything a LOSO/LOBO job needs besides the trial arrays."""

    cfg: FastConfig
    partition: RegionPartition
    plan: SegmentPlan
    rate: float
    settings: TrainSettings


def pretrain_loso(
    exp: Experiment,
    X: np.ndarray,
    y: np.ndarray,
    index: DatasetIndex,
    held_out_subject: int,
    seed: int | None = None,
) -> tuple[ParamStore, TrainRun, FoldResult]:
    """Train on every other subject; evaluate once on the held-out subject."""
    seed = exp.settings.seed if seed is None else seed
    train, test = loso_split(index, held_out_subject)
    P = init_params(exp.cfg, seed)
    settings = replace(exp.settings, seed=seed)
    run = fit(P, exp.cfg, X[train], y[train], exp.partition, exp.plan, exp.rate, settings)
    res = evaluate_fold(P, exp.cfg, X, y, test, exp.partition, exp.plan, exp.rate, settings.mode,
                        f"loso-s{held_out_subject}", {"subject": int(held_out_subject)}, "scratch")
    return P, run, res


def _lobo(exp, X, y, index, subject, make_params, init_tag, seed, jobs=1, on_fold=None) -> list[FoldResult]:
    settings = replace(exp.settings, seed=seed)
    folds = lobo_folds(index, subject)

    def one(block, train, test):
        P = make_params()
        fit(P, exp.cfg, X[train], y[train], exp.partition, exp.plan, exp.rate, settings)
        res = evaluate_fold(P, exp.cfg, X, y, test, exp.partition, exp.plan, exp.rate, settings.mode,
                            f"lobo-s{subject}-b{block}", {"subject": int(subject), "block": block}, init_tag)
        if on_fold is not None:
            on_fold(res, P)
        return res

    if jobs > 1:
        from joblib import Parallel, delayed
        return Parallel(n_jobs=jobs)(delayed(one)(*f) for f in folds)
    return [one(*f) for f in folds]


def finetune(
    exp: Experiment,
    pretrained: ParamStore | str | Path,
    X: np.ndarray,
    y: np.ndarray,
    index: DatasetIndex,
    subject: int,
    seed: int | None = None,
    jobs: int = 1,
    on_fold: Callable[[FoldResult, ParamStore], None] | None = None,
) -> list[FoldResult]:
    """LOBO fine-tuning, each fold starting from the same pretrained weights."""
    if isinstance(pretrained, (str, Path)):
        P0, cfg, _ = load_checkpoint(pretrained)
        if cfg != exp.cfg:
            raise ValueError("checkpoint config does not match the experiment configuration")
        tag = f"pretrained:{pretrained}"
    else:
        P0, tag = pretrained, "pretrained"
    seed = exp.settings.seed if seed is None else seed
    return _lobo(exp, X, y, index, subject, P0.clone, tag, seed, jobs, on_fold)


def finetune_from_scratch(
    exp: Experiment,
    X: np.ndarray,
    y: np.ndarray,
    index: DatasetIndex,
    subject: int,
    seed: int | None = None,
    jobs: int = 1,
    on_fold: Callable[[FoldResult, ParamStore], None] | None = None,
) -> list[FoldResult]:
    seed = exp.settings.seed if seed is None else seed
    return _lobo(exp, X, y, index, subject, lambda: init_params(exp.cfg, seed), f"scratch:seed={seed}", seed, jobs,
                 on_fold)
