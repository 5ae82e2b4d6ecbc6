"""Command-line workflow: synth, preprocess, pretrain, finetune, eval, attribute, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attribution as attr
from .config import RunConfig, RunConfigError, parse_override, resolve_config, write_resolved
from .metrics import MetricError, format_table, summarize
from .model import ConfigError, FastConfig, init_params, load_checkpoint, save_checkpoint
from .montage import LayoutError, build_partition
from .preprocess import (FilterSpec, bandpass_spec, design_fir, notch_spec, preprocess_trial, reject_artifacts,
                         utterance_crop)
from .synthdata import ContainerError, DatasetContainer, SynthSpec, generate, read_container, write_container
from .training import (DatasetIndex, Experiment, FoldResult, fit, finetune, finetune_from_scratch,
                       prepare_arrays, pretrain_loso)

log = logging.getLogger("fasteeg")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _overrides(args: argparse.Namespace, names: Sequence[str]) -> dict:
    out = {}
    for text in getattr(args, "set", None) or []:
        k, v = parse_override(text)
        out[k] = v
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def _run_config(args, names=("data", "out", "seed", "epochs", "partition", "jobs", "preset")) -> RunConfig:
    return resolve_config(getattr(args, "config", None), _overrides(args, names))


def _run_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    d = Path(cfg.out)
    (d / "folds").mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, d)
    return d


def _load_data(cfg: RunConfig) -> DatasetContainer:
    if not cfg.data:
        raise UsageError("--data is required")
    c = read_container(cfg.data)
    if not c.trials:
        raise ContainerError(f"{cfg.data} holds no trials")
    return c


def _experiment(cfg: RunConfig, c: DatasetContainer, partition_id: str | None = None) -> Experiment:
    part = build_partition(c.layout, partition_id or cfg.partition)
    fc = FastConfig.for_partition(part, n_classes=c.n_classes, **cfg.model_overrides())
    return Experiment(fc, part, cfg.plan(), c.sample_rate, cfg.train_settings())


def _ckpt_meta(cfg: RunConfig, exp: Experiment, c: DatasetContainer, **extra) -> dict:
    return {"partition": exp.partition.config, "channels": list(c.layout.labels), "sample_rate": exp.rate,
            "window_s": exp.plan.window_s, "stride_s": exp.plan.stride_s, "mode": cfg.mode,
            "utterances": cfg.utterances, **extra}


def _subjects(cfg: RunConfig, c: DatasetContainer) -> list[int]:
    subs = c.subjects if cfg.subjects is None else list(cfg.subjects)
    unknown = set(subs) - set(c.subjects)
    if unknown:
        raise UsageError(f"unknown subject(s) {sorted(unknown)}")
    return subs


def _write_folds(run_dir: Path, folds: Sequence[FoldResult]) -> None:
    for f in folds:
        f.save(run_dir / "folds" / f"{f.fold_id}.json")


def _summary(folds: Sequence[FoldResult], n_classes: int) -> dict:
    groups: dict[str, tuple[list, list, list]] = {}
    for f in folds:
        key = f"subject{f.held_out.get('subject', 'all')}"
        g = groups.setdefault(key, ([], [], []))
        g[0].extend(f.y_true)
        g[1].extend(f.y_pred)
        g[2].extend(f.scores)
    by_subject = summarize({k: (t, p, np.asarray(s)) for k, (t, p, s) in groups.items()}, n_classes)
    by_fold = summarize({f.fold_id: (f.y_true, f.y_pred, np.asarray(f.scores)) for f in folds}, n_classes)
    return {"primary": "subject_mean", "by_subject": by_subject, "by_fold": by_fold}


def _emit(run_dir: Path | None, folds: Sequence[FoldResult], n_classes: int, name="metrics.json") -> dict:
    s = _summary(folds, n_classes)
    if run_dir is not None:
        (run_dir / name).write_text(json.dumps(s, indent=2))
    print(format_table(s["by_subject"]))
    print(json.dumps({"subject_mean": s["by_subject"]["mean"], "pooled": s["by_subject"]["pooled"],
                      "chance": s["by_subject"]["chance"]}))
    return s


def _lobo_all(cfg, exp, c, start, run_dir, tag) -> list[FoldResult]:
    """LOBO for every requested subject and seed; ``start`` is None (scratch),
    a checkpoint path, or a pretraining run directory."""
    X, y = prepare_arrays(c, cfg.utterances)
    index = DatasetIndex.from_container(c)
    folds: list[FoldResult] = []
    for seed in cfg.seeds:
        on_fold = None
        if cfg.save_models:
            (run_dir / "models").mkdir(exist_ok=True)

            def on_fold(res, P, seed=seed):
                save_checkpoint(P, exp.cfg, run_dir / "models" / f"{res.fold_id}-seed{seed}.ckpt",
                                _ckpt_meta(cfg, exp, c, kind="lobo", fold=res.fold_id, seed=seed))
        for s in _subjects(cfg, c):
            if start is None:
                res = finetune_from_scratch(exp, X, y, index, s, seed, cfg.jobs, on_fold)
            else:
                ck = Path(start)
                if ck.is_dir():
                    ck = ck / "models" / f"loso-s{s}.ckpt"
                    if not ck.exists():
                        raise ContainerError(f"pretraining run has no model for subject {s}: {ck}")
                res = finetune(exp, ck, X, y, index, s, seed, cfg.jobs, on_fold)
            if len(cfg.seeds) > 1:
                res = [replace(f, fold_id=f"{f.fold_id}-seed{seed}") for f in res]
            folds.extend(res)
            log.info("%s subject %d seed %d: mean fold accuracy %.3f", tag, s, seed,
                     np.mean([f.accuracy for f in res]))
    _write_folds(run_dir, folds)
    return folds


def _write_run(run_dir: Path, cfg: RunConfig, exp: Experiment, command: str, **extra) -> None:
    info = {"command": command, "config": cfg.to_dict(), "model": exp.cfg.to_dict(),
            "n_params": init_params(exp.cfg, 0).n_params(), **extra}
    (run_dir / "run.json").write_text(json.dumps(info, indent=2))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        spec = json.loads(Path(args.spec).read_text() or "{}")
    for text in args.set or []:
        k, v = parse_override(text)
        spec[k] = v
    if args.seed is not None:
        spec["seed"] = args.seed
    try:
        s = SynthSpec.from_dict(spec)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid synthetic spec: {e}") from e
    c = generate(s)
    write_container(c, args.out)
    print(json.dumps({"out": str(args.out), "n_trials": len(c), "subjects": c.subjects,
                      "shape": list(c.trials[0].data.shape)}))
    return 0


def cmd_preprocess(args) -> int:
    cfg = _run_config(args, ("data", "out"))
    c = _load_data(cfg)
    rate = c.sample_rate
    specs: list[FilterSpec] = []
    if cfg.bandpass_hz:
        specs.append(bandpass_spec(rate, *cfg.bandpass_hz, transition_hz=cfg.transition_hz))
    if cfg.notch_hz is not None and cfg.notch_hz + cfg.notch_half_width_hz < rate / 2:
        specs.append(notch_spec(rate, cfg.notch_hz, cfg.notch_half_width_hz, transition_hz=cfg.transition_hz))
    coeffs = [design_fir(s) for s in specs]
    bp = coeffs[0] if cfg.bandpass_hz else None
    notch = coeffs[-1] if len(coeffs) > (1 if cfg.bandpass_hz else 0) else None
    kept, dropped = [], 0
    for t in c.trials:
        p = preprocess_trial(t, bp, notch, cfg.target_rate, cfg.baseline_s, cfg.tmin_s, cfg.tmax_s)
        if cfg.reject_uv is not None and not reject_artifacts(p, cfg.reject_uv):
            dropped += 1
            continue
        kept.append(p)
    out = DatasetContainer(replace(c.layout, sample_rate=cfg.target_rate), cfg.target_rate, kept, c.n_classes,
                           {**c.meta, "preprocessed": True})
    write_container(out, cfg.out)
    report = {"n_trials_in": len(c), "n_dropped": dropped,
              "filter_specs": [{"kind": s.kind, "edges": list(s.edges), "sample_rate": s.sample_rate,
                                "n_taps": s.taps(), "window": "hamming", "zero_phase": s.zero_phase} for s in specs],
              "rates": {"input": rate, "output": cfg.target_rate}}
    (Path(cfg.out) / "preprocess_report.json").write_text(json.dumps(report, indent=2))
    write_resolved(cfg, cfg.out)
    print(json.dumps(report))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    c = _load_data(cfg)
    run_dir = _run_dir(cfg)
    exp = _experiment(cfg, c)
    exp = replace(exp, settings=replace(exp.settings, epochs=cfg.pretrain_epochs))
    X, y = prepare_arrays(c, cfg.utterances)
    index = DatasetIndex.from_container(c)
    (run_dir / "models").mkdir(exist_ok=True)
    folds, logs = [], {}
    for s in _subjects(cfg, c):
        P, run, res = pretrain_loso(exp, X, y, index, s)
        save_checkpoint(P, exp.cfg, run_dir / "models" / f"loso-s{s}.ckpt",
                        _ckpt_meta(cfg, exp, c, kind="loso", held_out_subject=s))
        folds.append(res)
        logs[f"loso-s{s}"] = run.log
        log.info("LOSO held-out subject %d: accuracy %.3f", s, res.accuracy)
    _write_folds(run_dir, folds)
    if cfg.final_model:
        P = init_params(exp.cfg, exp.settings.seed)
        run = fit(P, exp.cfg, X, y, exp.partition, exp.plan, exp.rate, exp.settings)
        save_checkpoint(P, exp.cfg, run_dir / "model.ckpt", _ckpt_meta(cfg, exp, c, kind="all-subjects"))
        logs["all-subjects"] = run.log
    _write_run(run_dir, cfg, exp, "pretrain", logs=logs)
    _emit(run_dir, folds, exp.cfg.n_classes)
    return 0


def cmd_finetune(args) -> int:
    cfg = _run_config(args)
    if bool(args.from_) == bool(args.scratch):
        raise UsageError("finetune needs exactly one of --from or --scratch")
    c = _load_data(cfg)
    run_dir = _run_dir(cfg)
    exp = _experiment(cfg, c)
    folds = _lobo_all(cfg, exp, c, args.from_, run_dir, "finetune")
    _write_run(run_dir, cfg, exp, "finetune", init=args.from_ or "scratch")
    _emit(run_dir, folds, exp.cfg.n_classes)
    return 0


def cmd_eval(args) -> int:
    paths: list[Path] = []
    for r in args.runs:
        r = Path(r)
        found = sorted((r / "folds").glob("*.json")) if (r / "folds").is_dir() else sorted(r.glob("*.json"))
        if r.is_file():
            found = [r]
        paths.extend(found)
    if not paths:
        raise ContainerError("no FoldResult files found")
    folds = [FoldResult.load(p) for p in paths]
    n_classes = args.n_classes or max(len(f.scores[0]) for f in folds if f.scores)
    s = _summary(folds, n_classes)
    if args.out:
        Path(args.out).write_text(json.dumps(s, indent=2))
    print(format_table(s["by_subject"]))
    print(json.dumps({"subject_mean": s["by_subject"]["mean"], "pooled": s["by_subject"]["pooled"],
                      "chance": s["by_subject"]["chance"]}))
    return 0


def cmd_attribute(args) -> int:
    cfg = _run_config(args, ("data", "out"))
    ck = Path(args.ckpt)
    if ck.is_dir():
        ck = ck / "model.ckpt"
    P, fc, meta = load_checkpoint(ck)
    c = _load_data(cfg)
    if list(c.layout.labels) != meta.get("channels", list(c.layout.labels)):
        raise LayoutError("dataset channels differ from the checkpoint's layout")
    part = build_partition(c.layout, meta.get("partition", cfg.partition))
    plan = replace(cfg.plan(), window_s=meta.get("window_s", cfg.window_s), stride_s=meta.get("stride_s", cfg.stride_s))
    f = attr.model_function(P, fc, part, plan, c.sample_rate, meta.get("mode", "fast"))
    out = Path(cfg.out or "attribution")
    out.mkdir(parents=True, exist_ok=True)
    trials = [t for t in c.trials if cfg.subjects is None or t.subject in cfg.subjects]
    if cfg.max_trials is not None:
        trials = trials[:cfg.max_trials]
    maps, timelines, gaps = [], [], []
    for t in trials:
        x = utterance_crop(t, meta.get("utterances", cfg.utterances))
        m = attr.integrated_gradients(f, x.data, None, t.label, cfg.ig_steps)
        maps.append(m)
        gaps.append(m.completeness_gap)
        timelines.append(attr.activation_timeline(P, fc, t, part, cfg.scan_window_s, cfg.scan_step_s))
    sal = attr.channel_saliency(maps, c.layout.labels, c.sample_rate)
    attr.write_saliency_csv(out / "saliency_channels.csv", sal)
    attr.write_timeline_csv(out / "timeline.csv", _mean_timeline(timelines))
    labels = [t.label for t in trials]
    written = []
    if len(set(labels)) >= 2:
        written = [str(p) for p in attr.write_contrast_csvs(out, attr.normalize_and_average(timelines, labels))]
    summary = {"n_trials": len(trials), "ig_steps": cfg.ig_steps, "max_completeness_gap": max(gaps),
               "contrast_files": written}
    (out / "attribution.json").write_text(json.dumps(summary, indent=2))
    write_resolved(cfg, out)
    print(json.dumps(summary))
    return 0


def _mean_timeline(timelines: list[attr.ActivationTimeline]) -> attr.ActivationTimeline:
    t0 = timelines[0]
    return replace(t0, values=np.mean([t.values for t in timelines], axis=0))


def cmd_ablate(args) -> int:
    mode = args.mode
    kind = mode[0]
    over = {}
    partition_id = None
    start = args.from_
    if kind == "no-te" and len(mode) == 1:
        over["mode"] = "no-te"
    elif kind == "no-pretrain" and len(mode) == 1:
        start = None
    elif kind == "utterances" and len(mode) == 2:
        try:
            over["utterances"] = int(mode[1])
        except ValueError as e:
            raise UsageError("--mode utterances needs an integer 1..5") from e
    elif kind == "partition" and len(mode) == 2:
        partition_id = mode[1]
        over["partition"] = partition_id
        if start is not None:
            raise UsageError("partition ablations change the architecture; drop --from")
    else:
        raise UsageError("--mode must be one of: no-te | no-pretrain | utterances K | partition ID")
    cfg = resolve_config(args.config, {**_overrides(args, ("data", "out", "seed", "epochs", "jobs", "preset")), **over})
    c = _load_data(cfg)
    run_dir = _run_dir(cfg)
    exp = _experiment(cfg, c, partition_id)
    folds = _lobo_all(cfg, exp, c, start, run_dir, f"ablate {' '.join(mode)}")
    _write_run(run_dir, cfg, exp, "ablate", ablation=mode, init=start or "scratch")
    _emit(run_dir, folds, exp.cfg.n_classes)
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", help="dataset container directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    if training:
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--partition")
        p.add_argument("--preset", choices=("default", "desk"))
        p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fasteeg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset container")
    p.add_argument("--spec", help="SynthSpec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, decimate, baseline-correct and epoch a container")
    _common(p, training=False)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="leave-one-subject-out pretraining")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="leave-one-block-out fine-tuning per subject")
    _common(p)
    p.add_argument("--from", dest="from_", help="checkpoint file or pretraining run directory")
    p.add_argument("--scratch", action="store_true", help="start every fold from random weights")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="metrics over FoldResult files")
    p.add_argument("runs", nargs="+", help="run directories or FoldResult files")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--n-classes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="integrated gradients and activation timelines")
    _common(p, training=False)
    p.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("ablate", help="LOBO runs with one component changed")
    _common(p)
    p.add_argument("--mode", nargs="+", required=True, metavar="MODE",
                   help="no-te | no-pretrain | utterances K | partition ID")
    p.add_argument("--from", dest="from_", help="start from this checkpoint or pretraining run")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, RunConfigError) as e:
        print(f"fasteeg {args.command}: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2
    except (ContainerError, ConfigError, LayoutError, MetricError, ValueError, KeyError, OSError,
            FloatingPointError) as e:
        print(f"fasteeg {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
