"""Synthetic multi-utterance EEG with planted class signatures, and the
on-disk dataset container (``manifest.json`` + one binary file per trial).

Trial file layout (little-endian)::

    8s  magic  b"EEGTRIAL"
    u32 version (1)
    u32 n_channels
    u32 n_samples
    f32 sample_rate
    u8  label
    f32 samples[n_channels * n_samples]   channel-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.signal import welch

from .montage import (CAP_GROUND, CAP_REFERENCE, ChannelLayout, build_partition, default_layout,
                      load_layout, toy_layout)
from .preprocess import EEGTrial, N_UTTERANCES, UTTERANCE_S

TRIAL_MAGIC = b"EEGTRIAL"
TRIAL_VERSION = 1
_TRIAL_HEADER = struct.Struct("<8sIIIfB")


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    regions: tuple[str, ...]   # M8 region names carrying the burst
    carrier_hz: float


DEFAULT_SIGNATURES = (
    Signature(("frontal",), 8.0),
    Signature(("left_temporal",), 8.0),
    Signature(("right_temporal",), 8.0),
    Signature(("frontal",), 16.0),
    Signature(("left_temporal",), 16.0),
)


@dataclass
class SynthSpec:
    n_subjects: int = 5
    blocks_per_subject: int = 5
    trials_per_block: int = 20
    n_classes: int = 5
    layout: str = "cap64"            # cap64 | toy
    sample_rate: float = 200.0
    trial_s: float = 10.0
    pre_s: float = 0.0               # recorded time before the first cue
    post_s: float = 0.0
    snr_db: float = 20.0             # burst power over broadband background power
    signatures: tuple = DEFAULT_SIGNATURES
    burst_s: float = 0.8
    burst_delay_s: float = 0.2       # burst start after each utterance cue
    onset_jitter_s: float = 0.1
    decay: float = 0.9               # per-utterance amplitude factor
    burst_prob: float = 1.0          # chance that a given utterance carries the burst
    noise_uv: float = 10.0
    aperiodic_exponent: float = 1.0
    common_mode: float = 0.1
    subject_variability: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.signatures = tuple(s if isinstance(s, Signature) else
                                Signature(tuple(s["regions"]), float(s["carrier_hz"]))
                                for s in self.signatures)
        self.validate()

    def validate(self) -> None:
        if min(self.n_subjects, self.blocks_per_subject, self.trials_per_block) < 1:
            raise ValueError("subjects, blocks and trials must be positive")
        if len(self.signatures) != self.n_classes:
            raise ValueError(f"{self.n_classes} classes need {self.n_classes} signatures")
        keys = [(tuple(sorted(s.regions)), s.carrier_hz) for s in self.signatures]
        if len(set(keys)) != len(keys):
            raise ValueError("class signatures must be pairwise distinct in (region, carrier)")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if not 0 < self.burst_prob <= 1:
            raise ValueError("burst_prob must lie in (0, 1]")
        if self.layout not in ("cap64", "toy"):
            raise ValueError(f"unknown layout id {self.layout!r}")
        if any(s.carrier_hz >= self.sample_rate / 2 for s in self.signatures):
            raise ValueError("carrier above Nyquist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signatures"] = [{"regions": list(s.regions), "carrier_hz": s.carrier_hz} for s in self.signatures]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**d)

    def make_layout(self) -> ChannelLayout:
        return default_layout(self.sample_rate) if self.layout == "cap64" else toy_layout(self.sample_rate)


@dataclass
class DatasetContainer:
    layout: ChannelLayout
    sample_rate: float
    trials: list[EEGTrial] = field(default_factory=list)
    n_classes: int = 5
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def subjects(self) -> list[int]:
        return sorted({t.subject for t in self.trials})

    def arrays(self):
        """Stacked ``(X, y, subjects, blocks)``; every trial must share one shape."""
        if not self.trials:
            return (np.zeros((0, self.layout.n_channels, 0), np.float32), np.zeros(0, int),
                    np.zeros(0, int), np.zeros(0, int))
        X = np.stack([t.data for t in self.trials])
        y = np.array([t.label for t in self.trials])
        s = np.array([t.subject for t in self.trials])
        b = np.array([t.block for t in self.trials])
        return X, y, s, b

    def select(self, mask) -> "DatasetContainer":
        trials = [t for t, keep in zip(self.trials, mask) if keep]
        return DatasetContainer(self.layout, self.sample_rate, trials, self.n_classes, dict(self.meta))


# --------------------------------------------------------------------------
# generation


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], rate: float, exponent: float) -> np.ndarray:
    """Unit-RMS noise with a 1/f^exponent power spectrum along the last axis."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    f[0] = f[1] if n > 1 else 1.0
    x = np.fft.irfft(spec * f ** (-exponent / 2.0), n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    return x / (x.std(axis=-1, keepdims=True) + 1e-12)


def _subject_params(spec: SynthSpec, subject: int, layout: ChannelLayout) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1_000_003, subject]))
    v = spec.subject_variability
    return {
        "gain": np.exp(v * rng.standard_normal(layout.n_channels)),
        "carrier_shift": v * rng.uniform(-1.0, 1.0, spec.n_classes),
        "phase": rng.uniform(0, 2 * np.pi, spec.n_classes),
        "weights": rng.uniform(0.5, 1.0, (spec.n_classes, layout.n_channels)),
    }


def _block_labels(spec: SynthSpec, subject: int, block: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2_000_003, subject, block]))
    reps = -(-spec.trials_per_block // spec.n_classes)
    labels = np.tile(np.arange(spec.n_classes), reps)[:spec.trials_per_block]
    return rng.permutation(labels)


def generate_trial(spec: SynthSpec, layout: ChannelLayout, subject: int, block: int, index: int,
                   label: int, subj: dict | None = None) -> EEGTrial:
    fs = spec.sample_rate
    subj = subj if subj is not None else _subject_params(spec, subject, layout)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, subject, block, index]))
    n_pre = int(round(spec.pre_s * fs))
    n = n_pre + int(round((spec.trial_s + spec.post_s) * fs))
    C = layout.n_channels
    noise = pink_noise(rng, (C, n), fs, spec.aperiodic_exponent)
    common = pink_noise(rng, (1, n), fs, spec.aperiodic_exponent)
    x = spec.noise_uv * (noise + spec.common_mode * common)

    sig = spec.signatures[label]
    part = build_partition(layout, "M8")
    mask = np.zeros(C)
    for region in sig.regions:
        idx = part.indices[part.region_names.index(region)]
        mask[list(idx)] = subj["weights"][label, list(idx)]
    # sinusoid power a^2/2 inside the burst equals snr times the background power
    amp = np.sqrt(2.0) * spec.noise_uv * 10 ** (spec.snr_db / 20.0)
    carrier = sig.carrier_hz + subj["carrier_shift"][label]
    t = np.arange(n) / fs
    burst = np.zeros(n)
    n_burst = int(round(spec.burst_s * fs))
    env = np.hanning(n_burst) * np.sqrt(8.0 / 3.0)  # unit mean power over the burst
    n_utt = int(spec.trial_s // UTTERANCE_S)
    for u in range(min(n_utt, N_UTTERANCES)):
        present = rng.uniform() < spec.burst_prob
        jitter = rng.uniform(-spec.onset_jitter_s, spec.onset_jitter_s)
        phase = subj["phase"][label] + rng.uniform(0, 2 * np.pi)
        if not present:
            continue
        start = n_pre + int(round((u * UTTERANCE_S + spec.burst_delay_s + jitter) * fs))
        start = max(start, 0)
        stop = min(start + n_burst, n)
        seg = slice(start, stop)
        burst[seg] += (spec.decay ** u) * env[:stop - start] * np.sin(2 * np.pi * carrier * t[seg] + phase)
    x += amp * mask[:, None] * burst[None, :]
    x *= subj["gain"][:, None]
    return EEGTrial(x.astype(np.float32), fs, int(label), subject, block, n_pre)


def generate(spec: SynthSpec) -> DatasetContainer:
    """Every trial is a pure function of (spec, subject, block, trial index)."""
    spec.validate()
    layout = spec.make_layout()
    trials = []
    for s in range(spec.n_subjects):
        subj = _subject_params(spec, s, layout)
        for b in range(spec.blocks_per_subject):
            for i, label in enumerate(_block_labels(spec, s, b)):
                trials.append(generate_trial(spec, layout, s, b, i, int(label), subj))
    return DatasetContainer(layout, spec.sample_rate, trials, spec.n_classes, {"synth_spec": spec.to_dict()})


# --------------------------------------------------------------------------
# container I/O


def write_trial_file(path: str | Path, trial: EEGTrial) -> None:
    data = np.ascontiguousarray(trial.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_TRIAL_HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, data.shape[0], data.shape[1],
                                    float(trial.sample_rate), int(trial.label)))
        fh.write(data.tobytes())


def read_trial_file(path: str | Path) -> tuple[np.ndarray, float, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _TRIAL_HEADER.size:
        raise ContainerError(f"{path}: truncated trial header")
    magic, version, nc, ns, rate, label = _TRIAL_HEADER.unpack_from(raw)
    if magic != TRIAL_MAGIC:
        raise ContainerError(f"{path}: bad magic")
    if version != TRIAL_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    expected = _TRIAL_HEADER.size + 4 * nc * ns
    if len(raw) != expected:
        raise ContainerError(f"{path}: {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_TRIAL_HEADER.size).reshape(nc, ns).astype(np.float32)
    return data, float(rate), int(label)


def write_container(container: DatasetContainer, path: str | Path) -> Path:
    root = Path(path)
    (root / "trials").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(container.trials):
        name = f"trials/{i:05d}_s{t.subject:03d}_b{t.block}.bin"
        write_trial_file(root / name, t)
        entries.append({"file": name, "subject": t.subject, "block": t.block, "label": t.label,
                        "cue_onset": t.cue_onset, "n_channels": t.n_channels, "n_samples": t.n_samples})
    lay = container.layout
    manifest = {
        "format": "fasteeg-dataset",
        "version": 1,
        "sample_rate": container.sample_rate,
        "n_classes": container.n_classes,
        "layout": {"channels": list(lay.labels), "reference": lay.reference, "ground": lay.ground},
        "subjects": sorted({t.subject for t in container.trials}),
        "blocks": sorted({t.block for t in container.trials}),
        "n_trials": len(entries),
        "trials": entries,
        "meta": container.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _manifest(path: str | Path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise ContainerError(f"{path}: no manifest.json")
    m = json.loads(mpath.read_text())
    if m.get("format") != "fasteeg-dataset":
        raise ContainerError(f"{path}: not a fasteeg dataset")
    if m["n_trials"] != len(m["trials"]):
        raise ContainerError(f"{path}: manifest declares {m['n_trials']} trials but lists {len(m['trials'])}")
    return m


def iter_trials(path: str | Path) -> Iterator[EEGTrial]:
    """Trials in manifest order."""
    root = Path(path)
    m = _manifest(root)
    rate = float(m["sample_rate"])
    for e in m["trials"]:
        fpath = root / e["file"]
        if not fpath.exists():
            raise ContainerError(f"missing trial file {e['file']}")
        data, frate, label = read_trial_file(fpath)
        if data.shape != (e["n_channels"], e["n_samples"]):
            raise ContainerError(f"{e['file']}: shape {data.shape} != manifest {(e['n_channels'], e['n_samples'])}")
        if label != e["label"] or frate != np.float32(rate):
            raise ContainerError(f"{e['file']}: label/rate disagree with the manifest")
        yield EEGTrial(data, rate, label, e["subject"], e["block"], e["cue_onset"])


def read_container(path: str | Path) -> DatasetContainer:
    m = _manifest(path)
    files = {e["file"] for e in m["trials"]}
    present = {f"trials/{p.name}" for p in (Path(path) / "trials").glob("*.bin")} if (Path(path) / "trials").exists() else set()
    missing = files - present
    if missing:
        raise ContainerError(f"{len(missing)} trial file(s) listed in the manifest are missing, e.g. {sorted(missing)[0]}")
    layout = load_layout(m["layout"] | {"sample_rate": m["sample_rate"]})
    return DatasetContainer(layout, float(m["sample_rate"]), list(iter_trials(path)), int(m["n_classes"]), m.get("meta", {}))


# --------------------------------------------------------------------------
# learnability probe


def bandpower_features(container: DatasetContainer, fmin: float = 4.0, fmax: float = 40.0, width: float = 4.0) -> np.ndarray:
    """Per-region log band power in ``width``-Hz bins, from the cue onward."""
    part = build_partition(container.layout, "M8")
    edges = np.arange(fmin, fmax + 1e-9, width)
    feats = []
    for t in container.trials:
        x = t.data[:, t.cue_onset:]
        f, pxx = welch(x, fs=t.sample_rate, nperseg=min(int(t.sample_rate), x.shape[-1]))
        row = []
        for idx in part.indices:
            p = pxx[list(idx)].mean(axis=0)
            for lo, hi in zip(edges[:-1], edges[1:]):
                sel = (f >= lo) & (f < hi)
                row.append(np.log(p[sel].mean() + 1e-20))
        feats.append(row)
    return np.asarray(feats)


def separability_probe(container: DatasetContainer, shuffle_labels: bool = False, seed: int = 0) -> float:
    """Subject-held-out nearest-centroid accuracy on region band-power features."""
    X = bandpower_features(container)
    _, y, subjects, _ = container.arrays()
    if len(np.unique(y)) < 2:
        raise ValueError("separability probe needs at least two classes")
    if shuffle_labels:
        y = np.random.default_rng(seed).permutation(y)
    if not np.all(np.isfinite(X)) or np.all(X.std(axis=0) == 0):
        raise ValueError("degenerate band-power features")
    groups = np.unique(subjects)
    correct = 0
    for g in groups:
        train, test = subjects != g, subjects == g
        if len(groups) == 1:
            train = test
        mu, sd = X[train].mean(0), X[train].std(0) + 1e-9
        Z = (X - mu) / sd
        classes = np.unique(y[train])
        cents = np.stack([Z[train][y[train] == c].mean(0) for c in classes])
        d = ((Z[test][:, None, :] - cents[None]) ** 2).sum(-1)
        correct += int((classes[d.argmin(1)] == y[test]).sum())
    return correct / len(y)
