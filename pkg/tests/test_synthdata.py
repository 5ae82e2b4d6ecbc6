import json
import struct

import numpy as np
import pytest

from fasteeg.metrics import chance_interval
from fasteeg.montage import build_partition
from fasteeg.synthdata import (ContainerError, DatasetContainer, Signature, SynthSpec, generate, iter_trials,
                               read_container, read_trial_file, separability_probe, write_container,
                               write_trial_file)


@pytest.fixture(scope="module")
def easy():
    return generate(SynthSpec(n_subjects=3, seed=5))


def test_default_shapes_and_balance(easy):
    assert len(easy) == 3 * 5 * 20
    assert easy.trials[0].data.shape == (62, 2000)
    for s in range(3):
        for b in range(5):
            labels = [t.label for t in easy.trials if t.subject == s and t.block == b]
            assert sorted(labels) == sorted(list(range(5)) * 4)


def test_same_seed_bit_identical():
    a = generate(SynthSpec(n_subjects=1, trials_per_block=3, layout="toy", seed=9))
    b = generate(SynthSpec(n_subjects=1, trials_per_block=3, layout="toy", seed=9))
    c = generate(SynthSpec(n_subjects=1, trials_per_block=3, layout="toy", seed=10))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.trials, b.trials))
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(a.trials, c.trials))


def test_spec_validation():
    with pytest.raises(ValueError, match="distinct"):
        SynthSpec(signatures=[Signature(("frontal",), 8.0)] * 5)
    with pytest.raises(ValueError):
        SynthSpec(decay=0.0)
    with pytest.raises(ValueError):
        SynthSpec(snr_db=float("inf"))
    with pytest.raises(ValueError, match="unknown"):
        SynthSpec.from_dict({"n_subject": 3})
    s = SynthSpec(snr_db=3.0, burst_prob=0.5)
    assert SynthSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def _carrier_power(x, fs, f0, width=1.0):
    f = np.fft.rfftfreq(x.shape[-1], 1 / fs)
    p = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    sel = (f >= f0 - width) & (f <= f0 + width)
    return p[..., sel].sum(axis=-1)


def test_planted_energy_contrast_at_easy_snr(easy):
    """Carrier band power in the signature region beats the other regions by >= 10 dB."""
    part = build_partition(easy.layout, "M8")
    spec = SynthSpec()
    contrasts = []
    for t in easy.trials:
        sig = spec.signatures[t.label]
        pw = _carrier_power(t.data.astype(np.float64), 200.0, sig.carrier_hz)
        inside = [i for r in sig.regions for i in part.indices[part.region_names.index(r)]]
        outside = [i for i in range(62) if i not in inside]
        contrasts.append(10 * np.log10(pw[inside].mean() / pw[outside].mean()))
    assert np.mean(contrasts) >= 10


def test_decay_makes_utterance_power_non_increasing():
    c = generate(SynthSpec(n_subjects=1, trials_per_block=10, decay=0.7, onset_jitter_s=0.0, seed=2))
    part = build_partition(c.layout, "M8")
    spec = SynthSpec()
    per_utt = np.zeros(5)
    for t in c.trials:
        sig = spec.signatures[t.label]
        idx = [i for r in sig.regions for i in part.indices[part.region_names.index(r)]]
        for u in range(5):
            seg = t.data[idx, u * 400:(u + 1) * 400].astype(np.float64)
            per_utt[u] += _carrier_power(seg, 200.0, sig.carrier_hz, 2.0).mean()
    assert np.all(np.diff(per_utt) <= 0)


def test_burst_prob_removes_bursts():
    base = dict(n_subjects=1, trials_per_block=5, layout="toy", seed=3, noise_uv=1e-6, common_mode=0.0)
    full = generate(SynthSpec(**base))
    partial = generate(SynthSpec(**base, burst_prob=0.3))
    energy = lambda c: np.array([[np.abs(t.data[:, u * 400:(u + 1) * 400]).max() for u in range(5)] for t in c.trials])
    # the random stream is shared, so a kept burst reproduces the all-present value exactly
    ref, e = energy(full), energy(partial)
    kept = e == ref
    assert kept.any() and (~kept).any()
    assert np.all(e[~kept] < 0.7 * ref[~kept])


def test_probe_easy_and_shuffled(easy):
    assert separability_probe(easy) >= 0.7
    acc = separability_probe(easy, shuffle_labels=True)
    lo, hi = chance_interval(0.2, len(easy))
    assert lo <= acc <= hi


def test_probe_single_class_rejected(easy):
    with pytest.raises(ValueError):
        separability_probe(easy.select([t.label == 0 for t in easy.trials]))


# --- container format ---------------------------------------------------------

def test_container_round_trip(tmp_path):
    c = generate(SynthSpec(n_subjects=2, trials_per_block=2, layout="toy", pre_s=1.0, seed=4))
    write_container(c, tmp_path / "d")
    r = read_container(tmp_path / "d")
    assert len(r) == len(c) and r.layout.labels == c.layout.labels
    for a, b in zip(c.trials, r.trials):
        assert a.data.tobytes() == b.data.tobytes()
        assert (a.label, a.subject, a.block, a.cue_onset) == (b.label, b.subject, b.block, b.cue_onset)
    assert [t.label for t in iter_trials(tmp_path / "d")] == [t.label for t in c.trials]


def test_trial_file_layout(tmp_path):
    c = generate(SynthSpec(n_subjects=1, trials_per_block=1, layout="toy", seed=1))
    t = c.trials[0]
    write_trial_file(tmp_path / "t.bin", t)
    raw = (tmp_path / "t.bin").read_bytes()
    magic, version, nc, ns, rate, label = struct.unpack_from("<8sIIIfB", raw)
    assert (magic, version, nc, ns, rate, label) == (b"EEGTRIAL", 1, 8, 2000, 200.0, t.label)
    body = np.frombuffer(raw, "<f4", offset=struct.calcsize("<8sIIIfB")).reshape(8, 2000)
    assert np.array_equal(body, t.data)
    data, _, _ = read_trial_file(tmp_path / "t.bin")
    assert np.array_equal(data, t.data)


def test_container_errors(tmp_path):
    c = generate(SynthSpec(n_subjects=1, blocks_per_subject=2, trials_per_block=5, layout="toy", seed=1))
    root = write_container(c, tmp_path / "d")
    files = sorted((root / "trials").glob("*.bin"))
    files[0].unlink()
    with pytest.raises(ContainerError, match="missing"):
        read_container(root)
    root2 = write_container(c, tmp_path / "e")
    f = sorted((root2 / "trials").glob("*.bin"))[0]
    f.write_bytes(b"NOTTRIAL" + f.read_bytes()[8:])
    with pytest.raises(ContainerError, match="magic"):
        read_container(root2)
    root3 = write_container(c, tmp_path / "f")
    m = json.loads((root3 / "manifest.json").read_text())
    m["trials"][0]["n_samples"] = 10
    (root3 / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ContainerError, match="shape"):
        read_container(root3)
    with pytest.raises(ContainerError):
        read_container(tmp_path / "nothing")


def test_empty_container(tmp_path):
    c = generate(SynthSpec(n_subjects=1, trials_per_block=1, layout="toy"))
    empty = DatasetContainer(c.layout, 200.0, [], 5)
    write_container(empty, tmp_path / "z")
    assert len(read_container(tmp_path / "z")) == 0
