import csv

import numpy as np
import pytest
import torch

from fasteeg.attribution import (ActivationTimeline, AttributionError, AttributionMap, activation_timeline,
                                 channel_saliency, integrated_gradients, model_function, normalize_and_average,
                                 timeline_count, trapezoid_weights, write_contrast_csvs, write_saliency_csv,
                                 write_timeline_csv, zscore_time)
from fasteeg.model import init_params, segment_tokens
from fasteeg.preprocess import EEGTrial, SegmentPlan

from conftest import tiny_config, tiny_partition

PLAN = SegmentPlan(1.0, 1.0)


def tiny_model(seed=0):
    cfg = tiny_config()
    P = init_params(cfg, seed, dtype=torch.float64)
    return P, cfg, model_function(P, cfg, tiny_partition(), PLAN, 16.0)


# --- integrated gradients -------------------------------------------------------

def test_trapezoid_weights_sum_to_one():
    for n in (1, 2, 7, 64):
        w = trapezoid_weights(n)
        assert w.sum() == pytest.approx(1.0) and w[0] == w[-1] == 0.5 / n


def test_linear_model_exact(rng):
    w = torch.as_tensor(rng.normal(size=(3, 4, 10)))
    f = lambda x: torch.einsum("bct,kct->bk", x, w)
    x, base = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
    m = integrated_gradients(f, x, base, target=1, steps=7)
    np.testing.assert_allclose(m.values, (x - base) * w[1].numpy(), atol=1e-8)
    assert m.baseline_id == "custom" and m.steps == 7
    assert m.completeness_gap < 1e-8


def test_zero_map_at_baseline(rng):
    _, _, f = tiny_model()
    x = rng.normal(size=(6, 48))
    m = integrated_gradients(f, x, x.copy(), target=0, steps=8)
    assert np.all(m.values == 0) and m.delta == 0 and m.completeness_gap == 0


@pytest.mark.parametrize("seed", range(4))
def test_completeness_on_tiny_model(seed):
    _, _, f = tiny_model(seed)
    x = np.random.default_rng(seed).normal(size=(6, 48))
    coarse = integrated_gradients(f, x, target=seed % 5, steps=16)
    fine = integrated_gradients(f, x, target=seed % 5, steps=256)
    assert fine.values.shape == (6, 48) and fine.baseline_id == "zeros"
    with torch.no_grad():
        direct = (f(torch.as_tensor(x)[None]) - f(torch.zeros(1, 6, 48, dtype=torch.float64)))[0, seed % 5].item()
    assert fine.delta == pytest.approx(direct, rel=1e-12)
    assert abs(fine.total - direct) / abs(direct) <= 0.01
    assert fine.completeness_gap <= coarse.completeness_gap


def test_linear_in_target(rng):
    _, _, f = tiny_model(1)
    x = rng.normal(size=(6, 48))
    a = integrated_gradients(f, x, target=0, steps=32).values
    b = integrated_gradients(f, x, target=2, steps=32).values
    g = lambda z: (f(z)[:, 0] - f(z)[:, 2])[:, None]
    np.testing.assert_allclose(integrated_gradients(g, x, target=0, steps=32).values, a - b, atol=1e-10)


def test_batching_does_not_change_result(rng):
    _, _, f = tiny_model(2)
    x = rng.normal(size=(6, 48))
    a = integrated_gradients(f, x, target=1, steps=20, batch_size=3).values
    b = integrated_gradients(f, x, target=1, steps=20, batch_size=64).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_ig_errors(rng):
    _, _, f = tiny_model()
    with pytest.raises(AttributionError, match="shape"):
        integrated_gradients(f, rng.normal(size=(6, 48)), np.zeros((6, 40)))
    with pytest.raises(AttributionError):
        integrated_gradients(f, rng.normal(size=(6, 48)), steps=0)


# --- timelines --------------------------------------------------------------------

def test_window_count_for_twelve_second_scan():
    assert timeline_count(2400, 200.0, 1.0, 0.02) == 551
    with pytest.raises(AttributionError):
        timeline_count(150, 200.0, 1.0, 0.02)


def test_timeline_shape_and_times():
    P, cfg, _ = tiny_model()
    tr = EEGTrial(np.random.default_rng(0).normal(size=(6, 64)), 16.0, cue_onset=16)
    tl = activation_timeline(P, cfg, tr, tiny_partition(), 1.0, 0.25)
    assert tl.values.shape == (timeline_count(64, 16.0, 1.0, 0.25), 2, 4) == (13, 2, 4)
    assert tl.times[0] == -1.0 and tl.times[1] == -0.75
    assert tl.region_names == ("frontal", "temporal")


def test_timeline_at_training_stride_equals_segment_tokens():
    cfg = tiny_config()
    P = init_params(cfg, 3)
    x = np.random.default_rng(3).normal(size=(6, 48)).astype(np.float32)
    tl = activation_timeline(P, cfg, EEGTrial(x, 16.0), tiny_partition(), 1.0, 1.0)
    tok = segment_tokens(P, cfg, torch.as_tensor(x)[None], tiny_partition(), PLAN, 16.0)[0].numpy()
    np.testing.assert_array_equal(tl.values, tok)


def test_constant_trial_constant_timeline():
    P, cfg, _ = tiny_model()
    tl = activation_timeline(P, cfg, EEGTrial(np.zeros((6, 64)), 16.0), tiny_partition(), 1.0, 0.125)
    np.testing.assert_allclose(tl.values, np.broadcast_to(tl.values[:1], tl.values.shape), atol=1e-12)


def _timeline(values):
    return ActivationTimeline(np.asarray(values, dtype=float), np.arange(len(values)) * 0.02, ("a", "b"), 1.0, 0.02)


def test_zscore_properties(rng):
    z = zscore_time(rng.normal(3, 2, size=(40, 2, 5)))
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(z.var(axis=0), 1, atol=1e-6)
    assert np.all(zscore_time(np.ones((5, 2, 3))) == 0)


def test_class_maps(rng):
    base = rng.normal(size=(30, 2, 3))
    same = normalize_and_average([_timeline(base)] * 6, [0, 1, 2, 0, 1, 2])
    for c in range(3):
        np.testing.assert_allclose(same.contrasts[c], 0, atol=1e-12)
    tls = [_timeline(rng.normal(size=(30, 2, 3))) for _ in range(6)]
    cm = normalize_and_average(tls, [0, 0, 1, 1, 2, 2])
    for c, m in cm.maps.items():
        np.testing.assert_allclose(m.mean(axis=0), 0, atol=1e-6)
        np.testing.assert_allclose(m.var(axis=0), 1, atol=1e-6)
    with pytest.raises(AttributionError):
        normalize_and_average(tls[:2], [0, 0])
    with pytest.raises(AttributionError, match="class 3"):
        normalize_and_average(tls, [0, 0, 1, 1, 2, 2], classes=[0, 1, 2, 3])


def test_contrast_sign_on_planted_frontal_burst(rng):
    """A class whose frontal features rise mid-trial gets a positive frontal contrast there."""
    tls, labels = [], []
    for i in range(12):
        v = rng.normal(0, 0.1, size=(50, 2, 3))
        if i % 3 == 0:
            v[20:30, 0] += 2.0
        tls.append(_timeline(v))
        labels.append(i % 3)
    cm = normalize_and_average(tls, labels)
    burst = cm.contrasts[0][20:30, 0].mean()
    assert burst > 1.0
    assert burst > abs(cm.contrasts[0][20:30, 1].mean())
    assert cm.contrasts[1][20:30, 0].mean() < 0


# --- channel saliency --------------------------------------------------------------

def _map(values):
    return AttributionMap(np.asarray(values, dtype=float), 0, "zeros", 4, 0.0, 1.0)


def test_saliency_oracles(rng):
    labels = ("Fp1", "F3", "T7", "C3")
    zero = channel_saliency([_map(np.zeros((4, 40)))], labels, rate=10.0)
    assert np.all(zero.overall == 0)
    v = np.zeros((4, 40))
    v[2] = rng.normal(size=40)
    one = channel_saliency([_map(v)], labels, rate=10.0)
    assert np.flatnonzero(one.overall).tolist() == [2]
    maps = [_map(rng.normal(size=(4, 40))) for _ in range(3)]
    s = channel_saliency(maps, labels, rate=10.0, cue_onset=0, utterance_s=2.0)
    oracle = np.mean([np.abs(m.values) for m in maps], axis=(0, 2))
    np.testing.assert_allclose(s.overall, oracle, rtol=1e-12)
    assert s.per_utterance.shape == (2, 4)
    np.testing.assert_allclose(s.per_utterance[1], np.mean([np.abs(m.values[:, 20:40]) for m in maps], axis=(0, 2)))
    with pytest.raises(AttributionError):
        channel_saliency(maps, labels[:3])


def test_csv_writers(tmp_path, rng):
    tl = _timeline(rng.normal(size=(3, 2, 2)))
    write_timeline_csv(tmp_path / "t.csv", tl)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["window_time", "region", "feature", "value"] and len(rows) == 1 + 3 * 2 * 2
    assert float(rows[-1][3]) == tl.values[2, 1, 1]
    cm = normalize_and_average([tl, _timeline(rng.normal(size=(3, 2, 2)))], [0, 1])
    paths = write_contrast_csvs(tmp_path, cm)
    assert [p.name for p in paths] == ["contrast_0.csv", "contrast_1.csv"]
    sal = channel_saliency([_map(rng.normal(size=(2, 20)))], ("T7", "T8"), rate=10.0, utterance_s=1.0)
    write_saliency_csv(tmp_path / "s.csv", sal)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["label", "value", "utterance_index"]
    assert rows[1][2] == "" and rows[-1][2] == "1" and len(rows) == 1 + 2 + 2 * 2


def test_generated_frontal_plant_shows_in_contrast():
    """Untrained tokenizer on generated trials: class 0's frontal contrast is positive on windows that
    mostly overlap its planted bursts and negative on windows that miss them."""
    from fasteeg.model import FastConfig
    from fasteeg.montage import build_partition
    from fasteeg.synthdata import SynthSpec, generate

    spec = SynthSpec(n_subjects=1, blocks_per_subject=1, trials_per_block=10, layout="toy", seed=1,
                     onset_jitter_s=0.0)
    c = generate(spec)
    assert spec.signatures[0].regions == ("frontal",)
    part = build_partition(c.layout, "M8")
    cfg = FastConfig.for_partition(part, F=8, L_t=3, conv_t_filters=8, L=1, L_s=1, head_hidden=16,
                                   heads_spatial=2)
    P = init_params(cfg, 0)
    tls = [activation_timeline(P, cfg, t, part, 1.0, 0.1) for t in c.trials]
    cm = normalize_and_average(tls, [t.label for t in c.trials])
    trace = cm.contrasts[0][:, part.region_names.index("frontal")].mean(axis=1)
    # burst u spans [2u + delay, 2u + delay + burst_s]; window [t, t + 1]
    overlap = np.zeros_like(cm.times)
    for u in range(5):
        lo = 2.0 * u + spec.burst_delay_s
        overlap += np.clip(np.minimum(cm.times + 1.0, lo + spec.burst_s) - np.maximum(cm.times, lo), 0, None)
    hit, miss = overlap >= 0.8 * spec.burst_s, overlap == 0
    assert hit.any() and miss.any()
    assert trace[hit].mean() > 0 > trace[miss].mean()
