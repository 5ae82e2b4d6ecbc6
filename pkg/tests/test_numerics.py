import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from fasteeg import numerics as nx


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# --- elementwise and convolution oracles ------------------------------------

def test_gelu_matches_erf_formula(rng):
    x = rng.normal(size=1000) * 4
    expected = 0.5 * x * (1 + erf(x / math.sqrt(2)))
    np.testing.assert_allclose(nx.gelu(t64(x)).numpy(), expected, rtol=1e-12, atol=1e-14)


def test_gelu_rejects_nan():
    with pytest.raises(nx.NumericError):
        nx.gelu(torch.tensor([0.0, float("nan")]))


def _conv_temporal_loops(x, w, b):
    n, c_in, ch, t = x.shape
    c_out, _, k = w.shape
    out = np.zeros((n, c_out, ch, t - k + 1))
    for i in range(n):
        for o in range(c_out):
            for c in range(ch):
                for s in range(t - k + 1):
                    out[i, o, c, s] = b[o] + sum(w[o, f, j] * x[i, f, c, s + j] for f in range(c_in) for j in range(k))
    return out


def test_conv_temporal_matches_loops(rng):
    x = rng.normal(size=(2, 3, 4, 11))
    w = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=5)
    got = nx.conv_temporal(t64(x), t64(w), t64(b)).numpy()
    np.testing.assert_allclose(got, _conv_temporal_loops(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_temporal_errors():
    with pytest.raises(ValueError, match="shorter"):
        nx.conv_temporal(torch.zeros(1, 1, 2, 3), torch.zeros(1, 1, 4))
    with pytest.raises(ValueError, match="input maps"):
        nx.conv_temporal(torch.zeros(1, 2, 2, 9), torch.zeros(1, 1, 4))


def test_conv_spatial_matches_sum(rng):
    x = rng.normal(size=(2, 3, 4, 7))
    w = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=5)
    expected = np.einsum("nfct,gfc->ngt", x, w)[:, :, None, :] + b[None, :, None, None]
    np.testing.assert_allclose(nx.conv_spatial(t64(x), t64(w), t64(b)).numpy(), expected, rtol=1e-12)
    with pytest.raises(ValueError):
        nx.conv_spatial(t64(x), t64(w[:, :, :3]))


def test_fused_tokenizer_stem_equals_two_stages(rng):
    x = rng.normal(size=(3, 5, 20))
    wt, bt = rng.normal(size=(4, 6)), rng.normal(size=4)
    ws, bs = rng.normal(size=(7, 4, 5)), rng.normal(size=7)
    two = nx.conv_spatial(nx.conv_temporal(t64(x)[:, None], t64(wt)[:, None, :], t64(bt)), t64(ws), t64(bs))
    fused = nx.conv_temporal_spatial(t64(x), t64(wt), t64(bt), t64(ws), t64(bs))
    np.testing.assert_allclose(fused.numpy(), two.numpy(), rtol=1e-11, atol=1e-11)


def test_batch_norm_training_and_running_stats(rng):
    x = rng.normal(size=(4, 3, 1, 10)) * 2 + 1
    w, b = rng.normal(size=3), rng.normal(size=3)
    state = nx.BatchNormState.fresh(3, torch.float64)
    y = nx.batch_norm(t64(x), t64(w), t64(b), state, training=True).numpy()
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    expected = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * w[None, :, None, None] \
        + b[None, :, None, None]
    np.testing.assert_allclose(y, expected, rtol=1e-10, atol=1e-12)
    n = x.size // 3
    np.testing.assert_allclose(state.running_mean.numpy(), 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(state.running_var.numpy(), 0.9 + 0.1 * var * n / (n - 1), rtol=1e-12)
    # eval mode uses the running statistics
    y_eval = nx.batch_norm(t64(x), t64(w), t64(b), state, training=False).numpy()
    rm, rv = state.running_mean.numpy(), state.running_var.numpy()
    np.testing.assert_allclose(y_eval, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
                               * w[None, :, None, None] + b[None, :, None, None], rtol=1e-10)


def test_batch_norm_needs_population():
    with pytest.raises(ValueError):
        nx.batch_norm(torch.zeros(1, 2, 1, 1), torch.ones(2), torch.zeros(2), nx.BatchNormState.fresh(2), True)


def test_max_pool_drops_remainder():
    x = torch.tensor([[1.0, 5.0, 2.0, 0.0, 9.0]])
    assert nx.max_pool_time(x, 2).tolist() == [[5.0, 2.0]]
    with pytest.raises(ValueError):
        nx.max_pool_time(x, 6)


def test_global_max_pool():
    x = torch.tensor([[[1.0, 3.0, 2.0]], [[-1.0, -3.0, -2.0]]])
    assert nx.global_max_pool_time(x).tolist() == [3.0, -1.0]


def _mha_numpy(x, wq, wk, wv, wo, heads):
    d = x.shape[-1]
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo


def test_multi_head_attention_matches_per_head_loop(rng):
    x = rng.normal(size=(6, 8))
    ws = [rng.normal(size=(8, 8)) * 0.3 for _ in range(4)]
    got = nx.multi_head_attention(t64(x), t64(x), t64(x), *map(t64, ws), heads=4).numpy()
    np.testing.assert_allclose(got, _mha_numpy(x, *ws, 4), rtol=1e-10, atol=1e-12)
    with pytest.raises(ValueError):
        nx.multi_head_attention(t64(x), t64(x), t64(x), *map(t64, ws), heads=3)


def test_attention_weights_rows_sum_to_one(rng):
    x = t64(rng.normal(size=(2, 5, 4)))
    w = t64(np.eye(4))
    _, a = nx.multi_head_attention(x, x, x, w, w, w, w, heads=2, return_weights=True)
    np.testing.assert_allclose(a.sum(-1).numpy(), 1.0, rtol=1e-12)


def test_layer_norm_residual(rng):
    x, s = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    w, b = rng.normal(size=6), rng.normal(size=6)
    z = x + s
    expected = (z - z.mean(1, keepdims=True)) / np.sqrt(z.var(1, keepdims=True) + 1e-5) * w + b
    np.testing.assert_allclose(nx.layer_norm_residual(t64(x), t64(s), t64(w), t64(b)).numpy(), expected, rtol=1e-10)
    with pytest.raises(ValueError):
        nx.layer_norm_residual(torch.zeros(2, 1), torch.zeros(2, 1), torch.ones(1), torch.zeros(1))


def test_cross_entropy(rng):
    z = rng.normal(size=(7, 5))
    y = rng.integers(0, 5, size=7)
    lse = np.log(np.exp(z).sum(1))
    expected = np.mean(lse - z[np.arange(7), y])
    assert nx.cross_entropy(t64(z), y).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        nx.cross_entropy(t64(z), [5] * 7)


# --- optimizer and schedule ---------------------------------------------------

def test_adamw_matches_hand_recurrence(rng):
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(3)]
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    p, m, v = p0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p = p * (1 - lr * wd)
    params = {"w": t64(p0)}
    state = nx.OptimizerState(lr=lr, weight_decay=wd)
    for g in grads:
        nx.adamw_step(params, {"w": t64(g)}, state)
    np.testing.assert_allclose(params["w"].numpy(), p, rtol=1e-12)
    assert state.step == 3


def test_adamw_first_step_magnitude_is_lr():
    params = {"w": torch.zeros(3, dtype=torch.float64)}
    nx.adamw_step(params, {"w": t64([1.0, -2.0, 0.5])}, nx.OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_allclose(params["w"].numpy(), [-0.1, 0.1, -0.1], rtol=1e-6)


def test_adamw_errors():
    params = {"w": torch.zeros(3)}
    with pytest.raises(ValueError):
        nx.adamw_step(params, {"w": torch.zeros(2)}, nx.OptimizerState())
    with pytest.raises(nx.NumericError):
        nx.adamw_step(params, {"w": torch.tensor([0.0, float("inf"), 0.0])}, nx.OptimizerState())


def test_schedule_values():
    s = nx.Schedule(1e-3, 10, 200, 0.1)
    assert nx.schedule_lr(s, 0) == pytest.approx(1e-4)
    assert nx.schedule_lr(s, 5) == pytest.approx(1e-4 + 0.9e-3 * 0.5)
    assert nx.schedule_lr(s, 10) == pytest.approx(1e-3)
    assert nx.schedule_lr(s, 199) == pytest.approx(1e-4)
    mid = 10 + (199 - 10) / 2
    assert nx.schedule_lr(s, int(mid)) == pytest.approx(1e-4 + 0.9e-3 * 0.5 * (1 + math.cos(math.pi * (int(mid) - 10) / 189)))
    with pytest.raises(ValueError):
        nx.schedule_lr(s, 200)


@given(st.integers(0, 199))
def test_schedule_bounded(epoch):
    s = nx.Schedule(2e-3, 10, 200, 0.1)
    assert 2e-4 - 1e-15 <= nx.schedule_lr(s, epoch) <= 2e-3 + 1e-15


def test_schedule_monotone_after_warmup():
    s = nx.Schedule(1e-3, 5, 50, 0.1)
    lrs = [nx.schedule_lr(s, e) for e in range(50)]
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))


# --- gradient checker ---------------------------------------------------------

def test_grad_check_passes_on_smooth_function(rng):
    x = t64(rng.normal(size=(3, 4)))
    r = nx.grad_check(lambda x: (torch.sin(x) * x ** 2).sum(), x, tolerance=1e-6)
    assert r.passed and r.n_checked == 12


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # true derivative is 2x

    r = nx.grad_check(Bad.apply, t64([0.5, -1.0, 2.0]))
    assert not r.passed
    assert r.max_rel_err == pytest.approx(1 / 3, rel=1e-4)


@pytest.mark.parametrize("op", ["gelu", "softmax", "tanh", "layer_norm"])
def test_elementwise_gradients(op, rng):
    x = t64(rng.normal(size=(4, 5)))
    w = t64(rng.normal(size=(4, 5)))
    fn = {
        "gelu": lambda x: (nx.gelu(x) * w).sum(),
        "softmax": lambda x: (torch.softmax(x, -1) * w).sum(),
        "tanh": lambda x: (torch.tanh(x) * w).sum(),
        "layer_norm": lambda x: (torch.nn.functional.layer_norm(x, (5,)) * w).sum(),
    }[op]
    assert nx.grad_check(fn, x, tolerance=1e-6).passed
