"""Differentiable building blocks for the FAST network.

All operations work on ``torch.Tensor`` and rely on torch autograd for the
reverse pass. Shapes follow the ``(..., features, channels, time)`` convention
used throughout the tokenizer; leading axes are treated as batch axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F


class NumericError(FloatingPointError):
    """Raised when a tensor contains NaN or Inf."""


def _require_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# elementwise / convolution / pooling


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    _require_finite(x, "gelu input")
    return F.gelu(x, approximate="none")


def conv_temporal(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Valid, stride-1 cross-correlation along time only.

    x: (..., C_in, Ch, T); weight: (C_out, C_in, k) -> (..., C_out, Ch, T - k + 1)
    """
    *lead, c_in, ch, t = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ValueError(f"kernel expects {w_in} input maps, got {c_in}")
    if t < k:
        raise ValueError(f"time extent {t} shorter than kernel {k}")
    xr = x.reshape(-1, c_in, ch, t).transpose(1, 2).reshape(-1, c_in, t)
    y = F.conv1d(xr, weight, bias)
    return y.reshape(-1, ch, c_out, t - k + 1).transpose(1, 2).reshape(*lead, c_out, ch, t - k + 1)


def conv_spatial(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Collapse the channel axis with a kernel spanning every channel.

    x: (..., F_in, Ch, T); weight: (F_out, F_in, Ch) -> (..., F_out, 1, T)
    """
    f_in, ch = x.shape[-3], x.shape[-2]
    if weight.shape[1:] != (f_in, ch):
        raise ValueError(f"spatial kernel {tuple(weight.shape)} does not span input maps/channels ({f_in}, {ch})")
    y = torch.einsum("...fct,gfc->...gt", x, weight)
    if bias is not None:
        y = y + bias[:, None]
    return y.unsqueeze(-2)


def conv_temporal_spatial(
    x: torch.Tensor,
    wt: torch.Tensor,
    bt: torch.Tensor,
    ws: torch.Tensor,
    bs: torch.Tensor,
) -> torch.Tensor:
    """``conv_spatial(conv_temporal(x))`` for single-map input, computed with one fused kernel.

    x: (N, Ch, T); wt: (F_t, k); ws: (F, F_t, Ch) -> (N, F, 1, T - k + 1).
    Both stages are linear, so the composite kernel is exact.
    """
    if ws.shape[-1] != x.shape[-2]:
        raise ValueError(f"spatial kernel spans {ws.shape[-1]} channels, region has {x.shape[-2]}")
    if x.shape[-1] < wt.shape[-1]:
        raise ValueError(f"time extent {x.shape[-1]} shorter than kernel {wt.shape[-1]}")
    kernel = torch.einsum("gfc,fk->gck", ws, wt)
    b = bs + torch.einsum("gfc,f->g", ws, bt)
    return F.conv1d(x, kernel, b).unsqueeze(-2)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: torch.Tensor
    running_var: torch.Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, n_features: int, dtype=torch.float32) -> "BatchNormState":
        return cls(torch.zeros(n_features, dtype=dtype), torch.ones(n_features, dtype=dtype))


def batch_norm(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    state: BatchNormState,
    training: bool,
) -> torch.Tensor:
    """Per-feature-map normalization over batch and time (feature axis is 1).

    Training mode normalizes with batch statistics and updates ``state`` in place.
    """
    if training and x.numel() // x.shape[1] < 2:
        raise ValueError("batch_norm in training mode needs more than one value per feature map")
    return F.batch_norm(
        x, state.running_mean, state.running_var, weight, bias,
        training=training, momentum=state.momentum, eps=state.eps,
    )


def max_pool_time(x: torch.Tensor, window: int) -> torch.Tensor:
    """Non-overlapping max over time windows; a trailing remainder is dropped."""
    if window < 1:
        raise ValueError("window must be >= 1")
    t = x.shape[-1]
    if t < window:
        raise ValueError(f"time extent {t} shorter than pool window {window}")
    if window == 1:
        return x
    lead = x.shape[:-1]
    y = F.max_pool1d(x.reshape(1, -1, t), window)
    return y.reshape(*lead, t // window)


def global_max_pool_time(x: torch.Tensor) -> torch.Tensor:
    """(..., F, 1, T) -> (..., F): per-feature maximum over all time steps."""
    if x.shape[-1] < 1:
        raise ValueError("empty time axis")
    if x.shape[-2] != 1:
        raise ValueError(f"expected a collapsed channel axis, got extent {x.shape[-2]}")
    return x.amax(dim=-1).squeeze(-1)


# --------------------------------------------------------------------------
# transformer pieces


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    heads: int,
    dropout: float = 0.0,
    training: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads followed by the output map.

    q: (..., Lq, D), k/v: (..., Lk, D); all weight matrices are (D, D) applied
    as ``x @ W``. Head h uses columns ``h*D/heads:(h+1)*D/heads``.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.unflatten(-1, (heads, dh)).transpose(-3, -2)  # (..., h, L, dh)

    qh, kh, vh = split(q @ wq), split(k @ wk), split(v @ wv)
    scores = (qh @ kh.transpose(-2, -1)) / math.sqrt(dh)
    attn = torch.softmax(scores, dim=-1)
    if dropout and training:
        attn = F.dropout(attn, dropout, training=True)
    out = (attn @ vh).transpose(-3, -2).flatten(-2) @ wo
    if return_weights:
        return out, attn
    return out


def feed_forward(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor, w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ValueError(f"ffn shapes do not chain: x {tuple(x.shape)}, W1 {tuple(w1.shape)}, W2 {tuple(w2.shape)}")
    return F.gelu(x @ w1 + b1) @ w2 + b2


def layer_norm_residual(
    x: torch.Tensor,
    sub_output: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """``LN(x + sub_output)`` over the last (feature) axis."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer norm over a single feature has undefined variance")
    return F.layer_norm(x + sub_output, (d,), weight, bias, eps)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    return F.cross_entropy(logits, labels)


# --------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    lr: float | None = None,
) -> Mapping[str, torch.Tensor]:
    """One AdamW update, in place on ``params``.

    Decoupled weight decay is applied after the adaptive step:
    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` then ``theta -= lr * wd * theta``.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(params[name].shape)} for {name}")
        _require_finite(g, f"gradient of {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
    return params


@dataclass(frozen=True)
class Schedule:
    """Linear warm-up from ``floor_fraction * base_lr`` then cosine decay back to it."""

    base_lr: float = 1e-3
    warmup_epochs: int = 10
    total_epochs: int = 200
    floor_fraction: float = 0.1


def schedule_lr(s: Schedule, epoch: int) -> float:
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    floor = s.floor_fraction * s.base_lr
    if epoch < s.warmup_epochs:
        return floor + (s.base_lr - floor) * epoch / s.warmup_epochs
    span = max(1, s.total_epochs - 1 - s.warmup_epochs)
    progress = (epoch - s.warmup_epochs) / span
    return floor + (s.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(
    f: Callable[..., torch.Tensor],
    point: Mapping[str, torch.Tensor] | torch.Tensor,
    tolerance: float = 1e-4,
    h: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with float64 central differences.

    ``f`` receives the tensors of ``point`` (as keyword arguments when a mapping
    is given) and returns a scalar. Per element the error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` where ``floor`` is 1e-3 of the
    largest finite-difference gradient, so near-zero components are judged
    against the overall gradient scale. ``max_elements`` samples coordinates
    per tensor.
    """
    single = isinstance(point, torch.Tensor)
    named = {"x": point} if single else dict(point)
    named = {k: v.detach().to(torch.float64).clone() for k, v in named.items()}

    def call(values):
        return f(values["x"]) if single else f(**values)

    leaves = {k: v.clone().requires_grad_(True) for k, v in named.items()}
    out = call(leaves)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    ad = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    ad = {k: (g if g is not None else torch.zeros_like(named[k])) for k, g in zip(leaves, ad)}

    rng = np.random.default_rng(seed)
    pairs = []
    with torch.no_grad():
        for name, base in named.items():
            flat = base.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                idx = rng.choice(flat.numel(), size=max_elements, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = call(named).item()
                flat[i] = orig - h
                down = call(named).item()
                flat[i] = orig
                pairs.append((ad[name].reshape(-1)[i].item(), (up - down) / (2 * h)))
    if not pairs:
        return GradCheckReport(0.0, 0.0, 0, tolerance)
    a = np.array([p[0] for p in pairs])
    fd = np.array([p[1] for p in pairs])
    floor = max(1e-3 * np.abs(fd).max(), 1e-12)
    abs_err = np.abs(a - fd)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
    return GradCheckReport(float(rel.max()), float(abs_err.max()), len(pairs), tolerance)
