"""The FAST network as pure functions over a named parameter store.

Pipeline per trial: ST-window segmentation -> functional-area partition ->
per-region convolutional tokenizer -> spatial projection across region
tokens -> temporal transformer with a CLS token -> MLP head.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import numerics as nx
from .montage import RegionPartition
from .preprocess import EEGTrial, SegmentPlan


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FastConfig:
    region_sizes: tuple[int, ...] = (6, 9, 5, 5, 6, 7, 16, 8)
    F: int = 32
    L_t: int = 4
    L_s: int = 2
    L: int = 4
    heads_spatial: int = 4
    heads_temporal: int = 8
    ffn_multiplier: int = 2
    k_t: int = 15
    conv_t_filters: int = 16
    k_c: int = 7
    pool_window: int = 2
    S_max: int = 24
    n_classes: int = 5
    dropout: float = 0.1
    head_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "region_sizes", tuple(int(c) for c in self.region_sizes))
        self.validate()

    @property
    def M(self) -> int:
        return len(self.region_sizes)

    @property
    def d_model(self) -> int:
        return self.M * self.F

    def validate(self) -> None:
        if self.M < 1 or any(c < 1 for c in self.region_sizes):
            raise ConfigError("every region needs at least one channel")
        if self.F % self.heads_spatial:
            raise ConfigError(f"F={self.F} not divisible by heads_spatial={self.heads_spatial}")
        if self.d_model % self.heads_temporal:
            raise ConfigError(f"M*F={self.d_model} not divisible by heads_temporal={self.heads_temporal}")
        if self.L_t < 2:
            raise ConfigError("L_t must be >= 2")
        if min(self.L_s, self.L) < 0 or self.S_max < 1 or self.n_classes < 2:
            raise ConfigError("invalid depth, S_max or class count")

    def min_window(self) -> int:
        """Shortest segment (samples) that survives every conv and pool stage."""
        for w in range(1, 100_000):
            t = (w - self.k_t + 1) // self.pool_window
            ok = t >= 1
            for _ in range(self.L_t - 1):
                t = (t - self.k_c + 1) // self.pool_window
                ok = ok and t >= 1
            if ok:
                return w
        raise ConfigError("no finite window fits this configuration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_sizes"] = list(self.region_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FastConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown FastConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_partition(cls, partition: RegionPartition, **overrides) -> "FastConfig":
        return cls(region_sizes=partition.region_sizes, **overrides)


@dataclass
class ParamStore:
    """Trainable tensors plus batch-norm running statistics, in a fixed order."""

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def n_values(self) -> int:
        return self.n_params() + sum(t.numel() for t in self.buffers.values())

    def tensors(self) -> list[tuple[str, str, torch.Tensor]]:
        return [(n, "param", t) for n, t in self.params.items()] + \
               [(n, "buffer", t) for n, t in self.buffers.items()]

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self.params.items()},
                          {k: v.detach().clone() for k, v in self.buffers.items()})

    def to(self, dtype) -> "ParamStore":
        return ParamStore({k: v.detach().to(dtype) for k, v in self.params.items()},
                          {k: v.detach().to(dtype) for k, v in self.buffers.items()})

    def bn(self, prefix: str) -> nx.BatchNormState:
        return nx.BatchNormState(self.buffers[prefix + ".running_mean"], self.buffers[prefix + ".running_var"])

    def equal(self, other: "ParamStore") -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(
            n1 == n2 and k1 == k2 and t1.dtype == t2.dtype and torch.equal(t1, t2)
            for (n1, k1, t1), (n2, k2, t2) in zip(a, b)
        )


def param_shapes(cfg: FastConfig) -> tuple[dict[str, tuple[int, ...]], dict[str, tuple[int, ...]]]:
    """Names and shapes of every tensor; the single source of truth for layout."""
    p: dict[str, tuple[int, ...]] = {}
    b: dict[str, tuple[int, ...]] = {}
    Fd, Ft = cfg.F, cfg.conv_t_filters

    def bn(prefix):
        p[prefix + ".weight"] = (Fd,)
        p[prefix + ".bias"] = (Fd,)
        b[prefix + ".running_mean"] = (Fd,)
        b[prefix + ".running_var"] = (Fd,)

    for j, c in enumerate(cfg.region_sizes):
        p[f"st.{j}.conv_t.weight"] = (Ft, cfg.k_t)
        p[f"st.{j}.conv_t.bias"] = (Ft,)
        p[f"st.{j}.conv_s.weight"] = (Fd, Ft, c)
        p[f"st.{j}.conv_s.bias"] = (Fd,)
        bn(f"st.{j}.bn1")
        for l in range(2, cfg.L_t + 1):
            p[f"st.{j}.conv{l}.weight"] = (Fd, Fd, cfg.k_c)
            p[f"st.{j}.conv{l}.bias"] = (Fd,)
            bn(f"st.{j}.bn{l}")

    def layer(prefix, d):
        h = cfg.ffn_multiplier * d
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = (d, d)
        p[f"{prefix}.ffn.w1"] = (d, h)
        p[f"{prefix}.ffn.b1"] = (h,)
        p[f"{prefix}.ffn.w2"] = (h, d)
        p[f"{prefix}.ffn.b2"] = (d,)
        p[f"{prefix}.ln.weight"] = (d,)
        p[f"{prefix}.ln.bias"] = (d,)

    for l in range(cfg.L_s):
        layer(f"sp.{l}", Fd)
    D = cfg.d_model
    for l in range(cfg.L):
        layer(f"te.{l}", D)
    p["te.pos"] = (cfg.S_max + 1, D)
    p["te.cls"] = (D,)
    p["head.ln.weight"] = (D,)
    p["head.ln.bias"] = (D,)
    p["head.fc1.weight"] = (D, cfg.head_hidden)
    p["head.fc1.bias"] = (cfg.head_hidden,)
    p["head.fc2.weight"] = (cfg.head_hidden, cfg.n_classes)
    p["head.fc2.bias"] = (cfg.n_classes,)
    return p, b


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("conv_t.weight"):
        return shape[1]
    if ".conv" in name and name.endswith(".weight"):
        return int(np.prod(shape[1:]))
    return shape[0]


def init_params(cfg: FastConfig, seed: int = 0, dtype=torch.float32) -> ParamStore:
    """Fan-in scaled uniform weights, unit/zero norm affines, N(0, 0.02) encodings."""
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed))
    pshapes, bshapes = param_shapes(cfg)
    params: dict[str, torch.Tensor] = {}
    conv_fan: dict[str, int] = {}
    for name, shape in pshapes.items():
        if name.endswith((".ln.weight",)) or (".bn" in name and name.endswith(".weight")):
            t = torch.ones(shape, dtype=torch.float64)
        elif name.endswith(".ln.bias") or (".bn" in name and name.endswith(".bias")):
            t = torch.zeros(shape, dtype=torch.float64)
        elif name in ("te.pos", "te.cls"):
            t = 0.02 * torch.randn(shape, generator=gen, dtype=torch.float64)
        elif name.endswith(".weight") or name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w1", "w2"):
            fan = _fan_in(name, shape)
            conv_fan[name.rsplit(".", 1)[0]] = fan
            bound = 1.0 / math.sqrt(fan)
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        elif ".conv" in name:  # conv bias, same bound as its kernel
            bound = 1.0 / math.sqrt(conv_fan[name.rsplit(".", 1)[0]])
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        else:
            t = torch.zeros(shape, dtype=torch.float64)
        params[name] = t.to(dtype)
    buffers = {n: (torch.zeros(s, dtype=dtype) if n.endswith("mean") else torch.ones(s, dtype=dtype))
               for n, s in bshapes.items()}
    return ParamStore(params, buffers)


# --------------------------------------------------------------------------
# forward pieces


def _region_encoder(P: ParamStore, cfg: FastConfig, j: int, x: torch.Tensor, training: bool) -> torch.Tensor:
    """(N, C_j, W) -> (N, F)."""
    p = P.params
    h = nx.conv_temporal_spatial(x, p[f"st.{j}.conv_t.weight"], p[f"st.{j}.conv_t.bias"],
                                 p[f"st.{j}.conv_s.weight"], p[f"st.{j}.conv_s.bias"])
    h = nx.batch_norm(h, p[f"st.{j}.bn1.weight"], p[f"st.{j}.bn1.bias"], P.bn(f"st.{j}.bn1"), training)
    h = nx.max_pool_time(F.gelu(h), cfg.pool_window)
    for l in range(2, cfg.L_t + 1):
        h = nx.conv_temporal(h, p[f"st.{j}.conv{l}.weight"], p[f"st.{j}.conv{l}.bias"])
        h = nx.batch_norm(h, p[f"st.{j}.bn{l}.weight"], p[f"st.{j}.bn{l}.bias"], P.bn(f"st.{j}.bn{l}"), training)
        h = nx.max_pool_time(F.gelu(h), cfg.pool_window)
    return nx.global_max_pool_time(h)


def st_forward(P: ParamStore, cfg: FastConfig, region_blocks: Sequence, training: bool = False) -> torch.Tensor:
    """Spatial-temporal tokenizer. Blocks are (C_j, W) or (N, C_j, W); returns (M, F) or (N, M, F)."""
    if len(region_blocks) != cfg.M:
        raise ConfigError(f"expected {cfg.M} region blocks, got {len(region_blocks)}")
    blocks = [torch.as_tensor(b) for b in region_blocks]
    single = blocks[0].dim() == 2
    if single:
        blocks = [b.unsqueeze(0) for b in blocks]
    w = blocks[0].shape[-1]
    if w < cfg.min_window():
        raise ConfigError(f"segment of {w} samples shorter than the receptive field ({cfg.min_window()})")
    for j, (b, c) in enumerate(zip(blocks, cfg.region_sizes)):
        if b.shape[-2] != c:
            raise ConfigError(f"region {j} has {b.shape[-2]} channels, config expects {c}")
    tokens = torch.stack([_region_encoder(P, cfg, j, b, training) for j, b in enumerate(blocks)], dim=-2)
    return tokens[0] if single else tokens


def _dropout(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    return F.dropout(x, rate, training=True) if (training and rate > 0) else x


def transformer_layer(P: ParamStore, prefix: str, x: torch.Tensor, heads: int, dropout: float, training: bool) -> torch.Tensor:
    """delta = MultiHead(x, x, x); out = LN(delta + FFN(delta))."""
    p = P.params
    delta = nx.multi_head_attention(x, x, x, p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"],
                                    p[f"{prefix}.wo"], heads)
    delta = _dropout(delta, dropout, training)
    ff = nx.feed_forward(delta, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"], p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])
    ff = _dropout(ff, dropout, training)
    return nx.layer_norm_residual(delta, ff, p[f"{prefix}.ln.weight"], p[f"{prefix}.ln.bias"])


def spatial_projection(P: ParamStore, cfg: FastConfig, tokens: torch.Tensor, training: bool = False) -> torch.Tensor:
    """L_s transformer layers attending across the M region tokens: (..., M, F) -> (..., M, F)."""
    if tokens.shape[-2:] != (cfg.M, cfg.F):
        raise ConfigError(f"tokens {tuple(tokens.shape)} do not end in ({cfg.M}, {cfg.F})")
    h = tokens
    for l in range(cfg.L_s):
        h = transformer_layer(P, f"sp.{l}", h, cfg.heads_spatial, cfg.dropout, training)
    return h


def head(P: ParamStore, cfg: FastConfig, z: torch.Tensor) -> torch.Tensor:
    p = P.params
    z = F.layer_norm(z, (cfg.d_model,), p["head.ln.weight"], p["head.ln.bias"])
    z = F.gelu(z @ p["head.fc1.weight"] + p["head.fc1.bias"])
    return z @ p["head.fc2.weight"] + p["head.fc2.bias"]


def temporal_forward(P: ParamStore, cfg: FastConfig, G: torch.Tensor, training: bool = False) -> torch.Tensor:
    """(B, S, M*F) or (S, M*F) segment tokens -> (B, n_classes) or (n_classes,) logits."""
    single = G.dim() == 2
    if single:
        G = G.unsqueeze(0)
    B, S, D = G.shape
    if S > cfg.S_max:
        raise ConfigError(f"{S} segments exceed S_max={cfg.S_max}")
    if D != cfg.d_model:
        raise ConfigError(f"token width {D} != M*F = {cfg.d_model}")
    pos = P.params["te.pos"]
    cls = (P.params["te.cls"] + pos[S]).expand(B, 1, D)
    h = torch.cat([G + pos[:S], cls], dim=1)
    for l in range(cfg.L):
        h = transformer_layer(P, f"te.{l}", h, cfg.heads_temporal, cfg.dropout, training)
    logits = head(P, cfg, h[:, -1])
    return logits[0] if single else logits


def _as_batch(X) -> torch.Tensor:
    if isinstance(X, EEGTrial):
        X = X.data
    X = torch.as_tensor(np.asarray(X) if not isinstance(X, torch.Tensor) else X)
    if X.dim() == 2:
        X = X.unsqueeze(0)
    if X.dim() != 3:
        raise ValueError(f"expected (batch, channels, samples), got {tuple(X.shape)}")
    return X


def segment_tokens(
    P: ParamStore,
    cfg: FastConfig,
    X,
    partition: RegionPartition,
    plan: SegmentPlan,
    rate: float,
    training: bool = False,
) -> torch.Tensor:
    """Tokenize every ST window: (B, C, T) -> (B, S, M, F)."""
    if tuple(partition.region_sizes) != cfg.region_sizes:
        raise ConfigError(f"partition regions {partition.region_sizes} do not match config {cfg.region_sizes}")
    X = _as_batch(X)
    dtype = P.params["te.cls"].dtype
    X = X.to(dtype)
    if X.shape[1] != partition.n_channels:
        raise ConfigError(f"input has {X.shape[1]} channels, partition expects {partition.n_channels}")
    w, s = plan.samples(rate)
    S = plan.n_segments(X.shape[-1], rate)
    B = X.shape[0]
    segs = X.unfold(-1, w, s).permute(0, 2, 1, 3).reshape(B * S, X.shape[1], w)
    blocks = [segs.index_select(1, torch.as_tensor(idx)) for idx in partition.indices]
    tokens = st_forward(P, cfg, blocks, training)
    return tokens.reshape(B, S, cfg.M, cfg.F)


def fast_forward(
    P: ParamStore,
    cfg: FastConfig,
    X,
    partition: RegionPartition,
    plan: SegmentPlan,
    rate: float = 200.0,
    training: bool = False,
    mode: str = "fast",
) -> torch.Tensor:
    """Trial(s) -> logits (B, n_classes). ``mode='no-te'`` is the ablation without TE blocks."""
    tokens = segment_tokens(P, cfg, X, partition, plan, rate, training)
    B, S = tokens.shape[:2]
    if mode == "no-te":
        return head(P, cfg, tokens.reshape(B, S, cfg.d_model).mean(dim=1))
    if mode != "fast":
        raise ConfigError(f"unknown forward mode {mode!r}")
    H = spatial_projection(P, cfg, tokens, training)
    return temporal_forward(P, cfg, H.reshape(B, S, cfg.d_model), training)


def ablate_no_te(P, cfg, X, partition, plan, rate: float = 200.0, training: bool = False) -> torch.Tensor:
    """Mean-pool the flattened ST tokens over segments and feed the head directly."""
    return fast_forward(P, cfg, X, partition, plan, rate, training, mode="no-te")


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"FASTCKPT"
VERSION = 1


def save_checkpoint(P: ParamStore, cfg: FastConfig, path: str | Path, meta: dict | None = None) -> None:
    """magic | u32 version | u32 header length | JSON header | float32 LE payloads."""
    table, offset, chunks = [], 0, []
    for name, kind, t in P.tensors():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        table.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"config": cfg.to_dict(), "tensors": table, "meta": meta or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_checkpoint_meta(path: str | Path) -> dict:
    return _read_header(Path(path).read_bytes())[0]


def _read_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError("not a FAST checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    return header, 16 + hlen


def load_checkpoint(path: str | Path) -> tuple[ParamStore, FastConfig, dict]:
    raw = Path(path).read_bytes()
    header, start = _read_header(raw)
    cfg = FastConfig.from_dict(header["config"])
    total = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    if len(raw) != start + 4 * total:
        raise CheckpointError(f"payload is {len(raw) - start} bytes, header declares {4 * total}")
    payload = np.frombuffer(raw, dtype="<f4", offset=start)
    pshapes, bshapes = param_shapes(cfg)
    P = ParamStore()
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        expected = (pshapes if e["kind"] == "param" else bshapes).get(e["name"])
        if expected != shape:
            raise CheckpointError(f"tensor {e['name']} has shape {shape}, config implies {expected}")
        n = int(np.prod(shape))
        arr = payload[e["offset"]:e["offset"] + n].reshape(shape).astype(np.float32)
        (P.params if e["kind"] == "param" else P.buffers)[e["name"]] = torch.from_numpy(arr.copy())
    if set(P.params) != set(pshapes) or set(P.buffers) != set(bshapes):
        raise CheckpointError("checkpoint tensor set does not match its config")
    return P, cfg, header.get("meta", {})
