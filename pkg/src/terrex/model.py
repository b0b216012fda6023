"""Point-proxy transformer that predicts missing terrain points.

Pipeline for one input cloud X:

1. furthest point sampling down to ``n_fps`` points;
2. edge convolution: for each point, features of ``[x_i, x_j - x_i]`` over its
   ``k_edge`` nearest neighbours go through two affine+ReLU layers and are
   max-pooled;
3. furthest point sampling down to ``n_proxy`` centres, each pooling the
   features of its ``k_edge`` nearest retained points (the point proxies);
4. coordinate positional encoding plus ``n_layers`` pre-norm self-attention
   blocks;
5. a linear head maps every proxy token to ``q`` offsets, added to the proxy
   coordinate, giving ``M = n_proxy * q`` predicted points.

Sampling and neighbour selections are fixed by the input and seed and are not
differentiated. Parameters are stored as float32; all arithmetic runs in
float64.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from terrex import autograd as ag
from terrex.cloud import PointCloud
from terrex.dataset import TrainingSample
from terrex.errors import (
    ConfigError,
    FormatError,
    InputTooSmall,
    NumericError,
    ShapeError,
)
from terrex.objective import LossConfig, loss_and_grad, mask_weights
from terrex.sampling import fps_indices, fps_start, knn_dense

LN_EPS = 1e-5
ATTENTION_BIASES = ("none",)


@dataclass(frozen=True)
class ModelConfig:
    n_fps: int = 256
    n_proxy: int = 32
    k_edge: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    q: int = 2
    ff_mult: int = 2
    # additive attention-score bias derived from proxy geometry; only "none" exists
    attention_bias: str = "none"

    def __post_init__(self):
        if min(self.n_fps, self.n_proxy, self.k_edge, self.d_model,
               self.n_heads, self.q, self.ff_mult) < 1 or self.n_layers < 0:
            raise ConfigError("model sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_proxy > self.n_fps:
            raise ConfigError("n_proxy cannot exceed n_fps")
        if self.attention_bias not in ATTENTION_BIASES:
            raise ConfigError(f"attention_bias must be one of {ATTENTION_BIASES}")

    @property
    def M(self) -> int:
        return self.n_proxy * self.q

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**{k: v if k == "attention_bias" else int(v) for k, v in d.items()})


TINY = ModelConfig(n_fps=16, n_proxy=4, k_edge=4, d_model=8, n_heads=2, n_layers=2, q=2)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    d, f = cfg.d_model, cfg.d_model * cfg.ff_mult
    shapes = OrderedDict()
    shapes["edge.w1"] = (6, d)
    shapes["edge.b1"] = (d,)
    shapes["edge.w2"] = (d, d)
    shapes["edge.b2"] = (d,)
    shapes["pos.w1"] = (3, d)
    shapes["pos.b1"] = (d,)
    shapes["pos.w2"] = (d, d)
    shapes["pos.b2"] = (d,)
    for i in range(cfg.n_layers):
        p = f"enc.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for n in "qkvo":
            shapes[p + f"w{n}"] = (d, d)
            shapes[p + f"b{n}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ff.w1"] = (d, f)
        shapes[p + "ff.b1"] = (f,)
        shapes[p + "ff.w2"] = (f, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["head.w"] = (d, 3 * cfg.q)
    shapes["head.b"] = (3 * cfg.q,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, np.ndarray]":
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            a = np.ones(shape)
        elif len(shape) == 1:
            a = np.zeros(shape)
        else:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            a = rng.uniform(-lim, lim, size=shape)
        params[name] = a.astype(np.float32)
    return params


def check_params(params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if name not in params:
            raise ShapeError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(params[name].shape)}, "
                             f"config expects {shape}")
    extra = set(params) - set(shapes)
    if extra:
        raise ShapeError(f"unexpected tensors {sorted(extra)}")


# ------------------------------------------------------------------ geometry


@dataclass(frozen=True)
class PointProxy:
    coordinate: tuple
    feature: np.ndarray


@dataclass(frozen=True)
class Plan:
    """Non-differentiable selections for one (cloud, seed) pair."""

    pts: np.ndarray          # (m, 3) FPS-retained input points
    edge_in: np.ndarray      # (m, k, 6) edge inputs [x_i, x_j - x_i]
    centers: np.ndarray      # (n_proxy,) indices into pts
    proxy_nb: np.ndarray     # (n_proxy, k) indices into pts


def prepare(X, cfg: ModelConfig, seed: int) -> Plan:
    x = X.as_float64() if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    if len(x) < cfg.n_proxy:
        raise InputTooSmall(f"input has {len(x)} points, model needs at least {cfg.n_proxy}")
    keep = fps_indices(x, cfg.n_fps, fps_start(len(x), seed))
    pts = x[keep]
    nb, _ = knn_dense(pts, pts, cfg.k_edge)
    centre = np.broadcast_to(pts[:, None, :], nb.shape + (3,))
    edge_in = np.concatenate([centre, pts[nb] - pts[:, None, :]], axis=2)
    centers = fps_indices(pts, cfg.n_proxy, fps_start(len(pts), seed))
    proxy_nb, _ = knn_dense(pts[centers], pts, cfg.k_edge)
    return Plan(pts, edge_in, centers, proxy_nb)


# ------------------------------------------------------------------- network


def _tensors(params, trainable: bool) -> dict:
    make = ag.param if trainable else ag.const
    return {k: make(v) for k, v in params.items()}


def _proxy_features(plan: Plan, T: dict) -> ag.Tensor:
    m, k, _ = plan.edge_in.shape
    h = ag.const(plan.edge_in.reshape(m * k, 6))
    h = ag.relu(ag.affine(h, T["edge.w1"], T["edge.b1"]))
    h = ag.relu(ag.affine(h, T["edge.w2"], T["edge.b2"]))
    h = ag.max_axis(ag.reshape(h, (m, k, -1)), axis=1)
    return ag.max_axis(ag.gather_rows(h, plan.proxy_nb), axis=1)


def _encode(coords: np.ndarray, feats: ag.Tensor, T: dict, cfg: ModelConfig,
            trace: Optional[dict] = None) -> ag.Tensor:
    n, d, H, dh = coords.shape[0], cfg.d_model, cfg.n_heads, cfg.d_head
    pos = ag.relu(ag.affine(ag.const(coords), T["pos.w1"], T["pos.b1"]))
    pos = ag.affine(pos, T["pos.w2"], T["pos.b2"])
    h = ag.add(feats, pos)
    for i in range(cfg.n_layers):
        p = f"enc.{i}."
        a = ag.layer_norm(h, T[p + "ln1.g"], T[p + "ln1.b"], LN_EPS)

        def heads(x):
            return ag.transpose(ag.reshape(x, (n, H, dh)), (1, 0, 2))

        qh = heads(ag.affine(a, T[p + "wq"], T[p + "bq"]))
        kh = heads(ag.affine(a, T[p + "wk"], T[p + "bk"]))
        vh = heads(ag.affine(a, T[p + "wv"], T[p + "bv"]))
        scores = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        if trace is not None:
            trace.setdefault("attention", []).append(attn.data.copy())
        ctx = ag.reshape(ag.transpose(ag.matmul(attn, vh), (1, 0, 2)), (n, d))
        h = ag.add(h, ag.affine(ctx, T[p + "wo"], T[p + "bo"]))
        b = ag.layer_norm(h, T[p + "ln2.g"], T[p + "ln2.b"], LN_EPS)
        f = ag.relu(ag.affine(b, T[p + "ff.w1"], T[p + "ff.b1"]))
        h = ag.add(h, ag.affine(f, T[p + "ff.w2"], T[p + "ff.b2"]))
    return h


def _head(tokens: ag.Tensor, coords: np.ndarray, T: dict, cfg: ModelConfig) -> ag.Tensor:
    off = ag.reshape(ag.affine(tokens, T["head.w"], T["head.b"]), (cfg.n_proxy, cfg.q, 3))
    pts = ag.add(off, ag.const(coords[:, None, :]))
    return ag.reshape(pts, (cfg.M, 3))


def _net(plan: Plan, T: dict, cfg: ModelConfig, trace: Optional[dict] = None) -> ag.Tensor:
    coords = plan.pts[plan.centers]
    feats = _proxy_features(plan, T)
    tokens = _encode(coords, feats, T, cfg, trace)
    return _head(tokens, coords, T, cfg)


# ---------------------------------------------------- public stage functions


@dataclass(frozen=True)
class Proxies:
    coords: np.ndarray
    features: np.ndarray

    def __len__(self):
        return self.coords.shape[0]

    def as_list(self) -> list:
        return [PointProxy(tuple(c), f) for c, f in zip(self.coords, self.features)]


def extract_proxies(X, params, cfg: ModelConfig, seed: int = 0) -> Proxies:
    plan = prepare(X, cfg, seed)
    feats = _proxy_features(plan, _tensors(params, False))
    return Proxies(plan.pts[plan.centers], feats.data)


def encode(proxies: Proxies, params, cfg: ModelConfig, trace: Optional[dict] = None) -> np.ndarray:
    """Transformer tokens, one per proxy, each repeated ``q`` times -> ``(M, d_model)``."""
    if len(proxies) != cfg.n_proxy or proxies.features.shape[1] != cfg.d_model:
        raise ConfigError(f"expected {cfg.n_proxy} proxies of width {cfg.d_model}, "
                          f"got {proxies.features.shape}")
    h = _encode(proxies.coords, ag.const(proxies.features), _tensors(params, False), cfg, trace)
    return np.repeat(h.data, cfg.q, axis=0)


def project(tokens: np.ndarray, params, cfg: ModelConfig, proxies: Proxies) -> np.ndarray:
    """Map token ``m`` (slot ``m % q`` of proxy ``m // q``) to an absolute point."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (cfg.M, cfg.d_model):
        raise ConfigError(f"expected {cfg.M} tokens of width {cfg.d_model}")
    w = np.asarray(params["head.w"], dtype=np.float64).reshape(cfg.d_model, cfg.q, 3)
    b = np.asarray(params["head.b"], dtype=np.float64).reshape(cfg.q, 3)
    slot = np.arange(cfg.M) % cfg.q
    off = np.einsum("md,mdc->mc", tokens, w[:, slot, :].transpose(1, 0, 2)) + b[slot]
    out = np.repeat(proxies.coords, cfg.q, axis=0) + off
    if not np.isfinite(out).all():
        raise NumericError("non-finite predicted coordinates")
    return out


def forward(X, params, cfg: ModelConfig, seed: int = 0, plan: Optional[Plan] = None,
            trace: Optional[dict] = None) -> np.ndarray:
    """Predicted missing points ``(M, 3)`` for input cloud X."""
    plan = plan or prepare(X, cfg, seed)
    out = _net(plan, _tensors(params, False), cfg, trace).data
    if not np.isfinite(out).all():
        raise NumericError("non-finite predicted coordinates")
    return out


def value_and_grad(params, sample: TrainingSample, cfg: ModelConfig,
                   loss_cfg: LossConfig = LossConfig(), seed: int = 0,
                   plan: Optional[Plan] = None, weights: Optional[np.ndarray] = None):
    """Loss and exact reverse-mode gradients for every parameter tensor.

    Mask multipliers are evaluated at the current prediction unless
    ``weights`` pins them. Returns ``(loss, grads, weights)``.
    """
    plan = plan or prepare(sample.input_cloud, cfg, seed)
    T = _tensors(params, True)
    P = _net(plan, T, cfg)
    if weights is None:
        weights = mask_weights(P.data, sample.masks, loss_cfg.delta)
    value, gP = loss_and_grad(P.data, sample.target_cloud, sample.masks, loss_cfg,
                              weights=weights)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value!r} (source {sample.source_id!r})")
    P.backward(gP)
    grads = OrderedDict((k, T[k].grad if T[k].grad is not None else np.zeros(T[k].shape))
                        for k in params)
    return value, grads, weights


def backward(sample: TrainingSample, params, cfg: ModelConfig,
             loss_cfg: LossConfig = LossConfig(), seed: int = 0):
    return value_and_grad(params, sample, cfg, loss_cfg, seed)[1]


def loss_value(params, sample: TrainingSample, cfg: ModelConfig,
               loss_cfg: LossConfig = LossConfig(), seed: int = 0,
               plan: Optional[Plan] = None, weights: Optional[np.ndarray] = None) -> float:
    plan = plan or prepare(sample.input_cloud, cfg, seed)
    P = _net(plan, _tensors(params, False), cfg).data
    if weights is None:
        weights = mask_weights(P, sample.masks, loss_cfg.delta)
    return loss_and_grad(P, sample.target_cloud, sample.masks, loss_cfg, weights=weights)[0]


# ------------------------------------------------------------------ training


@dataclass
class TrainState:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        for k, a in self.params.items():
            self.m.setdefault(k, np.zeros_like(a, dtype=np.float32))
            self.v.setdefault(k, np.zeros_like(a, dtype=np.float32))

    @classmethod
    def fresh(cls, cfg: ModelConfig, seed: int = 0) -> "TrainState":
        return cls(cfg, init_params(cfg, seed), seed=seed)

    def copy(self) -> "TrainState":
        dup = lambda d: OrderedDict((k, a.copy()) for k, a in d.items())  # noqa: E731
        return TrainState(self.config, dup(self.params), dup(self.m), dup(self.v),
                          self.step, self.seed)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: TrainState, grads, opt: AdamConfig) -> None:
    t = state.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for k, g in grads.items():
        m = opt.beta1 * state.m[k].astype(np.float64) + (1 - opt.beta1) * g
        v = opt.beta2 * state.v[k].astype(np.float64) + (1 - opt.beta2) * g * g
        upd = opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        state.params[k] = (state.params[k].astype(np.float64) - upd).astype(np.float32)
        state.m[k] = m.astype(np.float32)
        state.v[k] = v.astype(np.float32)
    state.step = t


def sample_order(seed: int, step: int, n: int) -> int:
    return int(np.random.default_rng([seed, step]).integers(n))


def train(dataset: Sequence[TrainingSample], cfg: ModelConfig,
          loss_cfg: LossConfig = LossConfig(), steps: int = 2000, lr: float = 1e-3,
          seed: int = 0, state: Optional[TrainState] = None, log_every: int = 0,
          log=print):
    """Adam over uniformly drawn samples. Returns ``(state, loss_trace)``.

    The trace holds the loss of each step evaluated before its update.
    Resuming from ``state`` continues its step counter and uses its seed.
    A non-finite loss raises :class:`NumericError` carrying the last good state.
    """
    if not dataset:
        raise ConfigError("training set is empty")
    state = state or TrainState.fresh(cfg, seed)
    check_params(state.params, cfg)
    opt = AdamConfig(lr=lr)
    plans = {}
    trace = []
    for _ in range(steps):
        i = sample_order(state.seed, state.step, len(dataset))
        if i not in plans:
            plans[i] = prepare(dataset[i].input_cloud, cfg, state.seed)
        try:
            value, grads, _ = value_and_grad(state.params, dataset[i], cfg, loss_cfg,
                                             plan=plans[i])
        except NumericError as exc:
            raise NumericError(f"step {state.step}: {exc}", state=state.copy()) from exc
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise NumericError(f"step {state.step}: non-finite gradient", state=state.copy())
        trace.append(value)
        adam_step(state, grads, opt)
        if log_every and state.step % log_every == 0:
            log(f"step {state.step:6d}  loss {value:.6f}")
    return state, trace


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TEMD"
CKPT_VERSION = 1


def _pack_tensors(tensors) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, a in tensors.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.off, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise FormatError(f"{self.name}: truncated checkpoint")
        b = self.raw[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(count):
            (ln,) = self.unpack("<H")
            name = self.take(ln).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims)
            out[name] = data.astype(np.float32)
        return out


def save_checkpoint(state: TrainState, path) -> None:
    cfg = json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8")
    blob = b"".join([
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        struct.pack("<I", len(cfg)), cfg,
        _pack_tensors(state.params),
        _pack_tensors(state.m),
        _pack_tensors(state.v),
        struct.pack("<QQ", state.step, state.seed),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> TrainState:
    """Read a checkpoint; with ``expect`` tensors are validated against that config."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a TEMD checkpoint")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (ln,) = r.unpack("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(ln).decode("utf-8")))
    except (ValueError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad model config: {exc}") from exc
    params, m, v = r.tensors(), r.tensors(), r.tensors()
    step, seed = r.unpack("<QQ")
    if r.off != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.off} trailing bytes")
    check_params(params, expect or cfg)
    for moments in (m, v):
        check_params(moments, expect or cfg)
    return TrainState(expect or cfg, params, m, v, step, seed)
