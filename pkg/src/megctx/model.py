"""Factorized criss-cross transformer over tokenized multi-channel signals.

Token embeddings (concatenated codebook rows through a linear projection)
plus additive sensor embeddings feed a stack of pre-norm layers.  Each layer
splits the normed features in half: the first half attends across channels
at every timestep (spatial), the second half attends across timesteps
within every channel (temporal, with rotary positions); their outputs are
concatenated back, added residually, and followed by a SELU feed-forward
block.  Attention cost is O(C*T'^2 + T'*C^2) per layer instead of the
O((C*T')^2) of dense attention over the flattened grid.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import truncnorm

from .tensor import Tensor, concat, no_grad
from .functional import rms_norm, softmax_rows, rope_apply, selu
from .sensors import FourierMap, SensorArray, sensor_embedding
from .rvq import RvqCodec, TokenGrid

_NEG_INF = -1e30


@dataclass
class BackboneConfig:
    n_layers: int = 8
    d_model: int = 512
    n_heads: int = 8
    ffn_mult: int = 4
    q_levels: int = 6
    vocab: int = 256
    d_codebook: int = 16
    c_max: int = 64
    d_fourier: int = 256
    sigma_pos: float = 1.8
    sigma_ori: float = 1.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (features split into two halves)")
        if (self.d_model // 2) % self.n_heads != 0:
            raise ValueError("d_model/2 must be divisible by n_heads")
        for name in ("n_layers", "d_model", "n_heads", "ffn_mult", "q_levels",
                     "vocab", "d_codebook", "c_max", "d_fourier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_fourier % 2 != 0:
            raise ValueError("d_fourier must be even")

    @property
    def d_half(self) -> int:
        return self.d_model // 2

    @property
    def d_head(self) -> int:
        return self.d_half // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneConfig":
        return cls(**doc)


def _trunc_normal(rng, shape, std=0.02):
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape,
                         random_state=rng).astype(np.float32)


class Backbone:
    """Parameter container plus frozen Fourier maps.  Params live in a flat
    name -> Tensor dict so checkpoints can address them individually."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.pos_map = FourierMap.create(cfg.d_fourier, cfg.sigma_pos, rng)
        self.ori_map = FourierMap.create(cfg.d_fourier, cfg.sigma_ori, rng)

        p: dict[str, Tensor] = {}

        def param(name, shape, init="tn"):
            if init == "tn":
                data = _trunc_normal(rng, shape)
            elif init == "zeros":
                data = np.zeros(shape, dtype=np.float32)
            elif init == "ones":
                data = np.ones(shape, dtype=np.float32)
            else:
                raise ValueError(init)
            p[name] = Tensor(data, requires_grad=True)

        d = cfg.d_model
        param("embed/w_proj", (cfg.q_levels * cfg.d_codebook, d))
        param("embed/mask", (d,))
        param("sensor/w_pos", (cfg.d_fourier, d))
        param("sensor/w_ori", (cfg.d_fourier, d))
        param("sensor/type_table", (2, d))
        dh = cfg.d_half
        for i in range(cfg.n_layers):
            param(f"layer{i}/attn_norm", (d,), "ones")
            for half in ("spatial", "temporal"):
                for w in ("wq", "wk", "wv", "wo"):
                    param(f"layer{i}/{half}/{w}", (dh, dh))
            param(f"layer{i}/ffn_norm", (d,), "ones")
            param(f"layer{i}/ffn/w1", (d, cfg.ffn_mult * d))
            param(f"layer{i}/ffn/b1", (cfg.ffn_mult * d,), "zeros")
            param(f"layer{i}/ffn/w2", (cfg.ffn_mult * d, d))
            param(f"layer{i}/ffn/b2", (d,), "zeros")
        for q in range(cfg.q_levels):
            param(f"head{q}/w", (d, cfg.vocab))
            param(f"head{q}/b", (cfg.vocab,), "zeros")
        self.params = p
        self.param_count = sum(t.data.size for t in p.values())

    def __repr__(self):
        return (f"Backbone(layers={self.cfg.n_layers}, d_model={self.cfg.d_model}, "
                f"params={self.param_count})")

    def sensor_embedding(self, arr: SensorArray) -> Tensor:
        p = self.params
        return sensor_embedding(arr, self.pos_map, self.ori_map,
                                p["sensor/w_pos"], p["sensor/w_ori"],
                                p["sensor/type_table"], self.cfg.c_max)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def apply_mask(tok: Tensor, plan, mask_embedding: Tensor) -> Tensor:
    """Replace the token embedding at every masked step, on all channels,
    with the learnable mask embedding.  Unmasked positions pass through."""
    steps = np.asarray(plan.masked_steps)
    if steps.size == 0:
        return tok
    t_prime, d = tok.shape[-2], tok.shape[-1]
    if steps.min() < 0 or steps.max() >= t_prime:
        raise ValueError("mask plan addresses steps outside the grid")
    m = np.zeros(t_prime, dtype=tok.data.dtype)
    m[steps] = 1.0
    mt = m[None, :, None]
    return tok * (1.0 - mt) + mask_embedding.reshape(1, 1, d) * mt


def embed_tokens(bb: Backbone, codec: RvqCodec, grid: TokenGrid,
                 sensor_emb: Tensor, valid: np.ndarray, plan=None) -> Tensor:
    """[C_max, T', d_model]: codebook rows -> projection, optional mask
    replacement of the token part, additive sensor embedding, padded rows
    forced to zero."""
    cfg = bb.cfg
    codes = grid.codes
    if codes.shape[0] != cfg.c_max:
        raise ValueError("grid must be padded to C_max channels")
    if codes.shape[2] != cfg.q_levels:
        raise ValueError("grid levels do not match the model")
    if grid.vocab != cfg.vocab:
        raise ValueError("grid vocab does not match the model")
    parts = [codec.codebooks[q][codes[:, :, q]] for q in range(cfg.q_levels)]
    tok_np = np.concatenate(parts, axis=-1).astype(np.float32)
    tok = Tensor(tok_np) @ bb.params["embed/w_proj"]
    if plan is not None:
        tok = apply_mask(tok, plan, bb.params["embed/mask"])
    h = tok + sensor_emb.reshape(cfg.c_max, 1, cfg.d_model)
    vf = valid.astype(tok.data.dtype)[:, None, None]
    return h * vf


def criss_cross_attention(bb: Backbone, layer: int, pre: Tensor, valid: np.ndarray,
                          positions, capture=None) -> Tensor:
    """The factorized attention sub-layer on pre-normed features [C_max, T', d]."""
    cfg = bb.cfg
    p = bb.params
    c_max, t_prime = pre.shape[0], pre.shape[1]
    nh, dhh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dhh)
    dh = cfg.d_half

    xs = pre[..., :dh]
    xt = pre[..., dh:]

    # spatial: attend across channels at each timestep
    xst = xs.transpose(1, 0, 2)                       # [T', C, dh]
    qs = (xst @ p[f"layer{layer}/spatial/wq"]).reshape(t_prime, c_max, nh, dhh).transpose(0, 2, 1, 3)
    ks = (xst @ p[f"layer{layer}/spatial/wk"]).reshape(t_prime, c_max, nh, dhh).transpose(0, 2, 1, 3)
    vs = (xst @ p[f"layer{layer}/spatial/wv"]).reshape(t_prime, c_max, nh, dhh).transpose(0, 2, 1, 3)
    scores = (qs @ ks.transpose(0, 1, 3, 2)) * scale  # [T', nh, C, C]
    madd = np.where(valid, 0.0, _NEG_INF).astype(pre.data.dtype)[None, None, None, :]
    att_s = softmax_rows(scores + madd)
    if capture is not None:
        capture.add_attention(layer, "spatial", att_s.data)
    os_ = (att_s @ vs).transpose(0, 2, 1, 3).reshape(t_prime, c_max, dh)
    os_ = (os_ @ p[f"layer{layer}/spatial/wo"]).transpose(1, 0, 2)   # [C, T', dh]

    # temporal: attend across timesteps within each channel, rotary positions
    qt = (xt @ p[f"layer{layer}/temporal/wq"]).reshape(c_max, t_prime, nh, dhh).transpose(0, 2, 1, 3)
    kt = (xt @ p[f"layer{layer}/temporal/wk"]).reshape(c_max, t_prime, nh, dhh).transpose(0, 2, 1, 3)
    vt = (xt @ p[f"layer{layer}/temporal/wv"]).reshape(c_max, t_prime, nh, dhh).transpose(0, 2, 1, 3)
    qt = rope_apply(qt, positions, base=cfg.rope_base)
    kt = rope_apply(kt, positions, base=cfg.rope_base)
    scores_t = (qt @ kt.transpose(0, 1, 3, 2)) * scale   # [C, nh, T', T']
    att_t = softmax_rows(scores_t)
    if capture is not None:
        capture.add_attention(layer, "temporal", att_t.data)
    ot = (att_t @ vt).transpose(0, 2, 1, 3).reshape(c_max, t_prime, dh)
    ot = ot @ p[f"layer{layer}/temporal/wo"]

    return concat([os_, ot], axis=-1)


def criss_cross_layer(bb: Backbone, layer: int, h: Tensor, valid: np.ndarray,
                      positions, capture=None) -> Tensor:
    p = bb.params
    pre = rms_norm(h, p[f"layer{layer}/attn_norm"])
    if capture is not None:
        capture.add_norm_rms(layer, "attn", pre.data)
    h = h + criss_cross_attention(bb, layer, pre, valid, positions, capture)
    pre2 = rms_norm(h, p[f"layer{layer}/ffn_norm"])
    if capture is not None:
        capture.add_norm_rms(layer, "ffn", pre2.data)
    ffn = selu(pre2 @ p[f"layer{layer}/ffn/w1"] + p[f"layer{layer}/ffn/b1"])
    ffn = ffn @ p[f"layer{layer}/ffn/w2"] + p[f"layer{layer}/ffn/b2"]
    return h + ffn


def forward(bb: Backbone, codec: RvqCodec, grid: TokenGrid, arr: SensorArray,
            plan=None, capture=None) -> Tensor:
    """Full backbone pass; returns final hidden states [C_max, T', d_model]."""
    cfg = bb.cfg
    valid = np.zeros(cfg.c_max, dtype=bool)
    valid[:arr.n_channels] = True
    if not valid.any():
        raise ValueError("no valid channels")
    semb = bb.sensor_embedding(arr)
    h = embed_tokens(bb, codec, grid, semb, valid, plan=plan)
    positions = np.arange(grid.n_steps)
    for i in range(cfg.n_layers):
        h = criss_cross_layer(bb, i, h, valid, positions, capture)
    return h


def logits_heads(bb: Backbone, h: Tensor) -> Tensor:
    """Per-level vocabulary logits [C_max, T', Q, V]."""
    from .tensor import stack
    outs = [h @ bb.params[f"head{q}/w"] + bb.params[f"head{q}/b"]
            for q in range(bb.cfg.q_levels)]
    return stack(outs, axis=2)


def attention_cost_estimate(c: int, t_prime: int, mode: str, d_model: int) -> float:
    """Analytic per-layer attention cost in multiply-accumulates."""
    if c < 1 or t_prime < 1 or d_model < 1:
        raise ValueError("sizes must be positive")
    if mode == "dense":
        return float((c * t_prime) ** 2 * d_model)
    if mode == "factorized":
        return float((c * t_prime ** 2 + t_prime * c ** 2) * (d_model / 2))
    raise ValueError(f"unknown mode {mode!r}")


def time_criss_cross_attention(c: int, t_prime: int, d_model: int = 32,
                               n_heads: int = 2, reps: int = 3, seed: int = 0) -> float:
    """Median wall time of one factorized attention sub-layer forward pass."""
    cfg = BackboneConfig(n_layers=1, d_model=d_model, n_heads=n_heads,
                         q_levels=1, vocab=4, d_codebook=2, c_max=c,
                         d_fourier=4)
    bb = Backbone(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    h = Tensor(rng.normal(size=(c, t_prime, d_model)).astype(np.float32))
    valid = np.ones(c, dtype=bool)
    positions = np.arange(t_prime)
    times = []
    with no_grad():
        criss_cross_attention(bb, 0, h, valid, positions)   # warm up
        for _ in range(reps):
            t0 = time.perf_counter()
            criss_cross_attention(bb, 0, h, valid, positions)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def time_dense_attention(c: int, t_prime: int, d_model: int = 32,
                         n_heads: int = 2, reps: int = 3, seed: int = 0) -> float:
    """Median wall time of dense multi-head attention over the flat C*T' grid."""
    n = c * t_prime
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(n, d_model)).astype(np.float32))
    wq = Tensor(rng.normal(size=(d_model, d_model)).astype(np.float32) * 0.02)
    wk = Tensor(rng.normal(size=(d_model, d_model)).astype(np.float32) * 0.02)
    wv = Tensor(rng.normal(size=(d_model, d_model)).astype(np.float32) * 0.02)
    wo = Tensor(rng.normal(size=(d_model, d_model)).astype(np.float32) * 0.02)
    dhh = d_model // n_heads
    scale = 1.0 / np.sqrt(dhh)

    def run():
        q = (x @ wq).reshape(n, n_heads, dhh).transpose(1, 0, 2)
        k = (x @ wk).reshape(n, n_heads, dhh).transpose(1, 0, 2)
        v = (x @ wv).reshape(n, n_heads, dhh).transpose(1, 0, 2)
        a = softmax_rows((q @ k.transpose(0, 2, 1)) * scale)
        return ((a @ v).transpose(1, 0, 2).reshape(n, d_model)) @ wo

    times = []
    with no_grad():
        run()
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    return float(np.median(times))
