"""Attention-pattern metrics: mean attention distance and entropy.

Temporal attention rows are probability distributions over timesteps, so
each query has a mean absolute distance to the steps it attends to (in
timesteps, converted to seconds by the frame hop r/f) and a Shannon
entropy.  Profiles average both over heads, queries, channels, and
randomly sampled segments, per layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad
from .signal import SignalConfig, prepare_recording
from .pretrain import sample_window_start, standardized_window, tokenize_window
from .model import forward

_ROW_TOL = 1e-5


def seconds_per_token(downsample: int, sample_rate_hz: float) -> float:
    """Duration of one token step: r / f (0.24 s at r=12, f=50)."""
    return downsample / sample_rate_hz


class AttentionCapture:
    """Collects attention weights (and pre-norm features) during a forward
    pass.  The backbone calls the add_* hooks; plain dicts keyed by layer
    hold everything, so captures from several forwards accumulate."""

    def __init__(self, validate: bool = True, keep_norms: bool = False):
        self.validate = validate
        self.keep_norms = keep_norms
        self.attention = {}            # (layer, kind) -> list of arrays
        self.norms = {}                # (layer, stage) -> latest array

    def add_attention(self, layer: int, kind: str, weights: np.ndarray) -> None:
        if self.validate:
            sums = weights.sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > _ROW_TOL):
                raise ValueError(f"layer {layer} {kind}: attention rows do not "
                                 "sum to 1")
            if np.any(weights < -1e-9):
                raise ValueError(f"layer {layer} {kind}: negative attention")
        self.attention.setdefault((layer, kind), []).append(weights)

    def add_norm_rms(self, layer: int, stage: str, values: np.ndarray) -> None:
        if self.keep_norms:
            self.norms[(layer, stage)] = values

    def temporal(self, layer: int):
        return self.attention.get((layer, "temporal"), [])

    def spatial(self, layer: int):
        return self.attention.get((layer, "spatial"), [])

    def layers(self):
        return sorted({layer for layer, kind in self.attention
                       if kind == "temporal"})


def _check_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("attention matrix must be square [t, t]")
    if np.any(a < -1e-9):
        raise ValueError("attention weights must be nonnegative")
    sums = a.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > _ROW_TOL):
        raise ValueError("attention rows must sum to 1")
    return np.clip(a, 0.0, None)


def mean_attention_distance(a: np.ndarray, seconds_per_step: float = 0.24) -> float:
    """Mean over query rows of sum_k A[t, k] * |t - k|, in seconds."""
    a = _check_rows(a)
    t = a.shape[0]
    idx = np.arange(t, dtype=np.float64)
    dist = np.abs(idx[:, None] - idx[None, :])
    return float((a * dist).sum(axis=1).mean() * seconds_per_step)


def attention_entropy(a: np.ndarray) -> float:
    """Mean over query rows of -sum_k A[t, k] log A[t, k], with 0 log 0 = 0."""
    a = _check_rows(a)
    logs = np.where(a > 0.0, np.log(np.where(a > 0.0, a, 1.0)), 0.0)
    return float(-(a * logs).sum(axis=1).mean())


def segment_layer_metrics(capture: AttentionCapture, valid: np.ndarray,
                          seconds_per_step: float):
    """Per layer: (mad_seconds, entropy_nats) averaged over valid channels
    and heads for the matrices captured so far."""
    out = {}
    for layer in capture.layers():
        mads, ents = [], []
        for arr in capture.temporal(layer):        # [C_max, nh, T', T']
            for c in np.flatnonzero(valid):
                for head in range(arr.shape[1]):
                    m = arr[c, head]
                    mads.append(mean_attention_distance(m, seconds_per_step))
                    ents.append(attention_entropy(m))
        out[layer] = (float(np.mean(mads)), float(np.mean(ents)))
    return out


@dataclass
class LayerProfile:
    layer: int
    mad_seconds: float
    entropy_nats: float
    stderr: float

    def row(self):
        return [self.layer, self.mad_seconds, self.entropy_nats, self.stderr]


def layer_attention_profile(bb, codec, recordings, sample_len_s: float,
                            n_segments: int = 100, seed: int = 0,
                            sig_cfg: SignalConfig = None,
                            already_prepared: bool = False,
                            n_seeds: int = 1):
    """Sample segments, run the backbone with capture on, and average MAD and
    entropy per layer.  n_seeds > 1 repeats the sampling with consecutive
    seeds and pools the segments.  stderr is the standard error of
    mad_seconds over all pooled segments."""
    sig_cfg = sig_cfg or SignalConfig()
    prepared = [rec if already_prepared else prepare_recording(rec, sig_cfg)
                for rec, _s in recordings]
    if not prepared:
        raise ValueError("no recordings")
    window_len = int(round(sample_len_s * sig_cfg.resample_hz))
    spt = seconds_per_token(codec.downsample, sig_cfg.resample_hz)

    per_layer_mad = {}
    per_layer_ent = {}
    with no_grad():
        for seed_offset in range(n_seeds):
            rng = np.random.default_rng(seed + seed_offset)
            for _ in range(n_segments):
                idx = int(rng.integers(0, len(prepared)))
                rec = prepared[idx]
                start = sample_window_start(rec.n_samples, window_len, rng)
                window = standardized_window(rec, start, window_len, sig_cfg)
                grid, valid = tokenize_window(codec, window, bb.cfg.c_max)
                cap = AttentionCapture()
                forward(bb, codec, grid, recordings[idx][0].sensors, capture=cap)
                for layer, (mad, ent) in segment_layer_metrics(cap, valid,
                                                               spt).items():
                    per_layer_mad.setdefault(layer, []).append(mad)
                    per_layer_ent.setdefault(layer, []).append(ent)

    profiles = []
    for layer in sorted(per_layer_mad):
        mads = np.array(per_layer_mad[layer])
        ents = np.array(per_layer_ent[layer])
        stderr = float(mads.std(ddof=1) / np.sqrt(mads.size)) if mads.size > 1 \
            else 0.0
        profiles.append(LayerProfile(layer=layer,
                                     mad_seconds=float(mads.mean()),
                                     entropy_nats=float(ents.mean()),
                                     stderr=stderr))
    return profiles


def write_profile_csv(path, profiles) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "mad_seconds", "entropy_nats", "stderr"])
        for p in profiles:
            w.writerow([p.layer, f"{p.mad_seconds:.9f}",
                        f"{p.entropy_nats:.9f}", f"{p.stderr:.9f}"])
