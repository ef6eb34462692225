"""Residual vector quantization of channel-wise signal frames.

Each channel's signal is cut into frames of r samples, mapped to a
d_codebook-dimensional latent by a linear autoencoder (PCA when d < r,
exact embedding when d >= r), then greedily quantized by Q codebooks of V
entries: level q encodes the residual left by levels < q.  Row 0 of every
codebook is pinned to the zero vector and never trained, so quantizing can
never make a residual longer (the zero codeword is always available).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RvqTrainConfig:
    levels: int = 6
    vocab: int = 256
    downsample: int = 12
    d_codebook: int = 16
    kmeans_iters: int = 8
    epochs: int = 6
    ema_decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.vocab < 2 or self.downsample < 1:
            raise ValueError("levels >= 1, vocab >= 2, downsample >= 1 required")
        if self.d_codebook < 1:
            raise ValueError("d_codebook >= 1 required")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")


@dataclass
class RvqCodec:
    """Trained tokenizer: frame autoencoder plus Q codebooks of V rows each."""
    downsample: int                      # r, samples per frame
    levels: int                          # Q
    vocab: int                           # V
    d_codebook: int
    codebooks: np.ndarray                # [Q, V, d] float32
    enc_w: np.ndarray                    # [d, r]
    enc_b: np.ndarray                    # [d]
    dec_w: np.ndarray                    # [r, d]
    dec_b: np.ndarray                    # [r]
    training_mse: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.codebooks.shape != (self.levels, self.vocab, self.d_codebook):
            raise ValueError("codebook shape mismatch")
        for name in ("codebooks", "enc_w", "enc_b", "dec_w", "dec_b"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, np.asarray(arr, dtype=np.float32))


@dataclass
class TokenGrid:
    """Integer codes [C, T', Q]; every entry is a codebook row index in [0, V)."""
    codes: np.ndarray
    downsample: int
    vocab: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 3:
            raise ValueError("codes must be [channels, steps, levels]")
        if self.codes.dtype.kind not in "iu":
            raise ValueError("codes must be integers")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.vocab):
            raise ValueError("code outside [0, vocab)")

    @property
    def n_channels(self):
        return self.codes.shape[0]

    @property
    def n_steps(self):
        return self.codes.shape[1]

    @property
    def n_levels(self):
        return self.codes.shape[2]


def _nearest(points: np.ndarray, codebook: np.ndarray, block: int = 8192) -> np.ndarray:
    """Row index of the nearest codebook entry for every point, ties to lowest."""
    half_sq = 0.5 * (codebook ** 2).sum(axis=1)
    out = np.empty(points.shape[0], dtype=np.int64)
    for s in range(0, points.shape[0], block):
        chunk = points[s:s + block]
        out[s:s + block] = np.argmax(chunk @ codebook.T - half_sq, axis=1)
    return out


def _fit_frame_autoencoder(frames: np.ndarray, d: int):
    """Linear autoencoder over frames [N, r]: PCA for d < r, exact for d >= r."""
    r = frames.shape[1]
    mu = frames.mean(axis=0)
    if d >= r:
        w = np.zeros((d, r))
        w[:r, :r] = np.eye(r)
    else:
        centered = frames - mu
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        w = vt[:d]
        # deterministic sign: largest-magnitude entry of each component positive
        flips = np.sign(w[np.arange(d), np.argmax(np.abs(w), axis=1)])
        flips[flips == 0] = 1.0
        w = w * flips[:, None]
    enc_w = w
    enc_b = -(mu @ w.T)
    dec_w = w.T
    dec_b = mu
    return enc_w, enc_b, dec_w, dec_b


def _kmeans(points: np.ndarray, k: int, iters: int, rng) -> np.ndarray:
    """Plain Lloyd iterations; empty clusters reseed to random points."""
    picks = rng.choice(points.shape[0], size=k, replace=False)
    centers = points[picks].copy()
    for _ in range(iters):
        assign = _nearest(points, centers)
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                centers[j] = points[rng.integers(points.shape[0])]
    return centers


def rvq_train(corpus, config: RvqTrainConfig) -> RvqCodec:
    """Fit the frame autoencoder and all Q codebooks on pooled channel frames.

    corpus: iterable of [C, T] arrays.  Levels train sequentially: k-means
    init on the current residuals, then damped EMA refinement; the recorded
    per-epoch MSE (mean squared residual under the assignment in force) is
    non-increasing across the whole schedule.
    """
    r = config.downsample
    pieces = []
    for arr in corpus:
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("corpus entries must be [channels, samples]")
        t_prime = a.shape[1] // r
        if t_prime:
            pieces.append(a[:, :t_prime * r].reshape(-1, r))
    if not pieces:
        raise ValueError("corpus has no full frames")
    frames = np.concatenate(pieces, axis=0)
    if frames.shape[0] < 10 * config.vocab:
        raise ValueError(
            f"need at least {10 * config.vocab} frames to train, got {frames.shape[0]}")

    rng = np.random.default_rng(config.seed)
    enc_w, enc_b, dec_w, dec_b = _fit_frame_autoencoder(frames, config.d_codebook)
    res = frames @ enc_w.T + enc_b

    v, gamma = config.vocab, config.ema_decay
    codebooks = np.zeros((config.levels, v, config.d_codebook))
    history = []
    for q in range(config.levels):
        cb = np.zeros((v, config.d_codebook))
        cb[1:] = _kmeans(res, v - 1, config.kmeans_iters, rng)
        ema_n = np.ones(v)
        ema_s = cb.copy()
        for _ in range(config.epochs):
            assign = _nearest(res, cb)
            diff = res - cb[assign]
            history.append(float((diff ** 2).sum(axis=1).mean()))
            # EMA toward current cluster means; row 0 stays pinned at zero
            counts = np.bincount(assign, minlength=v).astype(np.float64)
            sums = np.zeros_like(cb)
            np.add.at(sums, assign, res)
            ema_n = gamma * ema_n + (1 - gamma) * counts
            ema_s = gamma * ema_s + (1 - gamma) * sums
            live = ema_n > 1e-9
            live[0] = False
            cb[live] = ema_s[live] / ema_n[live, None]
            dead = (counts == 0)
            dead[0] = False
            for j in np.flatnonzero(dead):
                pick = res[rng.integers(res.shape[0])]
                cb[j] = pick
                ema_s[j] = pick
                ema_n[j] = 1.0
        assign = _nearest(res, cb)
        res = res - cb[assign]
        codebooks[q] = cb

    codec = RvqCodec(r, config.levels, v, config.d_codebook,
                     codebooks.astype(np.float32),
                     enc_w.astype(np.float32), enc_b.astype(np.float32),
                     dec_w.astype(np.float32), dec_b.astype(np.float32))
    codec.training_mse = history
    return codec


def encode_frames(codec: RvqCodec, x: np.ndarray) -> np.ndarray:
    """Latents [C, T', d] for a [C, T] signal (trailing partial frame dropped)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("signal must be [channels, samples]")
    r = codec.downsample
    t_prime = x.shape[1] // r
    if t_prime < 1:
        raise ValueError(f"need at least {r} samples per channel")
    frames = x[:, :t_prime * r].reshape(x.shape[0], t_prime, r)
    return frames @ codec.enc_w.astype(np.float64).T + codec.enc_b.astype(np.float64)


def rvq_encode(codec: RvqCodec, x: np.ndarray) -> TokenGrid:
    """Greedy residual coding; level q quantizes what levels < q left over."""
    lat = encode_frames(codec, x)
    c, t_prime, d = lat.shape
    res = lat.reshape(-1, d)
    codes = np.empty((res.shape[0], codec.levels), dtype=np.int32)
    for q in range(codec.levels):
        cb = codec.codebooks[q].astype(np.float64)
        idx = _nearest(res, cb)
        codes[:, q] = idx
        res = res - cb[idx]
    return TokenGrid(codes.reshape(c, t_prime, codec.levels), codec.downsample, codec.vocab)


def encode_with_residuals(codec: RvqCodec, x: np.ndarray):
    """Like rvq_encode but also returns residual norms [C, T', Q+1].

    Entry 0 is the latent norm before any level; entry q+1 the norm after
    subtracting level q's codeword.
    """
    lat = encode_frames(codec, x)
    c, t_prime, d = lat.shape
    res = lat.reshape(-1, d)
    codes = np.empty((res.shape[0], codec.levels), dtype=np.int32)
    norms = np.empty((res.shape[0], codec.levels + 1))
    norms[:, 0] = np.linalg.norm(res, axis=1)
    for q in range(codec.levels):
        cb = codec.codebooks[q].astype(np.float64)
        idx = _nearest(res, cb)
        codes[:, q] = idx
        res = res - cb[idx]
        norms[:, q + 1] = np.linalg.norm(res, axis=1)
    grid = TokenGrid(codes.reshape(c, t_prime, codec.levels), codec.downsample, codec.vocab)
    return grid, norms.reshape(c, t_prime, codec.levels + 1)


def rvq_decode(codec: RvqCodec, grid: TokenGrid, levels: int | None = None) -> np.ndarray:
    """Reconstruct [C, T'*r] from codes, optionally from a prefix of levels."""
    q_use = codec.levels if levels is None else levels
    if not (1 <= q_use <= codec.levels):
        raise ValueError("levels out of range")
    codes = grid.codes
    if codes.shape[2] < q_use:
        raise ValueError("grid has fewer levels than requested")
    if codes.min() < 0 or codes.max() >= codec.vocab:
        raise ValueError("code outside codebook range")
    lat = np.zeros((codes.shape[0], codes.shape[1], codec.d_codebook))
    for q in range(q_use):
        lat += codec.codebooks[q].astype(np.float64)[codes[:, :, q]]
    frames = lat @ codec.dec_w.astype(np.float64).T + codec.dec_b.astype(np.float64)
    c, t_prime = codes.shape[0], codes.shape[1]
    return frames.reshape(c, t_prime * codec.downsample).astype(np.float32)


def reconstruction_error(codec: RvqCodec, x: np.ndarray, levels: int | None = None) -> float:
    """Mean squared error between x and its decode(encode) round trip."""
    x = np.asarray(x, dtype=np.float64)
    grid = rvq_encode(codec, x)
    recon = rvq_decode(codec, grid, levels=levels).astype(np.float64)
    t_cov = recon.shape[1]
    return float(((x[:, :t_cov] - recon) ** 2).mean())
