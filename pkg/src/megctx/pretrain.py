"""Temporal block masking, the masked-token objective, and the training loop.

The token axis is partitioned into equal-duration blocks (3 s each at the
default geometry); a fixed number of distinct blocks is drawn uniformly
without replacement and every channel is masked at those steps.  The loss
is cross-entropy over the masked positions only, averaged over masked
steps, valid channels, and quantizer levels.  Zero-shot evaluation masks
just the central block of an unseen window.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, take_along_axis, no_grad
from .functional import log_softmax
from .optim import AdamW, warmup_scale
from .signal import Recording, SignalConfig, prepare_recording, standardize_array
from .sensors import pad_and_mask
from .rvq import RvqCodec, TokenGrid, rvq_encode
from .model import Backbone, BackboneConfig, apply_mask, forward, logits_heads  # noqa: F401
from . import dataio


@dataclass
class PretrainConfig:
    sample_len_s: float = 150.0
    block_s: float = 3.0
    n_blocks_masked: int = 20
    steps: int = 35000
    lr: float = 1e-4
    warmup_steps: int = 250
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sample_len_s <= 0 or self.block_s <= 0:
            raise ValueError("durations must be positive")
        if self.n_blocks_masked < 0 or self.n_blocks_masked > self.n_blocks:
            raise ValueError("n_blocks_masked must lie in [0, n_blocks]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def n_blocks(self) -> int:
        return int(round(self.sample_len_s / self.block_s))


@dataclass
class MaskPlan:
    """Which token steps are hidden.  Masking has time-only structure: the
    same steps are replaced on every channel."""
    masked_steps: np.ndarray
    block_bounds: np.ndarray
    masked_blocks: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.masked_steps = np.asarray(self.masked_steps, dtype=np.int64)
        self.block_bounds = np.asarray(self.block_bounds, dtype=np.int64)
        self.masked_blocks = np.asarray(self.masked_blocks, dtype=np.int64)

    @property
    def n_masked(self) -> int:
        return int(self.masked_steps.size)

    def fraction(self) -> float:
        return self.masked_steps.size / float(self.block_bounds[-1])


def block_boundaries(t_prime: int, n_blocks: int) -> np.ndarray:
    """floor(b * T' / n_blocks) for b = 0..n_blocks; sizes differ by at most 1."""
    return (np.arange(n_blocks + 1, dtype=np.int64) * t_prime) // n_blocks


def plan_from_blocks(t_prime: int, n_blocks: int, blocks, seed: int = 0) -> MaskPlan:
    bounds = block_boundaries(t_prime, n_blocks)
    blocks = np.sort(np.asarray(blocks, dtype=np.int64))
    if blocks.size and (blocks.min() < 0 or blocks.max() >= n_blocks):
        raise ValueError("block index outside the grid")
    steps = np.concatenate([np.arange(bounds[b], bounds[b + 1])
                            for b in blocks]) if blocks.size else np.empty(0, np.int64)
    return MaskPlan(masked_steps=steps, block_bounds=bounds,
                    masked_blocks=blocks, seed=seed)


def sample_block_mask(t_prime: int, cfg: PretrainConfig, seed: int) -> MaskPlan:
    nb = cfg.n_blocks
    if t_prime < nb:
        raise ValueError(f"need at least {nb} token steps, got {t_prime}")
    rng = np.random.default_rng(seed)
    blocks = rng.choice(nb, size=cfg.n_blocks_masked, replace=False)
    return plan_from_blocks(t_prime, nb, blocks, seed=seed)


def central_block_plan(t_prime: int, cfg: PretrainConfig) -> MaskPlan:
    """Mask only the central block of the window (zero-shot evaluation)."""
    nb = cfg.n_blocks
    return plan_from_blocks(t_prime, nb, [nb // 2])


# ---------------------------------------------------------------- objective

def _position_weight(plan: MaskPlan, valid: np.ndarray, t_prime: int) -> np.ndarray:
    w = np.zeros((valid.size, t_prime), dtype=np.float32)
    if plan.masked_steps.size:
        w[np.ix_(valid, plan.masked_steps)] = 1.0
    return w


def masked_ce_loss(logits: Tensor, grid: TokenGrid, plan: MaskPlan,
                   valid: np.ndarray) -> Tensor:
    """-1/(|M| * C_valid * Q) * sum of log p(correct code) over masked steps,
    valid channels, and all quantizer levels."""
    if plan.masked_steps.size == 0:
        raise ValueError("mask plan is empty")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid channels")
    c, t_prime, q_levels, _ = logits.shape
    lp = log_softmax(logits)
    picked = take_along_axis(lp, grid.codes[..., None], axis=-1)
    w = _position_weight(plan, valid, t_prime)[:, :, None, None]
    denom = float(plan.masked_steps.size * n_valid * q_levels)
    return -(picked * w).sum() / denom


def masked_accuracy(logits_data: np.ndarray, grid: TokenGrid, plan: MaskPlan,
                    valid: np.ndarray) -> float:
    """Top-1 code accuracy over masked positions of valid channels."""
    pred = np.argmax(logits_data, axis=-1)
    hits = (pred == grid.codes)
    sel = hits[valid][:, plan.masked_steps, :]
    return float(sel.mean()) if sel.size else 0.0


# ---------------------------------------------------------------- windows

def window_token_steps(sample_len_s: float, sample_rate_hz: float,
                       downsample: int) -> int:
    return int(round(sample_len_s * sample_rate_hz)) // downsample


def sample_window_start(n_samples: int, window_len: int, rng,
                        data_fraction: float = 1.0) -> int:
    """Uniform start index; data_fraction < 1 restricts starts to the leading
    part of the recording (used for low-data runs)."""
    span = n_samples - window_len
    if span < 0:
        raise ValueError("recording shorter than the context window")
    limit = int(np.floor(span * data_fraction))
    return int(rng.integers(0, limit + 1))


def standardized_window(rec: Recording, start: int, window_len: int,
                        sig_cfg: SignalConfig) -> np.ndarray:
    """Slice [C, window_len] from a prepared recording and robust-standardize
    its 3 s subsegments."""
    sl = rec.data[:, start:start + window_len]
    return standardize_array(sl, rec.sample_rate_hz,
                             segment_s=sig_cfg.segment_s,
                             baseline_s=sig_cfg.baseline_s,
                             clamp=sig_cfg.clamp)


def tokenize_window(codec: RvqCodec, window: np.ndarray, c_max: int):
    """Pad to C_max, encode; returns (TokenGrid [C_max, T', Q], valid [C_max])."""
    padded, valid = pad_and_mask(window, c_max)
    return rvq_encode(codec, padded), valid


# ---------------------------------------------------------------- driver

@dataclass
class PretrainResult:
    backbone: Backbone
    history: list = field(default_factory=list)
    best_loss: float = np.inf
    best_path: str = ""
    last_path: str = ""


def _metrics_writer(path):
    f = open(path, "w", newline="")
    w = csv.writer(f)
    w.writerow(["step", "loss", "masked_acc", "lr"])
    return f, w


def pretrain_run(recordings, codec: RvqCodec, model_cfg: BackboneConfig,
                 cfg: PretrainConfig, out_dir, sig_cfg: SignalConfig = None,
                 data_fraction: float = 1.0, backbone: Backbone = None,
                 already_prepared: bool = False, log_every: int = 1) -> PretrainResult:
    """Masked-token pre-training over a list of (Recording, subject) pairs.

    Recordings are band-passed and resampled once up front; each step picks
    a recording and a random window start, standardizes the window, encodes
    it, masks sampled blocks, and applies one clipped AdamW update with
    linear warmup.  Writes metrics.csv plus best/last checkpoints.
    """
    sig_cfg = sig_cfg or SignalConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    prepared = []
    for rec, _subject in recordings:
        prepared.append(rec if already_prepared else prepare_recording(rec, sig_cfg))
    if not prepared:
        raise ValueError("no recordings to train on")

    window_len = int(round(cfg.sample_len_s * sig_cfg.resample_hz))
    if backbone is None:
        backbone = Backbone(model_cfg, seed=cfg.seed)
    opt = AdamW([(backbone.params, cfg.lr)], weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)

    result = PretrainResult(backbone=backbone)
    result.best_path = str(out_dir / "best.ckpt")
    result.last_path = str(out_dir / "last.ckpt")
    f, writer = _metrics_writer(out_dir / "metrics.csv")
    try:
        for step in range(cfg.steps):
            losses, accs = [], []
            opt.zero_grad()
            for _ in range(cfg.batch_size):
                idx = int(rng.integers(0, len(prepared)))
                rec = prepared[idx]
                start = sample_window_start(rec.n_samples, window_len, rng,
                                            data_fraction)
                window = standardized_window(rec, start, window_len, sig_cfg)
                grid, valid = tokenize_window(codec, window, model_cfg.c_max)
                plan = sample_block_mask(grid.n_steps, cfg,
                                         seed=int(rng.integers(0, 2 ** 31)))
                arr = recordings[idx][0].sensors
                h = forward(backbone, codec, grid, arr, plan=plan)
                logits = logits_heads(backbone, h)
                loss = masked_ce_loss(logits, grid, plan, valid)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"non-finite loss {loss.item()} at step {step}")
                (loss / float(cfg.batch_size)).backward()
                losses.append(loss.item())
                with no_grad():
                    accs.append(masked_accuracy(logits.data, grid, plan, valid))
            lr_scale = warmup_scale(step + 1, cfg.warmup_steps)
            opt.step(lr_scale=lr_scale)
            mean_loss = float(np.mean(losses))
            row = {"step": step, "loss": mean_loss,
                   "masked_acc": float(np.mean(accs)),
                   "lr": cfg.lr * lr_scale}
            result.history.append(row)
            if step % log_every == 0 or step == cfg.steps - 1:
                writer.writerow([row["step"], f"{row['loss']:.6f}",
                                 f"{row['masked_acc']:.6f}", f"{row['lr']:.8g}"])
            if mean_loss < result.best_loss:
                result.best_loss = mean_loss
                dataio.save_model(result.best_path, backbone, codec,
                                  extra={"step": step, "loss": mean_loss})
    finally:
        f.close()
    dataio.save_model(result.last_path, backbone, codec,
                      extra={"step": cfg.steps - 1,
                             "loss": result.history[-1]["loss"] if result.history else None})
    return result


# ---------------------------------------------------------------- zero-shot

def zero_shot_masked_accuracy(backbone: Backbone, codec: RvqCodec, recordings,
                              cfg: PretrainConfig, sig_cfg: SignalConfig = None,
                              max_windows: int = 64, stride_s: float = None,
                              already_prepared: bool = False):
    """Masked prediction on unseen data, hiding only the central block.

    Windows tile each recording with the given stride (default: the window
    length, i.e. non-overlapping).  Returns (accuracy, over_chance, n_preds)
    where chance is 1/vocab.
    """
    sig_cfg = sig_cfg or SignalConfig()
    window_len = int(round(cfg.sample_len_s * sig_cfg.resample_hz))
    stride = int(round((stride_s if stride_s is not None else cfg.sample_len_s)
                       * sig_cfg.resample_hz))
    hits = 0
    total = 0
    n_windows = 0
    with no_grad():
        for rec, _subject in recordings:
            if max_windows and n_windows >= max_windows:
                break
            prep = rec if already_prepared else prepare_recording(rec, sig_cfg)
            starts = range(0, max(prep.n_samples - window_len + 1, 0), stride)
            for start in starts:
                if max_windows and n_windows >= max_windows:
                    break
                window = standardized_window(prep, start, window_len, sig_cfg)
                grid, valid = tokenize_window(codec, window, backbone.cfg.c_max)
                plan = central_block_plan(grid.n_steps, cfg)
                h = forward(backbone, codec, grid, rec.sensors, plan=plan)
                logits = logits_heads(backbone, h)
                pred = np.argmax(logits.data, axis=-1)
                sel = (pred == grid.codes)[valid][:, plan.masked_steps, :]
                hits += int(sel.sum())
                total += int(sel.size)
                n_windows += 1
    if total == 0:
        return 0.0, 0.0, 0
    acc = hits / total
    return float(acc), float(acc * backbone.cfg.vocab), total
