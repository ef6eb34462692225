"""Recordings and the preprocessing chain: band-pass, resample, standardize.

The chain follows fixed order: zero-phase band-pass on the raw rate, then
polyphase resampling, then per-subsegment robust standardization with the
amplitude clamp applied last.  Band-pass and resampling are deterministic
per recording and are typically applied once; standardization is applied to
each sampled window or 3 s word slice so that segment statistics are local
to the sample being fed to the model.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import butter, sosfiltfilt, resample_poly
from fractions import Fraction


@dataclass
class WordEvent:
    """A single word presentation: onset in seconds, class label, stimulus id."""
    onset_s: float
    label: int
    stimulus_id: str = ""


@dataclass
class Recording:
    """Multi-channel time series with sample rate, geometry, and word events."""
    data: np.ndarray                 # [C, T] float32
    sample_rate_hz: float
    sensors: "object" = None         # SensorArray or None
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("recording data must be [channels, samples]")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("recording needs at least one channel and one sample")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        dur = self.duration_s
        last = -np.inf
        for ev in self.events:
            if ev.onset_s < last:
                raise ValueError("events must be sorted by onset")
            if not (0.0 <= ev.onset_s < dur):
                raise ValueError(f"event onset {ev.onset_s} outside recording")
            last = ev.onset_s

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate_hz


@dataclass
class SignalConfig:
    high_pass_hz: float = 0.1
    low_pass_hz: float = 40.0
    resample_hz: float = 50.0
    segment_s: float = 3.0
    baseline_s: float = 0.5
    clamp: float = 5.0


def bandpass_filter(rec: Recording, high_pass_hz: float = 0.1,
                    low_pass_hz: float = 40.0) -> Recording:
    """Zero-phase 4th-order Butterworth band-pass."""
    nyq = rec.sample_rate_hz / 2.0
    if not (0.0 < high_pass_hz < low_pass_hz < nyq):
        raise ValueError(
            f"band ({high_pass_hz}, {low_pass_hz}) invalid for fs={rec.sample_rate_hz}")
    sos = butter(4, [high_pass_hz, low_pass_hz], btype="bandpass",
                 fs=rec.sample_rate_hz, output="sos")
    # the high-pass pole rings for seconds; pad a few corner periods so edge
    # transients do not leak into the interior
    padlen = min(rec.n_samples - 1, int(3.0 * rec.sample_rate_hz / high_pass_hz))
    y = sosfiltfilt(sos, rec.data.astype(np.float64), axis=-1, padlen=padlen)
    return replace(rec, data=y.astype(np.float32))


def resample(rec: Recording, target_hz: float) -> Recording:
    """Polyphase resample to target_hz; output length round(T * target/source)."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == rec.sample_rate_hz:
        return replace(rec, data=rec.data.copy())
    ratio = Fraction(target_hz) / Fraction(rec.sample_rate_hz)
    ratio = ratio.limit_denominator(10_000)
    y = resample_poly(rec.data.astype(np.float64), ratio.numerator,
                      ratio.denominator, axis=-1)
    n_out = int(round(rec.n_samples * target_hz / rec.sample_rate_hz))
    if y.shape[1] < n_out:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])))
    y = y[:, :n_out]
    events = [ev for ev in rec.events if ev.onset_s < n_out / target_hz]
    return Recording(y.astype(np.float32), target_hz, sensors=rec.sensors, events=events)


def standardize_array(x: np.ndarray, sample_rate_hz: float, segment_s: float = 3.0,
                      baseline_s: float = 0.5, clamp: float = 5.0) -> np.ndarray:
    """Robust-standardize [C, T] in contiguous segments; returns [C, n_seg*seg_len].

    Per segment and channel: subtract the mean of the first baseline_s, then
    apply a two-slope affine map so the empirical median (linear-interpolation
    estimator) lands exactly at 0 and the quartiles exactly at -1/+1.  The
    center c sits between the two middle order statistics a <= b; requiring
    the interpolated median of the output to vanish gives
    c = (b*q25 - a*q75)/(b + q25 - a - q75), and the side slopes are then
    1/(c - q25) and 1/(q75 - c).  Segments with ~zero IQR become zeros.  The
    trailing partial segment is dropped.  Clamp to [-clamp, clamp] last.
    """
    seg_len = int(round(segment_s * sample_rate_hz))
    base_len = int(round(baseline_s * sample_rate_hz))
    if seg_len < 2 or not (0 < base_len < seg_len):
        raise ValueError("segment/baseline lengths invalid at this sample rate")
    n_seg = x.shape[1] // seg_len
    if n_seg < 1:
        raise ValueError("recording shorter than one segment")

    y = x[:, :n_seg * seg_len].astype(np.float64).reshape(x.shape[0], n_seg, seg_len)
    y = y - y[:, :, :base_len].mean(axis=-1, keepdims=True)

    a = np.quantile(y, 0.5, method="lower", axis=-1, keepdims=True)
    b = np.quantile(y, 0.5, method="higher", axis=-1, keepdims=True)
    q25 = np.quantile(y, 0.25, axis=-1, keepdims=True)
    q75 = np.quantile(y, 0.75, axis=-1, keepdims=True)
    iqr = q75 - q25
    scale_ref = np.maximum(np.abs(y).max(axis=-1, keepdims=True), 1.0)
    tiny = 1e-9 * scale_ref
    degenerate = iqr <= tiny
    safe_iqr = np.where(degenerate, 1.0, iqr)

    denom = b + q25 - a - q75
    c = np.where(np.abs(denom) > tiny, (b * q25 - a * q75) / np.where(denom != 0, denom, 1.0),
                 0.5 * (a + b))
    lo_span = c - q25
    hi_span = q75 - c
    # heavy ties can collapse one side; fall back to the symmetric 2/IQR scale
    bad_side = (lo_span <= tiny) | (hi_span <= tiny)
    c = np.where(bad_side, 0.5 * (a + b), c)
    slo = np.where(bad_side, 2.0 / safe_iqr, 1.0 / np.where(lo_span > tiny, lo_span, 1.0))
    shi = np.where(bad_side, 2.0 / safe_iqr, 1.0 / np.where(hi_span > tiny, hi_span, 1.0))

    centered = y - c
    out = centered * np.where(centered >= 0, shi, slo)
    out = np.where(degenerate, 0.0, out)
    out = np.clip(out, -clamp, clamp)
    return out.reshape(x.shape[0], n_seg * seg_len).astype(np.float32)


def standardize_subsegments(rec: Recording, segment_s: float = 3.0,
                            baseline_s: float = 0.5, clamp: float = 5.0) -> Recording:
    out = standardize_array(rec.data, rec.sample_rate_hz, segment_s, baseline_s, clamp)
    dur = out.shape[1] / rec.sample_rate_hz
    events = [ev for ev in rec.events if ev.onset_s < dur]
    return Recording(out, rec.sample_rate_hz, sensors=rec.sensors, events=events)


def prepare_recording(rec: Recording, cfg: SignalConfig) -> Recording:
    """Band-pass then resample.  Standardization is applied per window later."""
    return resample(bandpass_filter(rec, cfg.high_pass_hz, cfg.low_pass_hz),
                    cfg.resample_hz)


def preprocess(rec: Recording, cfg: SignalConfig) -> Recording:
    """Full chain with recording-aligned standardization (codec corpora etc.)."""
    prepared = prepare_recording(rec, cfg)
    return standardize_subsegments(prepared, cfg.segment_s, cfg.baseline_s, cfg.clamp)
