"""Seeded synthetic multi-channel recordings with word events.

Background activity is a sum of first-order AR processes with spread time
constants, which gives an approximately 1/f spectrum.  Each word class has
a fixed spatiotemporal response template: a windowed sinusoid plus a slower
single-lobe deflection, each times its own unit spatial pattern.  Subjects
see the same templates mixed through their own random orthogonal channel
rotation of bounded angle, so per-subject decoding difficulty is unchanged
while templates stay partially aligned across subjects.  Because the
generator is fully seeded, a matched filter built from the same config is
an oracle decoder that upper bounds what any model can achieve.

Word sequences are i.i.d. by default.  With n_topics > 1 they instead
follow a slowly switching topic state: every ~topic_dwell_s seconds one of
n_topics overlapping vocabulary subsets becomes active and words are drawn
from it.  Any single word is ambiguous about the topic because subsets
overlap, but a stretch of them pins the active subset down, so context
beyond the immediate neighbors carries real information about upcoming and
masked words.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.signal import lfilter

from . import dataio
from .decode import Vocabulary
from .sensors import SensorArray
from .signal import Recording, WordEvent

_TAUS_S = (0.02, 0.1, 0.5, 2.5, 12.5)
_TEMPLATE_S = 1.0          # response support after onset
_BUMP_WEIGHT = 0.45        # slow-deflection amplitude relative to the sinusoid
_ROTATION_ANGLE = 0.5      # spectral norm of the rotation generator
LEAD_S = 0.5               # silence before the first onset
TAIL_S = 2.5               # kept after the last onset
WORDS_PER_STIMULUS = 50


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2
    channels: int = 16
    duration_s: float = 480.0
    sample_rate_hz: float = 250.0
    vocab_size: int = 50
    words_per_minute: float = 20.0
    snr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "channels", "duration_s", "sample_rate_hz",
                     "vocab_size", "words_per_minute"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.snr < 0:
            raise ValueError("snr must be nonnegative")


def _rng(cfg: SynthConfig, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *stream]))


def ar_noise(rng, channels: int, n_samples: int, rate_hz: float) -> np.ndarray:
    """Equal-variance sum of stationary AR(1) processes, one per time
    constant; per-channel variance is close to 1."""
    out = np.zeros((channels, n_samples))
    for tau in _TAUS_S:
        rho = float(np.exp(-1.0 / (tau * rate_hz)))
        innov = rng.standard_normal((channels, n_samples)) * np.sqrt(1.0 - rho ** 2)
        x0 = rng.standard_normal((channels, 1))
        x, _ = lfilter([1.0], [1.0, -rho], innov, axis=1, zi=rho * x0)
        out += x
    return out / np.sqrt(len(_TAUS_S))


# ---------------------------------------------------------------- templates

def _class_params(cfg: SynthConfig):
    rng = _rng(cfg, 101)
    k = cfg.vocab_size
    freqs = rng.uniform(2.0, 8.0, size=k)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=k)
    patterns = rng.standard_normal((k, cfg.channels))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    widths = rng.uniform(0.35, 0.70, size=k)
    latencies = rng.uniform(0.0, _TEMPLATE_S - widths)
    signs = rng.choice([-1.0, 1.0], size=k)
    bump_patterns = rng.standard_normal((k, cfg.channels))
    bump_patterns /= np.linalg.norm(bump_patterns, axis=1, keepdims=True)
    return freqs, phases, patterns, widths, latencies, signs, bump_patterns


def subject_rotation(cfg: SynthConfig, subject: int) -> np.ndarray:
    """Orthogonal channel mix for one subject.

    The matrix is the exponential of a random antisymmetric generator with
    unit spectral norm, scaled by a fixed angle.  A bounded angle keeps the
    rotated templates partially correlated across subjects (the cross-subject
    structure a shared model can exploit), while each subject's own matched
    filter is unaffected because the mix is exactly orthogonal.
    """
    rng = _rng(cfg, 202, subject)
    g = rng.standard_normal((cfg.channels, cfg.channels))
    a = (g - g.T) / 2.0
    a /= np.linalg.norm(a, 2)
    return expm(_ROTATION_ANGLE * a)


def class_templates(cfg: SynthConfig, subject: int) -> np.ndarray:
    """[K, C, L] response templates in the first second after onset.

    Each class is a Hann-windowed 2-8 Hz sinusoid on one unit spatial
    pattern plus a slower raised single-lobe deflection (random width,
    latency, and sign) on a second pattern.  The deflection survives
    per-word average pooling, which a zero-mean oscillation alone does
    not.  Both patterns are mixed through the subject's rotation.
    """
    (freqs, phases, patterns, widths, latencies, signs,
     bump_patterns) = _class_params(cfg)
    length = int(round(_TEMPLATE_S * cfg.sample_rate_hz))
    t = np.arange(length) / cfg.sample_rate_hz
    kernel = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :]
                    + phases[:, None]) * np.hanning(length)[None, :]
    x = (t[None, :] - latencies[:, None]) / widths[:, None]
    lobe = signs[:, None] * np.where(
        (x >= 0.0) & (x <= 1.0), np.sin(np.pi * np.clip(x, 0.0, 1.0)) ** 2, 0.0)
    rot = subject_rotation(cfg, subject)
    return ((patterns @ rot.T)[:, :, None] * kernel[:, None, :]
            + _BUMP_WEIGHT * (bump_patterns @ rot.T)[:, :, None]
            * lobe[:, None, :])


# ---------------------------------------------------------------- stimuli

def n_events_for(cfg: SynthConfig) -> int:
    period = 60.0 / cfg.words_per_minute
    usable = cfg.duration_s - LEAD_S - TAIL_S
    if usable < 0:
        return 0
    raw = int(np.floor(usable / period)) + 1
    # trailing partial block is dropped so every event has a stimulus id
    return (raw // WORDS_PER_STIMULUS) * WORDS_PER_STIMULUS


def stimulus_pool(cfg: SynthConfig):
    """Shared label sequences, one id per block of 50 words.

    Ids are picked so the crc-based split keeps roughly its 80:10:10 shape
    with at least one stimulus per partition once there are three or more
    blocks; candidate ids that would overfill a partition are skipped."""
    n_stimuli = n_events_for(cfg) // WORDS_PER_STIMULUS
    if n_stimuli == 0:
        raise ValueError("duration too short for a single 50-word stimulus")
    rng = _rng(cfg, 303)
    labels = rng.integers(0, cfg.vocab_size,
                          size=(n_stimuli, WORDS_PER_STIMULUS))
    want = {"train": max(1, n_stimuli - 2 * max(1, round(0.1 * n_stimuli))),
            "val": max(1, round(0.1 * n_stimuli)),
            "test": max(1, round(0.1 * n_stimuli))}
    if n_stimuli < 3:
        want = {"train": n_stimuli, "val": 0, "test": 0}
    ids, have = [], {"train": 0, "val": 0, "test": 0}
    candidate = 0
    while len(ids) < n_stimuli:
        sid = f"stim{candidate:04d}"
        candidate += 1
        part = dataio.split_for_stimulus(sid)
        if have[part] < want[part]:
            have[part] += 1
            ids.append(sid)
    return ids, labels


def _subject_order(cfg: SynthConfig, subject: int, n_stimuli: int):
    return _rng(cfg, 404, subject).permutation(n_stimuli)


# ---------------------------------------------------------------- recordings

def generate_sensors(cfg: SynthConfig, subject: int) -> SensorArray:
    rng = _rng(cfg, 606, subject)
    pos = rng.standard_normal((cfg.channels, 3))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    ori = rng.standard_normal((cfg.channels, 3))
    ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    return SensorArray(positions=pos, orientations=ori,
                       types=np.arange(cfg.channels) % 2)


def generate_recording(cfg: SynthConfig, subject: int) -> Recording:
    if not 0 <= subject < cfg.n_subjects:
        raise ValueError(f"subject {subject} out of range")
    rate = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * rate))
    data = ar_noise(_rng(cfg, 505, subject), cfg.channels, n, rate)
    templates = class_templates(cfg, subject)
    length = templates.shape[2]
    ids, labels = stimulus_pool(cfg)
    order = _subject_order(cfg, subject, len(ids))

    period = 60.0 / cfg.words_per_minute
    events = []
    for b, stim in enumerate(order):
        for w in range(WORDS_PER_STIMULUS):
            onset = LEAD_S + (b * WORDS_PER_STIMULUS + w) * period
            label = int(labels[stim, w])
            i0 = int(round(onset * rate))
            data[:, i0:i0 + length] += cfg.snr * templates[label]
            events.append(WordEvent(onset_s=onset, label=label,
                                    stimulus_id=ids[stim]))
    return Recording(data=data.astype(np.float32), sample_rate_hz=rate,
                     sensors=generate_sensors(cfg, subject), events=events)


def generate_vocab_embeddings(k: int, d_emb: int = 64, seed: int = 0) -> Vocabulary:
    if k < 2 or d_emb < 1:
        raise ValueError("need k >= 2 and d_emb >= 1")
    return Vocabulary.create(k, d_emb=d_emb, seed=seed)


def generate_dataset(cfg: SynthConfig, out_dir, d_emb: int = 64):
    """Writes the on-disk dataset directory; returns its path."""
    recs = [(generate_recording(cfg, s), s) for s in range(cfg.n_subjects)]
    vocab = generate_vocab_embeddings(cfg.vocab_size, d_emb=d_emb,
                                      seed=cfg.seed + 909)
    dataio.write_dataset(out_dir, recs, vocab.words, vocab.embeddings)
    return out_dir


# ---------------------------------------------------------------- oracle

def matched_filter_accuracy(cfg: SynthConfig, recordings) -> float:
    """Top-1 accuracy of correlating each post-onset second against every
    class template (regenerated from the config).  Model-free upper bound."""
    hits = total = 0
    for rec, subject in recordings:
        templates = class_templates(cfg, subject)
        k = templates.shape[0]
        flat = templates.reshape(k, -1)
        flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
        length = templates.shape[2]
        rate = rec.sample_rate_hz
        for ev in rec.events:
            i0 = int(round(ev.onset_s * rate))
            window = np.asarray(rec.data[:, i0:i0 + length], dtype=np.float64)
            if window.shape[1] < length:
                continue
            scores = flat @ window.reshape(-1)
            hits += int(np.argmax(scores) == ev.label)
            total += 1
    if total == 0:
        raise ValueError("no scorable events")
    return hits / total
