"""Shared builders for small hand-made models, codecs, and geometries."""
import numpy as np
import pytest

from megctx.rvq import RvqCodec, TokenGrid
from megctx.sensors import SensorArray


def make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4):
    cb = (0.5 * rng.standard_normal((levels, vocab, d_codebook))).astype(np.float32)
    cb[:, 0, :] = 0.0
    enc_w = rng.standard_normal((d_codebook, downsample)).astype(np.float32)
    enc_b = np.zeros(d_codebook, dtype=np.float32)
    dec_w = rng.standard_normal((downsample, d_codebook)).astype(np.float32)
    dec_b = np.zeros(downsample, dtype=np.float32)
    return RvqCodec(downsample=downsample, levels=levels, vocab=vocab,
                    d_codebook=d_codebook, codebooks=cb, enc_w=enc_w,
                    enc_b=enc_b, dec_w=dec_w, dec_b=dec_b)


def make_sensors(rng, c):
    pos = 0.1 * rng.standard_normal((c, 3))
    ori = rng.standard_normal((c, 3))
    ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    types = np.arange(c) % 2
    return SensorArray(positions=pos, orientations=ori, types=types)


def make_grid(rng, c_max, t_prime, levels, vocab, downsample=3):
    codes = rng.integers(0, vocab, size=(c_max, t_prime, levels))
    return TokenGrid(codes=codes, downsample=downsample, vocab=vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
