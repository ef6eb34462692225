"""Sensor geometry and Gaussian Fourier feature embeddings.

Each channel carries a 3D position, a unit orientation, and a type
(gradiometer or magnetometer).  Positions and orientations are lifted to
gamma(v) = [cos(2 pi B v); sin(2 pi B v)] with a frozen random B drawn at
model init; learnable projections map the features to d_model and add to a
learnable per-type embedding.  Channel padding keeps a fixed C_max width:
padded rows are zero and masked out of spatial attention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, take

GRADIOMETER = 0
MAGNETOMETER = 1


@dataclass
class SensorArray:
    """Geometry for the real channels of one recording."""
    positions: np.ndarray       # [C, 3]
    orientations: np.ndarray    # [C, 3], unit rows
    types: np.ndarray           # [C] int, 0 gradiometer / 1 magnetometer

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.orientations = np.asarray(self.orientations, dtype=np.float64)
        self.types = np.asarray(self.types, dtype=np.int64)
        c = self.positions.shape[0]
        if self.positions.shape != (c, 3) or self.orientations.shape != (c, 3):
            raise ValueError("positions and orientations must be [C, 3]")
        if self.types.shape != (c,):
            raise ValueError("types must be [C]")
        norms = np.linalg.norm(self.orientations, axis=1)
        if c and np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("orientations must be unit vectors")
        if c and not np.isin(self.types, [GRADIOMETER, MAGNETOMETER]).all():
            raise ValueError("types must be 0 (gradiometer) or 1 (magnetometer)")

    @property
    def n_channels(self) -> int:
        return self.positions.shape[0]

    def to_json(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "orientations": self.orientations.tolist(),
            "types": self.types.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SensorArray":
        return cls(np.array(doc["positions"]), np.array(doc["orientations"]),
                   np.array(doc["types"]))


@dataclass
class FourierMap:
    """Frozen Gaussian frequency matrix B ~ N(0, sigma^2), shape [d_out/2, 3]."""
    b_matrix: np.ndarray
    sigma: float

    def __post_init__(self):
        self.b_matrix = np.asarray(self.b_matrix, dtype=np.float64)
        if self.b_matrix.ndim != 2 or self.b_matrix.shape[1] != 3:
            raise ValueError("frequency matrix must be [d_out/2, 3]")

    @property
    def d_out(self) -> int:
        return 2 * self.b_matrix.shape[0]

    @classmethod
    def create(cls, d_fourier: int, sigma: float, rng) -> "FourierMap":
        if d_fourier % 2 != 0 or d_fourier < 2:
            raise ValueError("d_fourier must be even and positive")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        b = rng.normal(scale=sigma, size=(d_fourier // 2, 3))
        return cls(b, sigma)


def fourier_features(fmap: FourierMap, v: np.ndarray) -> np.ndarray:
    """gamma(v) = [cos(2 pi B v); sin(2 pi B v)] for v [3] or a batch [C, 3]."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.shape[1] != 3:
        raise ValueError("coordinates must be 3D")
    proj = 2.0 * np.pi * (v @ fmap.b_matrix.T)
    out = np.concatenate([np.cos(proj), np.sin(proj)], axis=1)
    return out[0] if single else out


def sensor_embedding(arr: SensorArray, pos_map: FourierMap, ori_map: FourierMap,
                     w_pos: Tensor, w_ori: Tensor, type_table: Tensor,
                     c_max: int) -> Tensor:
    """Per-channel additive embedding [C_max, d_model]; padded rows are zero."""
    c = arr.n_channels
    if c > c_max:
        raise ValueError(f"{c} channels exceed C_max={c_max}")
    if c == 0:
        raise ValueError("no channels")
    gp = fourier_features(pos_map, arr.positions).astype(w_pos.data.dtype)
    go = fourier_features(ori_map, arr.orientations).astype(w_ori.data.dtype)
    emb = Tensor(gp) @ w_pos + Tensor(go) @ w_ori + take(type_table, arr.types)
    if c < c_max:
        pad = Tensor(np.zeros((c_max - c, emb.data.shape[1]), dtype=emb.data.dtype))
        emb = concat([emb, pad], axis=0)
    return emb


def pad_and_mask(data: np.ndarray, c_max: int):
    """Zero-pad [C, T] to [C_max, T]; returns (padded, valid bool [C_max])."""
    data = np.asarray(data)
    c = data.shape[0]
    if c > c_max:
        raise ValueError(f"{c} channels exceed C_max={c_max}")
    valid = np.zeros(c_max, dtype=bool)
    valid[:c] = True
    if c == c_max:
        return data.astype(np.float32, copy=True), valid
    padded = np.zeros((c_max, data.shape[1]), dtype=np.float32)
    padded[:c] = data
    return padded, valid
