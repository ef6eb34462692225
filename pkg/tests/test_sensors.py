"""Geometry validation, Fourier features, padding, embedding gradients."""
import numpy as np
import pytest

from megctx.tensor import Tensor
from megctx.sensors import (
    SensorArray, FourierMap, fourier_features, sensor_embedding, pad_and_mask,
    GRADIOMETER, MAGNETOMETER,
)


def make_array(c=4, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(c, 3))
    ori = rng.normal(size=(c, 3))
    ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    types = np.arange(c) % 2
    return SensorArray(pos, ori, types)


def test_array_validation():
    with pytest.raises(ValueError):
        SensorArray(np.zeros((2, 3)), np.ones((2, 3)), np.zeros(2))  # non-unit
    with pytest.raises(ValueError):
        SensorArray(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros(2))
    arr = make_array(3)
    with pytest.raises(ValueError):
        SensorArray(arr.positions, arr.orientations, np.array([0, 1, 5]))


def test_array_json_roundtrip():
    arr = make_array(5, seed=1)
    back = SensorArray.from_json(arr.to_json())
    np.testing.assert_allclose(back.positions, arr.positions)
    np.testing.assert_allclose(back.orientations, arr.orientations)
    np.testing.assert_array_equal(back.types, arr.types)


def test_fourier_map_frozen_and_seeded():
    a = FourierMap.create(16, 1.8, np.random.default_rng(7))
    b = FourierMap.create(16, 1.8, np.random.default_rng(7))
    np.testing.assert_array_equal(a.b_matrix, b.b_matrix)
    assert a.d_out == 16


def test_fourier_map_validation():
    with pytest.raises(ValueError):
        FourierMap.create(15, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        FourierMap.create(16, 0.0, np.random.default_rng(0))


def test_fourier_features_at_origin():
    fmap = FourierMap.create(12, 1.0, np.random.default_rng(3))
    feat = fourier_features(fmap, np.zeros(3))
    np.testing.assert_allclose(feat[:6], 1.0)   # cos part
    np.testing.assert_allclose(feat[6:], 0.0)   # sin part


def test_fourier_features_formula_oracle():
    fmap = FourierMap.create(8, 2.0, np.random.default_rng(4))
    v = np.array([0.3, -1.2, 0.5])
    feat = fourier_features(fmap, v)
    proj = 2 * np.pi * fmap.b_matrix @ v
    np.testing.assert_allclose(feat, np.concatenate([np.cos(proj), np.sin(proj)]),
                               atol=1e-12)


def test_fourier_features_batch_matches_single():
    fmap = FourierMap.create(10, 1.5, np.random.default_rng(5))
    pts = np.random.default_rng(6).normal(size=(7, 3))
    batch = fourier_features(fmap, pts)
    for i in range(7):
        np.testing.assert_allclose(batch[i], fourier_features(fmap, pts[i]))


def test_bounded_features():
    fmap = FourierMap.create(64, 1.8, np.random.default_rng(8))
    pts = np.random.default_rng(9).normal(size=(100, 3)) * 10
    feats = fourier_features(fmap, pts)
    assert np.abs(feats).max() <= 1.0 + 1e-12


def test_pad_and_mask():
    data = np.ones((3, 20), dtype=np.float32)
    padded, valid = pad_and_mask(data, 5)
    assert padded.shape == (5, 20)
    np.testing.assert_array_equal(valid, [True] * 3 + [False] * 2)
    np.testing.assert_array_equal(padded[3:], 0.0)
    with pytest.raises(ValueError):
        pad_and_mask(data, 2)


def embedding_setup(c=3, c_max=5, d_model=8, d_fourier=6, seed=0):
    rng = np.random.default_rng(seed)
    arr = make_array(c, seed=seed)
    pos_map = FourierMap.create(d_fourier, 1.8, rng)
    ori_map = FourierMap.create(d_fourier, 1.0, rng)
    w_pos = Tensor(rng.normal(size=(d_fourier, d_model)).astype(np.float32), requires_grad=True)
    w_ori = Tensor(rng.normal(size=(d_fourier, d_model)).astype(np.float32), requires_grad=True)
    type_table = Tensor(rng.normal(size=(2, d_model)).astype(np.float32), requires_grad=True)
    return arr, pos_map, ori_map, w_pos, w_ori, type_table


def test_sensor_embedding_shape_and_padding():
    arr, pm, om, wp, wo, tt = embedding_setup()
    emb = sensor_embedding(arr, pm, om, wp, wo, tt, c_max=5)
    assert emb.data.shape == (5, 8)
    np.testing.assert_array_equal(emb.data[3:], 0.0)


def test_sensor_embedding_is_sum_of_three_terms():
    arr, pm, om, wp, wo, tt = embedding_setup(seed=2)
    emb = sensor_embedding(arr, pm, om, wp, wo, tt, c_max=3)
    from megctx.sensors import fourier_features as ff
    expect = (ff(pm, arr.positions) @ wp.data.astype(np.float64)
              + ff(om, arr.orientations) @ wo.data.astype(np.float64)
              + tt.data.astype(np.float64)[arr.types])
    np.testing.assert_allclose(emb.data, expect, atol=1e-5)


def test_sensor_embedding_gradients_flow():
    arr, pm, om, wp, wo, tt = embedding_setup(seed=3)
    emb = sensor_embedding(arr, pm, om, wp, wo, tt, c_max=5)
    (emb * emb).sum().backward()
    assert wp.grad is not None and np.abs(wp.grad).sum() > 0
    assert wo.grad is not None and np.abs(wo.grad).sum() > 0
    # both sensor types present, so both rows of the table get gradient
    assert np.abs(tt.grad).sum(axis=1).min() > 0


def test_sensor_embedding_c_exceeds_cmax_rejected():
    arr, pm, om, wp, wo, tt = embedding_setup(c=4)
    with pytest.raises(ValueError):
        sensor_embedding(arr, pm, om, wp, wo, tt, c_max=3)


def test_identical_geometry_identical_embedding():
    arr, pm, om, wp, wo, tt = embedding_setup(seed=4)
    # duplicate channel 0's geometry into channel 1
    pos = arr.positions.copy(); pos[1] = pos[0]
    ori = arr.orientations.copy(); ori[1] = ori[0]
    types = arr.types.copy(); types[1] = types[0]
    arr2 = SensorArray(pos, ori, types)
    emb = sensor_embedding(arr2, pm, om, wp, wo, tt, c_max=3)
    np.testing.assert_allclose(emb.data[0], emb.data[1], atol=0)
