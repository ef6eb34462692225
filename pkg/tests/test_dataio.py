import numpy as np
import pytest

from megctx.dataio import (CheckpointState, load_codec, load_model,
                           read_checkpoint, read_dataset, read_recording_dir,
                           read_signal, read_vocab, save_codec, save_model,
                           split_for_stimulus, write_checkpoint,
                           write_dataset, write_recording_dir, write_signal,
                           write_vocab, model_state, model_from_state)
from megctx.model import Backbone, BackboneConfig
from megctx.signal import Recording, WordEvent

from conftest import make_codec, make_sensors
from test_model import tiny_cfg


def make_recording(rng, c=3, t=500, rate=100.0, n_events=4):
    data = rng.standard_normal((c, t)).astype(np.float32)
    events = [WordEvent(onset_s=float(i), label=i % 3, stimulus_id=f"s{i}")
              for i in range(n_events)]
    return Recording(data=data, sample_rate_hz=rate,
                     sensors=make_sensors(rng, c), events=events)


# ---------------------------------------------------------------- signal.f32

def test_signal_roundtrip(tmp_path, rng):
    data = rng.standard_normal((3, 17)).astype(np.float32)
    p = tmp_path / "x.f32"
    write_signal(p, data, 250.0)
    got, rate = read_signal(p)
    assert rate == 250.0
    np.testing.assert_array_equal(got, data)
    assert p.stat().st_size == 32 + 4 * 3 * 17


def test_signal_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.f32"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 40)
    with pytest.raises(ValueError, match="magic|not a signal"):
        read_signal(p)


def test_signal_rejects_size_mismatch(tmp_path, rng):
    p = tmp_path / "x.f32"
    write_signal(p, rng.standard_normal((2, 10)).astype(np.float32), 100.0)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="size"):
        read_signal(p)


# ---------------------------------------------------------------- dataset dir

def test_recording_dir_roundtrip(tmp_path, rng):
    rec = make_recording(rng)
    write_recording_dir(tmp_path / "rec000", rec, subject=2)
    got, subject = read_recording_dir(tmp_path / "rec000")
    assert subject == 2
    np.testing.assert_array_equal(got.data, rec.data)
    assert got.sample_rate_hz == rec.sample_rate_hz
    np.testing.assert_allclose(got.sensors.positions, rec.sensors.positions)
    np.testing.assert_array_equal(got.sensors.types, rec.sensors.types)
    assert [e.label for e in got.events] == [e.label for e in rec.events]
    assert [e.stimulus_id for e in got.events] == [e.stimulus_id for e in rec.events]


def test_dataset_roundtrip_and_label_validation(tmp_path, rng):
    recs = [(make_recording(rng), 0), (make_recording(rng, c=2), 1)]
    words = ["alpha", "beta", "gamma"]
    emb = rng.standard_normal((3, 4))
    write_dataset(tmp_path / "ds", recs, words, emb)
    loaded = list(read_dataset(tmp_path / "ds"))
    assert len(loaded) == 2
    assert loaded[1][1] == 1
    w, e = read_vocab(tmp_path / "ds" / "vocab.json")
    assert w == words
    np.testing.assert_array_equal(e, emb)


def test_dataset_rejects_label_out_of_vocab(tmp_path, rng):
    rec = make_recording(rng)          # labels 0..2
    write_dataset(tmp_path / "ds", [(rec, 0)], ["only", "two"],
                  rng.standard_normal((2, 4)))
    with pytest.raises(ValueError, match="out of vocabulary"):
        list(read_dataset(tmp_path / "ds"))


def test_writes_are_byte_stable(tmp_path, rng):
    rec = make_recording(rng)
    write_recording_dir(tmp_path / "a", rec, subject=0)
    write_recording_dir(tmp_path / "b", rec, subject=0)
    for name in ("signal.f32", "sensors.json", "events.json"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- split

def test_split_is_stable_and_exhaustive():
    ids = [f"stim{i}" for i in range(2000)]
    first = [split_for_stimulus(s) for s in ids]
    second = [split_for_stimulus(s) for s in ids]
    assert first == second
    counts = {k: first.count(k) for k in ("train", "val", "test")}
    assert sum(counts.values()) == 2000
    assert 0.7 < counts["train"] / 2000 < 0.9
    assert counts["val"] > 0 and counts["test"] > 0


def test_split_same_stimulus_same_partition():
    assert split_for_stimulus("story3_w17") == split_for_stimulus("story3_w17")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    tensors = {"a/w": rng.standard_normal((3, 4)).astype(np.float32),
               "b": rng.standard_normal(5),          # float64 survives intact
               "z/scalar": np.float32(2.5).reshape(())}
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, tensors, {"k": 1, "nested": {"x": 2.5}},
                     rng_state={"state": [1, 2]}, extra={"note": "hi"})
    st = read_checkpoint(p)
    for name, arr in tensors.items():
        assert st.tensors[name].dtype == arr.dtype
        np.testing.assert_array_equal(st.tensors[name], np.asarray(arr))
    assert st.config == {"k": 1, "nested": {"x": 2.5}}
    assert st.rng_state == {"state": [1, 2]}
    assert st.extra == {"note": "hi"}


def test_checkpoint_rewrite_is_byte_identical(tmp_path, rng):
    tensors = {"w": rng.standard_normal((4, 4)).astype(np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_checkpoint(p1, tensors, {"c": 3})
    st = read_checkpoint(p1)
    write_checkpoint(p2, st.tensors, st.config, st.rng_state, st.extra)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_detects_corruption(tmp_path, rng):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, {"w": np.ones(8, dtype=np.float32)}, {})
    raw = bytearray(p.read_bytes())
    raw[-10] ^= 0xFF                      # flip one payload byte
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        read_checkpoint(p)


def test_checkpoint_detects_truncation(tmp_path):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, {"w": np.ones(8, dtype=np.float32)}, {})
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(ValueError, match="truncated|checksum|not a checkpoint"):
        read_checkpoint(p)


def test_checkpoint_rejects_wrong_version(tmp_path):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, {"w": np.ones(2, dtype=np.float32)}, {})
    raw = bytearray(p.read_bytes())
    raw[9] = 9                             # version field follows the magic
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(p)


def test_checkpoint_rejects_bad_dtype(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        write_checkpoint(tmp_path / "c.ckpt", {"w": np.arange(3)}, {})


# -------------------------------------------------- model checkpoints

def test_model_checkpoint_roundtrip(tmp_path, rng):
    bb = Backbone(tiny_cfg(), seed=5)
    codec = make_codec(rng, levels=2, vocab=5, d_codebook=4)
    codec.training_mse = [0.5, 0.25]
    p = tmp_path / "m.ckpt"
    save_model(p, bb, codec)
    bb2, codec2, leftovers, _ = load_model(p)
    assert leftovers == {}
    assert bb2.cfg == bb.cfg
    for name in bb.params:
        np.testing.assert_array_equal(bb2.params[name].data, bb.params[name].data)
    np.testing.assert_array_equal(bb2.pos_map.b_matrix, bb.pos_map.b_matrix)
    np.testing.assert_array_equal(codec2.codebooks, codec.codebooks)
    assert codec2.training_mse == [0.5, 0.25]


def test_model_checkpoint_config_mismatch(tmp_path, rng):
    bb = Backbone(tiny_cfg(c_max=4), seed=0)
    codec = make_codec(rng, levels=2, vocab=5, d_codebook=4)
    p = tmp_path / "m.ckpt"
    save_model(p, bb, codec)
    with pytest.raises(ValueError, match="config mismatch.*c_max"):
        load_model(p, expected_cfg=tiny_cfg(c_max=8))


def test_model_checkpoint_rejects_unknown_tensor(tmp_path, rng):
    bb = Backbone(tiny_cfg(), seed=0)
    codec = make_codec(rng, levels=2, vocab=5, d_codebook=4)
    tensors, config = model_state(bb, codec)
    tensors["mystery/w"] = np.zeros(3, dtype=np.float32)
    p = tmp_path / "m.ckpt"
    write_checkpoint(p, tensors, config)
    with pytest.raises(ValueError, match="unknown tensor"):
        model_from_state(read_checkpoint(p))


def test_model_checkpoint_extra_prefix_passthrough(tmp_path, rng):
    bb = Backbone(tiny_cfg(), seed=0)
    codec = make_codec(rng, levels=2, vocab=5, d_codebook=4)
    head = {"decode/w1": np.ones((2, 2), dtype=np.float32)}
    p = tmp_path / "m.ckpt"
    save_model(p, bb, codec, extra_tensors=head)
    _, _, leftovers, _ = load_model(p, extra_prefixes=("decode/",))
    np.testing.assert_array_equal(leftovers["decode/w1"], head["decode/w1"])
    with pytest.raises(ValueError, match="unknown tensor"):
        load_model(p)


def test_codec_checkpoint_roundtrip(tmp_path, rng):
    codec = make_codec(rng, levels=3, vocab=7, d_codebook=4)
    codec.training_mse = [1.0, 0.5]
    p = tmp_path / "codec.ckpt"
    save_codec(p, codec)
    c2 = load_codec(p)
    np.testing.assert_array_equal(c2.codebooks, codec.codebooks)
    np.testing.assert_array_equal(c2.enc_w, codec.enc_w)
    assert c2.downsample == codec.downsample
    assert c2.training_mse == [1.0, 0.5]
