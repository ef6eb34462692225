"""On-disk formats: raw signal files, dataset directories, checkpoints.

A dataset directory holds one subdirectory per recording (signal.f32,
sensors.json, events.json) plus a dataset-level vocab.json.  Checkpoints
are single-file containers with a named-tensor table and a CRC32 over the
payload; reads are all-or-nothing.  All writes are byte-stable: the same
state always serializes to the same bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import Recording, WordEvent
from .sensors import SensorArray
from .rvq import RvqCodec
from .model import Backbone, BackboneConfig

SIGNAL_MAGIC = b"MEGXLSIG"
CKPT_MAGIC = b"MEGXLCKPT"
CKPT_VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


# ---------------------------------------------------------------- signal.f32

def write_signal(path, data: np.ndarray, sample_rate_hz: float) -> None:
    """32-byte header (magic, u32 C, u32 T, f64 rate, 8 reserved bytes) then
    row-major little-endian float32 samples."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("signal must be [channels, samples]")
    c, t = data.shape
    header = SIGNAL_MAGIC + struct.pack("<IId", c, t, float(sample_rate_hz)) + b"\x00" * 8
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_signal(path):
    """Returns (data [C, T] float32, sample_rate_hz)."""
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:8] != SIGNAL_MAGIC:
        raise ValueError(f"{path}: not a signal file (bad magic or truncated header)")
    c, t, rate = struct.unpack("<IId", raw[8:24])
    expected = 32 + 4 * c * t
    if len(raw) != expected:
        raise ValueError(f"{path}: payload size {len(raw) - 32} does not match "
                         f"header [C={c}, T={t}]")
    data = np.frombuffer(raw, dtype="<f4", count=c * t, offset=32).reshape(c, t)
    return data.copy(), rate


# ---------------------------------------------------------------- dataset dir

def write_recording_dir(rec_dir, rec: Recording, subject: int) -> None:
    rec_dir = Path(rec_dir)
    rec_dir.mkdir(parents=True, exist_ok=True)
    write_signal(rec_dir / "signal.f32", rec.data, rec.sample_rate_hz)
    if rec.sensors is None:
        raise ValueError("recording has no sensor geometry attached")
    (rec_dir / "sensors.json").write_bytes(_dump_json(rec.sensors.to_json()))
    events = [{"onset_s": ev.onset_s, "label": int(ev.label),
               "stimulus_id": ev.stimulus_id} for ev in rec.events]
    (rec_dir / "events.json").write_bytes(
        _dump_json({"subject": int(subject), "events": events}))


def read_recording_dir(rec_dir, n_labels: int | None = None):
    """Returns (Recording with sensors and events attached, subject index)."""
    rec_dir = Path(rec_dir)
    data, rate = read_signal(rec_dir / "signal.f32")
    sensors = SensorArray.from_json(
        json.loads((rec_dir / "sensors.json").read_text()))
    if sensors.n_channels != data.shape[0]:
        raise ValueError(f"{rec_dir}: sensors.json lists {sensors.n_channels} "
                         f"channels, signal has {data.shape[0]}")
    doc = json.loads((rec_dir / "events.json").read_text())
    events = []
    for ev in doc["events"]:
        label = int(ev["label"])
        if n_labels is not None and not (0 <= label < n_labels):
            raise ValueError(f"{rec_dir}: label {label} out of vocabulary "
                             f"(K={n_labels})")
        events.append(WordEvent(onset_s=float(ev["onset_s"]), label=label,
                                stimulus_id=ev["stimulus_id"]))
    rec = Recording(data=data, sample_rate_hz=rate, sensors=sensors,
                    events=events)
    return rec, int(doc["subject"])


def write_vocab(path, words: list, embeddings: np.ndarray) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(words):
        raise ValueError("one embedding row per word required")
    doc = {"words": list(words), "dim": int(embeddings.shape[1]),
           "embeddings": embeddings.tolist()}
    Path(path).write_bytes(_dump_json(doc))


def read_vocab(path):
    doc = json.loads(Path(path).read_text())
    emb = np.asarray(doc["embeddings"], dtype=np.float64)
    if emb.shape != (len(doc["words"]), doc["dim"]):
        raise ValueError(f"{path}: embedding table shape does not match header")
    return list(doc["words"]), emb


def recording_dirs(root):
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and
                  (d / "signal.f32").exists())
    if not dirs:
        raise ValueError(f"{root}: no recording directories found")
    return dirs


def write_dataset(root, recordings, words, embeddings) -> None:
    """recordings: iterable of (Recording, subject index)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, (rec, subject) in enumerate(recordings):
        write_recording_dir(root / f"rec{i:03d}", rec, subject)
    write_vocab(root / "vocab.json", words, embeddings)


def read_dataset(root):
    """Lazily yields (Recording, subject) with labels validated against the
    dataset vocabulary."""
    root = Path(root)
    words, _ = read_vocab(root / "vocab.json")
    for d in recording_dirs(root):
        yield read_recording_dir(d, n_labels=len(words))


def split_for_stimulus(stimulus_id: str) -> str:
    """Stable 80:10:10 split; every window of the same stimulus lands in the
    same partition regardless of subject or recording."""
    h = zlib.crc32(stimulus_id.encode("utf-8")) % 10
    if h < 8:
        return "train"
    return "val" if h == 8 else "test"


# ---------------------------------------------------------------- checkpoints

@dataclass
class CheckpointState:
    tensors: dict
    config: dict
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def write_checkpoint(path, tensors: dict, config: dict,
                     rng_state: dict | None = None,
                     extra: dict | None = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype_name = {"float32": "float32", "float64": "float64"}.get(arr.dtype.name)
        if dtype_name is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        table.append({"name": name, "dtype": dtype_name,
                      "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = _dump_json({"config": config, "rng_state": rng_state,
                       "extra": extra or {}, "tensors": table})
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(meta)))
        f.write(meta)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_checkpoint(path) -> CheckpointState:
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 12
    if len(raw) < head or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack("<IQ", raw[len(CKPT_MAGIC):head])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: format version {version} not supported "
                         f"(expected {CKPT_VERSION})")
    if head + meta_len + 4 > len(raw):
        raise ValueError(f"{path}: truncated metadata")
    meta = json.loads(raw[head:head + meta_len].decode("utf-8"))
    payload = raw[head + meta_len:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ValueError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in meta["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise ValueError(f"{path}: truncated payload (tensor "
                             f"{entry['name']!r} extends past the end)")
        arr = np.frombuffer(payload, dtype=dtype, count=count,
                            offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return CheckpointState(tensors=tensors, config=meta["config"],
                           rng_state=meta.get("rng_state"),
                           extra=meta.get("extra", {}))


# -------------------------------------------------- model <-> checkpoint

_CODEC_ARRAYS = ("codebooks", "enc_w", "enc_b", "dec_w", "dec_b")


def _codec_config(codec: RvqCodec) -> dict:
    return {"levels": codec.levels, "vocab": codec.vocab,
            "downsample": codec.downsample, "d_codebook": codec.d_codebook}


def codec_state(codec: RvqCodec):
    tensors = {f"codec/{n}": getattr(codec, n) for n in _CODEC_ARRAYS}
    config = {"codec": _codec_config(codec)}
    extra = {"training_mse": [float(v) for v in codec.training_mse]}
    return tensors, config, extra


def codec_from_state(state: CheckpointState) -> RvqCodec:
    cc = state.config["codec"]
    kwargs = {n: state.tensors[f"codec/{n}"].astype(np.float32)
              for n in _CODEC_ARRAYS}
    codec = RvqCodec(downsample=cc["downsample"], levels=cc["levels"],
                     vocab=cc["vocab"], d_codebook=cc["d_codebook"],
                     training_mse=list(state.extra.get("training_mse", [])),
                     **kwargs)
    return codec


def save_codec(path, codec: RvqCodec) -> None:
    tensors, config, extra = codec_state(codec)
    write_checkpoint(path, tensors, config, extra=extra)


def load_codec(path) -> RvqCodec:
    return codec_from_state(read_checkpoint(path))


def model_state(bb: Backbone, codec: RvqCodec, extra_tensors: dict | None = None):
    """Flattens backbone + codec (+ any additional named tensors, e.g. a
    decode head) into (tensors, config)."""
    tensors = {name: t.data for name, t in bb.params.items()}
    tensors["fourier/pos_b"] = bb.pos_map.b_matrix
    tensors["fourier/ori_b"] = bb.ori_map.b_matrix
    for name in _CODEC_ARRAYS:
        tensors[f"codec/{name}"] = getattr(codec, name)
    if extra_tensors:
        overlap = set(extra_tensors) & set(tensors)
        if overlap:
            raise ValueError(f"extra tensor names collide: {sorted(overlap)}")
        tensors.update(extra_tensors)
    config = {"backbone": bb.cfg.to_dict(), "backbone_seed": bb.seed,
              "codec": _codec_config(codec)}
    return tensors, config


def model_from_state(state: CheckpointState, extra_prefixes: tuple = ()):
    """Rebuilds (backbone, codec, leftover tensors).  Tensor names that are
    neither model state nor under an allowed extra prefix are rejected."""
    cfg = BackboneConfig.from_dict(state.config["backbone"])
    bb = Backbone(cfg, seed=state.config.get("backbone_seed", 0))
    codec = codec_from_state(state)
    known = set(bb.params) | {"fourier/pos_b", "fourier/ori_b"} \
        | {f"codec/{n}" for n in _CODEC_ARRAYS}
    leftovers = {}
    for name, arr in state.tensors.items():
        if name in bb.params:
            if bb.params[name].shape != arr.shape:
                raise ValueError(f"tensor {name!r}: stored shape {arr.shape} "
                                 f"does not match model {bb.params[name].shape}")
            bb.params[name].data = arr.astype(np.float32)
        elif name == "fourier/pos_b":
            bb.pos_map.b_matrix = arr.astype(np.float64)
        elif name == "fourier/ori_b":
            bb.ori_map.b_matrix = arr.astype(np.float64)
        elif name in known:
            pass                                   # codec arrays, handled above
        elif any(name.startswith(p) for p in extra_prefixes):
            leftovers[name] = arr
        else:
            raise ValueError(f"checkpoint holds unknown tensor {name!r}")
    missing = [n for n in bb.params if n not in state.tensors]
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {missing[:3]}")
    return bb, codec, leftovers


def save_model(path, bb: Backbone, codec: RvqCodec,
               rng_state: dict | None = None, extra: dict | None = None,
               extra_tensors: dict | None = None) -> None:
    tensors, config = model_state(bb, codec, extra_tensors)
    merged = {"training_mse": [float(v) for v in codec.training_mse]}
    merged.update(extra or {})
    write_checkpoint(path, tensors, config, rng_state=rng_state, extra=merged)


def load_model(path, expected_cfg: BackboneConfig | None = None,
               extra_prefixes: tuple = ()):
    state = read_checkpoint(path)
    if expected_cfg is not None:
        stored = state.config["backbone"]
        want = expected_cfg.to_dict()
        diffs = [f"{k} {stored[k]} != {want[k]}" for k in want
                 if stored.get(k) != want[k]]
        if diffs:
            raise ValueError("config mismatch: " + ", ".join(diffs))
    bb, codec, leftovers = model_from_state(state, extra_prefixes)
    return bb, codec, leftovers, state
