"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic     8 bytes   b"SHSPLCKP"
    version   u32
    count     u32       number of records
    records   count x { name_len u16, name utf-8, kind u8, ndim u8,
                        shape ndim x u64, nbytes u64, payload }
    crc32     u32       of every preceding byte

``kind`` is ``f`` (float64), ``i`` (int64), ``u`` (uint8) or ``t`` (utf-8
text).  Arrays are stored C-contiguous so a save/load round trip is
bit-exact.  Any parse failure raises :class:`CheckpointError` carrying the
byte offset where it was detected.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .deform import DeformNet, EncodingConfig
from .errors import CheckpointError, ConfigurationError
from .motion import VelocityTrack
from .render import GAUSSIAN_FIELDS, Camera, GaussianSet, SceneModel
from .training import DensifyStats, FitState, OptimConfig, OptimState

MAGIC = b"SHSPLCKP"
VERSION = 1
_KINDS = {"f": np.float64, "i": np.int64, "u": np.uint8}


@dataclass
class Checkpoint:
    model: SceneModel
    state: FitState = None
    config_text: str = ""
    cameras: list = field(default_factory=list)


def _encode_records(records):
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, value in records:
        key = name.encode("utf-8")
        if isinstance(value, str):
            kind, shape, payload = "t", (), value.encode("utf-8")
        else:
            arr = np.ascontiguousarray(value)
            kind = {"f": "f", "i": "i", "u": "u", "b": "u"}[arr.dtype.kind]
            arr = arr.astype(_KINDS[kind], copy=False)
            shape, payload = arr.shape, arr.tobytes()
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<cB", kind.encode(), len(shape)))
        out.append(struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<Q", len(payload)) + payload)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_records(data):
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", len(MAGIC))
    records = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "record name length")
        try:
            name = r.take(n, "record name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("record name is not utf-8", start) from None
        kind, ndim = r.unpack("<cB", "record kind")
        kind = kind.decode("latin-1")
        shape = r.unpack(f"<{ndim}Q", "record shape")
        (nbytes,) = r.unpack("<Q", "record size")
        at = r.pos
        payload = r.take(nbytes, f"record {name!r}")
        if kind == "t":
            try:
                records[name] = payload.decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"record {name!r} is not utf-8 text", at) from None
        elif kind in _KINDS:
            dtype = np.dtype(_KINDS[kind])
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
                raise CheckpointError(f"record {name!r} size does not match its shape {shape}", at)
            records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        else:
            raise CheckpointError(f"unknown record kind {kind!r}", start)
    crc_at = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(data[:crc_at]):
        raise CheckpointError("checksum mismatch", crc_at)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checksum", r.pos)
    return records


def _camera_row(cam):
    return np.concatenate([[cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.near],
                           cam.rotation.reshape(-1), cam.translation])


def _camera_from_row(row):
    return Camera(row[0], row[1], row[2], row[3], int(row[4]), int(row[5]), row[7:16].reshape(3, 3),
                  row[16:19].copy(), row[6])


def checkpoint_bytes(model, state=None, config_text="", cameras=()):
    enc = model.net.encoding
    meta = {
        "t_start": model.track.t_start, "t_end": model.track.t_end, "use_velocity": model.use_velocity,
        "use_net": model.use_net, "modulate_opacity": model.modulate_opacity,
        "encoding": [enc.L_mu3, enc.L_mut, enc.L_tq, enc.L_vel], "num_anchors": model.net.num_anchors,
        "net_params": list(model.net.params),
    }
    records = [("config", config_text)]
    for name in GAUSSIAN_FIELDS:
        records.append(("gaussians/" + name, getattr(model.gaussians, name)))
    records += [("track/anchors", model.track.anchors), ("track/prefix", model.track.prefix),
                ("background", model.background)]
    for k, v in model.net.params.items():
        records.append(("net/" + k, v))
    records.append(("cameras", np.array([_camera_row(c) for c in cameras]).reshape(len(cameras), 19)))
    if state is not None:
        opt = state.optim
        meta["state"] = {
            "iteration": state.iteration, "step": opt.step, "frozen": sorted(opt.frozen),
            "optim": {k: getattr(opt.config, k) for k in OptimConfig.__dataclass_fields__},
            "moments": list(opt.m),
        }
        records.append(("rng", json.dumps(state.rng.bit_generator.state, sort_keys=True)))
        for k in opt.m:
            records += [("optim/m/" + k, opt.m[k]), ("optim/v/" + k, opt.v[k])]
        records += [("stats/grad_sum", state.stats.grad_sum), ("stats/count", state.stats.count),
                    ("pending_loss", np.array(state.pending_loss, dtype=np.float64))]
    records.insert(0, ("meta", json.dumps(meta, sort_keys=True)))
    return _encode_records(records)


def save_checkpoint(path, model, state=None, config_text="", cameras=()):
    """Write a checkpoint atomically (temp file + rename)."""
    data = checkpoint_bytes(model, state, config_text, cameras)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def parse_checkpoint(data):
    recs = _decode_records(data)

    def need(name):
        if name not in recs:
            raise CheckpointError(f"missing record {name!r}", None)
        return recs[name]

    try:
        meta = json.loads(need("meta"))
        gs = GaussianSet(*(need("gaussians/" + f) for f in GAUSSIAN_FIELDS))
        track = VelocityTrack(need("track/anchors"), meta["t_start"], meta["t_end"], need("track/prefix"))
        net = DeformNet({k: need("net/" + k) for k in meta["net_params"]}, EncodingConfig(*meta["encoding"]),
                        meta["num_anchors"])
        model = SceneModel(gs, track, net, meta["use_velocity"], meta["use_net"], meta["modulate_opacity"],
                           need("background"))
        cams = [_camera_from_row(row) for row in need("cameras")]
        state = None
        if "state" in meta:
            st = meta["state"]
            opt = OptimState(st["step"], {k: need("optim/m/" + k) for k in st["moments"]},
                             {k: need("optim/v/" + k) for k in st["moments"]}, OptimConfig(**st["optim"]),
                             frozenset(st["frozen"]))
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = json.loads(need("rng"))
            stats = DensifyStats(need("stats/grad_sum"), need("stats/count"))
            state = FitState(st["iteration"], opt, rng, stats, [float(x) for x in need("pending_loss")])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"inconsistent checkpoint contents: {exc}", None) from None
    _check_model(model, state)
    return Checkpoint(model, state, need("config"), cams)


def _check_model(model, state):
    gs = model.gaussians
    for name, arr in model.parameters().items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in {name}", None)
    if np.any(np.linalg.norm(gs.q_l, axis=1) <= 0) or np.any(np.linalg.norm(gs.q_r, axis=1) <= 0):
        raise CheckpointError("zero rotation quaternion", None)
    if state is not None:
        params = model.parameters()
        for k, m in state.optim.m.items():
            if k not in params or params[k].shape != m.shape:
                raise CheckpointError(f"optimizer moment {k!r} does not match its parameter", None)
        if state.stats.grad_sum.shape != (len(gs),):
            raise CheckpointError("densify statistics do not match the Gaussian count", None)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_checkpoint(data)
    except ConfigurationError as exc:
        raise CheckpointError(f"invalid model in checkpoint: {exc}", None) from None
