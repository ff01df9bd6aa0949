"""On-disk formats: recordings, instance tensors, checkpoints and the JSON manifest.

Byte layouts (all integers little-endian)::

    recording  "EARC" | u16 version | u16 channels | u32 sample_rate | u64 samples
               | float32[channels][samples]            (channel order: right, left)
               + sidecar <path>.json with the session metadata

    tensor     "EATN" | u16 version | u16 ndim | u32 header_len | u64[ndim] dims
               | header JSON (utf-8) | float32[prod(dims)]

    checkpoint "EACK" | u16 version | u32 header_len | header JSON (sorted keys)
               | tensors back to back in header order

Every reader checks the magic, the version and that the file length matches the
declared dimensions exactly, so a truncated or padded file is always rejected.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, DataError, FormatError, LeakageError
from .model import PARAM_VERSION, ModelConfig, ParameterSet, TrainConfig, expected_shapes
from .simchan import Recording, SessionMeta

REC_MAGIC = b"EARC"
TENSOR_MAGIC = b"EATN"
CKPT_MAGIC = b"EACK"
REC_VERSION = 1
TENSOR_VERSION = 1
CKPT_VERSION = 1
MANIFEST_FORMAT = "echoauth-manifest/1"

_REC_HEAD = struct.Struct("<4sHHIQ")
_TENSOR_HEAD = struct.Struct("<4sHHI")
_CKPT_HEAD = struct.Struct("<4sHI")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def digest_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e


def _check_magic(path, buf: bytes, magic: bytes, head_size: int) -> None:
    if len(buf) < head_size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -------------------------------------------------------------- recordings

def recording_payload_bytes(n_samples: int, channels: int = 2) -> int:
    return n_samples * channels * 4


def write_recording(path, rec: Recording) -> None:
    payload = np.stack([rec.right, rec.left]).astype("<f4")
    head = _REC_HEAD.pack(REC_MAGIC, REC_VERSION, 2, int(rec.sample_rate), len(rec))
    _write_atomic(path, head + payload.tobytes())
    side = {"meta": rec.meta.to_dict(), "sample_rate": rec.sample_rate, "samples": len(rec),
            "channels": ["right", "left"], "version": REC_VERSION}
    _write_atomic(str(path) + ".json", canonical_json(side))


def read_recording(path) -> Recording:
    buf = _read(path)
    _check_magic(path, buf, REC_MAGIC, _REC_HEAD.size)
    _, version, channels, rate, n = _REC_HEAD.unpack_from(buf)
    if version != REC_VERSION:
        raise FormatError(f"{path}: recording version {version}, reader supports {REC_VERSION}")
    if channels != 2:
        raise FormatError(f"{path}: expected 2 channels, header says {channels}")
    want = _REC_HEAD.size + recording_payload_bytes(n, channels)
    if len(buf) != want:
        raise FormatError(f"{path}: {len(buf)} bytes, header implies {want}")
    data = np.frombuffer(buf, dtype="<f4", offset=_REC_HEAD.size).reshape(channels, n)
    meta = SessionMeta()
    side = Path(str(path) + ".json")
    if side.exists():
        info = json.loads(side.read_text())
        meta = SessionMeta(**info.get("meta", {}))
    return Recording(left=data[1].astype(np.float32), right=data[0].astype(np.float32),
                     sample_rate=float(rate), meta=meta)


# ---------------------------------------------------------------- tensors

def write_tensor(path, array: np.ndarray, header: dict | None = None) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    hdr = canonical_json(header or {})
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.ndim, len(hdr))
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    _write_atomic(path, head + dims + hdr + arr.tobytes())


def read_tensor(path) -> tuple[np.ndarray, dict]:
    buf = _read(path)
    _check_magic(path, buf, TENSOR_MAGIC, _TENSOR_HEAD.size)
    _, version, ndim, hlen = _TENSOR_HEAD.unpack_from(buf)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: tensor version {version}, reader supports {TENSOR_VERSION}")
    pos = _TENSOR_HEAD.size
    if len(buf) < pos + 8 * ndim + hlen:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    want = pos + 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) != want:
        raise FormatError(f"{path}: {len(buf)} bytes, dimensions {dims} imply {want}")
    arr = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(dims).astype(np.float32)
    return arr, header


# ------------------------------------------------------------- checkpoints

def _ckpt_header(params: ParameterSet, train: TrainConfig | None) -> tuple[dict, list[np.ndarray]]:
    entries, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        v = params.tensors[name]
        le = v.astype(v.dtype.newbyteorder("<"), order="C")  # keeps 0-d shapes
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape),
                        "offset": offset, "nbytes": le.nbytes})
        blobs.append(le)
        offset += le.nbytes
    header = {"version": params.version, "model_config": params.config.to_dict(),
              "train_config": train.to_dict() if train is not None else None,
              "meta": params.meta, "tensors": entries}
    return header, blobs


def write_checkpoint(path, params: ParameterSet, train: TrainConfig | None = None) -> None:
    header, blobs = _ckpt_header(params, train)
    hdr = canonical_json(header)
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hdr)), hdr]
    parts += [b.tobytes() for b in blobs]
    _write_atomic(path, b"".join(parts))


def read_checkpoint(path, expect: ModelConfig | None = None) -> tuple[ParameterSet, TrainConfig | None]:
    """Load a checkpoint; ``expect`` refuses files built for another configuration."""
    buf = _read(path)
    _check_magic(path, buf, CKPT_MAGIC, _CKPT_HEAD.size)
    _, version, hlen = _CKPT_HEAD.unpack_from(buf)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, reader supports {CKPT_VERSION}")
    pos = _CKPT_HEAD.size
    if len(buf) < pos + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    if header.get("version") != PARAM_VERSION:
        raise FormatError(f"{path}: parameter tag {header.get('version')!r}, expected {PARAM_VERSION!r}")
    total = sum(e["nbytes"] for e in header["tensors"])
    if len(buf) != pos + total:
        raise FormatError(f"{path}: {len(buf) - pos} payload bytes, header declares {total}")
    cfg = ModelConfig.from_dict(header["model_config"])
    if expect is not None and cfg != expect:
        raise ConfigError(f"{path}: checkpoint config {cfg} does not match {expect}")
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * dt.itemsize != e["nbytes"]:
            raise FormatError(f"{path}: tensor {e['name']} size does not match its shape")
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos + e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
    want = expected_shapes(cfg)
    if set(want) != set(tensors) or any(tuple(tensors[k].shape) != want[k] for k in want):
        raise ConfigError(f"{path}: tensors do not match the stored model configuration")
    train = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else None
    params = ParameterSet(config=cfg, tensors=tensors, version=header["version"],
                          meta=header.get("meta") or {})
    return params, train


# ---------------------------------------------------------------- manifest

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "users"],
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "meta": {"type": "object"},
        "users": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "days"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "role": {"enum": ["pretrain", "enroll"]},
                    "days": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["day", "sessions"],
                            "properties": {
                                "day": {"type": "integer", "minimum": 1},
                                "sessions": {
                                    "type": "array",
                                    "items": {
                                        "type": "object",
                                        "required": ["id", "condition", "path", "duration"],
                                        "properties": {
                                            "id": {"type": "string", "minLength": 1},
                                            "index": {"type": "integer", "minimum": 0},
                                            "condition": {"type": "string"},
                                            "path": {"type": "string"},
                                            "duration": {"type": "number", "exclusiveMinimum": 0},
                                        },
                                    },
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class SessionEntry:
    id: str
    condition: str
    path: str
    duration: float
    index: int = 0

    def to_dict(self) -> dict:
        return {"id": self.id, "condition": self.condition, "path": self.path,
                "duration": self.duration, "index": self.index}


@dataclass(frozen=True)
class DayEntry:
    day: int
    sessions: tuple[SessionEntry, ...]


@dataclass(frozen=True)
class UserEntry:
    id: str
    days: tuple[DayEntry, ...]
    role: str = "enroll"


@dataclass
class Manifest:
    users: list[UserEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def sessions(self):
        """(user entry, day, session entry) in manifest order."""
        for u in self.users:
            for d in u.days:
                for s in d.sessions:
                    yield u, d.day, s

    def session_meta(self, user: UserEntry, day: int, s: SessionEntry) -> SessionMeta:
        return SessionMeta(user=user.id, day=day, session=s.index, condition=s.condition,
                           session_id=s.id)

    def resolve(self, s: SessionEntry) -> Path:
        return self.root / s.path

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "meta": self.meta,
            "users": [{"id": u.id, "role": u.role,
                       "days": [{"day": d.day, "sessions": [s.to_dict() for s in d.sessions]}
                                for d in u.days]}
                      for u in self.users],
        }

    def digest(self) -> str:
        return digest_json(self.to_dict())


def check_unique_sessions(ids) -> None:
    seen, dup = set(), set()
    for i in ids:
        (dup if i in seen else seen).add(i)
    if dup:
        raise LeakageError(f"session ids appear more than once: {sorted(dup)[:5]}")


def manifest_from_dict(doc: dict, root=".", check_paths: bool = True) -> Manifest:
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise FormatError(f"manifest does not match schema: {e.message}") from e
    users = []
    for u in doc["users"]:
        days = tuple(DayEntry(d["day"], tuple(SessionEntry(**s) for s in d["sessions"]))
                     for d in u["days"])
        users.append(UserEntry(u["id"], days, u.get("role", "enroll")))
    uid = [u.id for u in users]
    if len(set(uid)) != len(uid):
        raise LeakageError("user ids appear more than once")
    man = Manifest(users=users, root=Path(root), meta=doc.get("meta", {}))
    check_unique_sessions(s.id for _, _, s in man.sessions())
    if check_paths:
        missing = [s.path for _, _, s in man.sessions() if not man.resolve(s).exists()]
        if missing:
            raise DataError(f"{len(missing)} session files missing, e.g. {missing[0]}")
    return man


def write_manifest(path, man: Manifest) -> None:
    _write_atomic(path, json.dumps(man.to_dict(), indent=1, sort_keys=True).encode())


def read_manifest(path, check_paths: bool = True) -> Manifest:
    try:
        doc = json.loads(_read(path))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    return manifest_from_dict(doc, root=Path(path).parent, check_paths=check_paths)
