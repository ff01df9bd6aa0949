import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from echoauth.errors import ConfigError, FormatError, LeakageError
from echoauth.model import ModelConfig, TrainConfig, expected_shapes, init_params
from echoauth.simchan import Recording, SessionMeta
from echoauth.store import (MANIFEST_FORMAT, check_unique_sessions, digest_json, file_digest,
                            manifest_from_dict, read_checkpoint, read_manifest, read_recording,
                            read_tensor, recording_payload_bytes, write_checkpoint,
                            write_manifest, write_recording, write_tensor)


def _rec(n=3_000, seed=0):
    rng = np.random.default_rng(seed)
    meta = SessionMeta(user="u01", day=2, session=7, condition="sitting", session_id="u01-d2-s07")
    return Recording(left=rng.standard_normal(n).astype(np.float32),
                     right=rng.standard_normal(n).astype(np.float32), meta=meta)


def test_recording_round_trip(tmp_path):
    rec = _rec()
    write_recording(tmp_path / "a.rec", rec)
    back = read_recording(tmp_path / "a.rec")
    assert back.left.tobytes() == rec.left.tobytes()
    assert back.right.tobytes() == rec.right.tobytes()
    assert back.meta == rec.meta and back.sample_rate == rec.sample_rate
    write_recording(tmp_path / "b.rec", back)
    assert file_digest(tmp_path / "a.rec") == file_digest(tmp_path / "b.rec")


def test_ten_second_payload_size(tmp_path):
    assert recording_payload_bytes(10 * 50_000, 2) == 4_000_000
    rec = Recording(np.zeros(500_000, np.float32), np.zeros(500_000, np.float32))
    write_recording(tmp_path / "r.rec", rec)
    head = struct.calcsize("<4sHHIQ")
    assert (tmp_path / "r.rec").stat().st_size == head + 4_000_000


def test_recording_layout_is_right_then_left(tmp_path):
    rec = _rec(10)
    write_recording(tmp_path / "r.rec", rec)
    raw = (tmp_path / "r.rec").read_bytes()[struct.calcsize("<4sHHIQ"):]
    data = np.frombuffer(raw, "<f4").reshape(2, 10)
    np.testing.assert_array_equal(data[0], rec.right)
    np.testing.assert_array_equal(data[1], rec.left)


def test_corrupted_magic(tmp_path):
    write_recording(tmp_path / "r.rec", _rec())
    buf = bytearray((tmp_path / "r.rec").read_bytes())
    buf[0:4] = b"XXXX"
    (tmp_path / "r.rec").write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        read_recording(tmp_path / "r.rec")


@pytest.mark.parametrize("cut", [1, 4, 1000])
def test_truncated_recording(tmp_path, cut):
    write_recording(tmp_path / "r.rec", _rec())
    buf = (tmp_path / "r.rec").read_bytes()
    (tmp_path / "r.rec").write_bytes(buf[:-cut])
    with pytest.raises(FormatError):
        read_recording(tmp_path / "r.rec")


def test_padded_recording(tmp_path):
    write_recording(tmp_path / "r.rec", _rec())
    with open(tmp_path / "r.rec", "ab") as f:
        f.write(b"\0\0\0\0")
    with pytest.raises(FormatError):
        read_recording(tmp_path / "r.rec")


def test_recording_version_mismatch(tmp_path):
    write_recording(tmp_path / "r.rec", _rec())
    buf = bytearray((tmp_path / "r.rec").read_bytes())
    struct.pack_into("<H", buf, 4, 99)
    (tmp_path / "r.rec").write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="version"):
        read_recording(tmp_path / "r.rec")


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(0, 6), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
@settings(max_examples=30, deadline=None)
def test_tensor_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.ept"
    write_tensor(path, arr, {"k": [1, 2]})
    back, header = read_tensor(path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert header == {"k": [1, 2]}


def test_truncated_tensor(tmp_path):
    write_tensor(tmp_path / "x.ept", np.ones((2, 3, 4)))
    buf = (tmp_path / "x.ept").read_bytes()
    (tmp_path / "x.ept").write_bytes(buf[:-4])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "x.ept")


def test_checkpoint_resave_byte_identical(tmp_path):
    p = init_params(ModelConfig.desk(), seed=3)
    p.meta["stage"] = "base"
    write_checkpoint(tmp_path / "a.ck", p, TrainConfig())
    q, train = read_checkpoint(tmp_path / "a.ck")
    assert train == TrainConfig()
    assert q.digest() == p.digest()
    write_checkpoint(tmp_path / "b.ck", q, train)
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_checkpoint_wrong_config(tmp_path):
    write_checkpoint(tmp_path / "a.ck", init_params(ModelConfig.desk()))
    read_checkpoint(tmp_path / "a.ck", expect=ModelConfig.desk())
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "a.ck", expect=ModelConfig.desk(in_channels=1))
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "a.ck", expect=ModelConfig.linear())


def test_checkpoint_version_tag_refused(tmp_path):
    write_checkpoint(tmp_path / "a.ck", init_params(ModelConfig.linear()))
    buf = bytearray((tmp_path / "a.ck").read_bytes())
    struct.pack_into("<H", buf, 4, 7)
    (tmp_path / "a.ck").write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "a.ck")


def test_checkpoint_truncated(tmp_path):
    write_checkpoint(tmp_path / "a.ck", init_params(ModelConfig.linear()))
    buf = (tmp_path / "a.ck").read_bytes()
    (tmp_path / "a.ck").write_bytes(buf[:-8])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "a.ck")


def test_desk_checkpoint_under_5mb(tmp_path):
    cfg = ModelConfig.desk()
    n = sum(int(np.prod(s)) for s in expected_shapes(cfg).values())
    # float32 weights dominate; the JSON header is a few kB
    assert 4 * n < 5_000_000
    write_checkpoint(tmp_path / "a.ck", init_params(cfg))
    size = (tmp_path / "a.ck").stat().st_size
    assert 4 * n <= size < 5_000_000


def _manifest_doc(paths=("a.rec", "b.rec")):
    return {
        "format": MANIFEST_FORMAT,
        "users": [{"id": "u00", "role": "enroll", "days": [{"day": 1, "sessions": [
            {"id": f"s{i}", "condition": "sitting", "path": p, "duration": 10.0, "index": i}
            for i, p in enumerate(paths)]}]}],
    }


def test_manifest_round_trip(tmp_path):
    for p in ("a.rec", "b.rec"):
        (tmp_path / p).write_bytes(b"")
    man = manifest_from_dict(_manifest_doc(), root=tmp_path)
    write_manifest(tmp_path / "manifest.json", man)
    back = read_manifest(tmp_path / "manifest.json")
    assert back.digest() == man.digest()
    assert [s.id for _, _, s in back.sessions()] == ["s0", "s1"]


def test_manifest_missing_path(tmp_path):
    from echoauth.errors import DataError
    with pytest.raises(DataError):
        manifest_from_dict(_manifest_doc(), root=tmp_path)


def test_manifest_schema_violation():
    doc = _manifest_doc()
    del doc["users"][0]["days"][0]["sessions"][0]["duration"]
    with pytest.raises(FormatError):
        manifest_from_dict(doc, check_paths=False)
    with pytest.raises(FormatError):
        manifest_from_dict({"format": "other", "users": []}, check_paths=False)


def test_manifest_duplicate_session():
    doc = _manifest_doc(("a.rec", "a.rec"))
    doc["users"][0]["days"][0]["sessions"][1]["id"] = "s0"
    with pytest.raises(LeakageError):
        manifest_from_dict(doc, check_paths=False)


def test_unique_sessions_helper():
    check_unique_sessions(["a", "b"])
    with pytest.raises(LeakageError):
        check_unique_sessions(["a", "b", "a"])


def test_invalid_json_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "m.json")


def test_digest_is_key_order_free():
    a = {"x": 1, "y": [1, 2]}
    b = json.loads('{"y": [1, 2], "x": 1}')
    assert digest_json(a) == digest_json(b)
    assert digest_json(a) == hashlib.sha256(b'{"x":1,"y":[1,2]}').hexdigest()
