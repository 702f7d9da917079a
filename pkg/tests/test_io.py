import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from unrolled_rpca import io as urtf_io
from unrolled_rpca.io import FormatError


def test_urtf_header_layout():
    buf = urtf_io.encode_urtf(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"URTF"
    assert struct.unpack("<III", buf[4:16]) == (1, 1, 2)
    assert struct.unpack("<2Q", buf[16:32]) == (2, 3)
    assert np.frombuffer(buf[32:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple)))
def test_urtf_round_trip_is_byte_identical(arr):
    buf = urtf_io.encode_urtf(arr)
    out, end = urtf_io.decode_urtf(buf)
    assert end == len(buf)
    assert out.shape == arr.shape
    assert urtf_io.encode_urtf(out) == buf


def test_urtf_file_round_trip(tmp_path, rng):
    arr = rng.standard_normal((3, 1, 4, 5)).astype(np.float32)
    p = tmp_path / "x.urtf"
    urtf_io.save_urtf(p, arr)
    first = p.read_bytes()
    urtf_io.save_urtf(p, urtf_io.load_urtf(p))
    assert p.read_bytes() == first


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:8] + struct.pack("<I", 7) + b[12:], "dtype"),
        (lambda b: b[:-4], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:10], "truncated"),
    ],
)
def test_urtf_rejects_malformed(tmp_path, mutate, msg):
    p = tmp_path / "bad.urtf"
    p.write_bytes(mutate(urtf_io.encode_urtf(np.ones((2, 2), np.float32))))
    with pytest.raises(FormatError, match=msg):
        urtf_io.load_urtf(p)


def test_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        urtf_io.load_urtf(tmp_path / "nope.urtf")


def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    params = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32(0.5) * np.ones(())}
    meta = {"epoch": 3, "config": {"k": 2}}
    p = tmp_path / "m.ckpt"
    urtf_io.save_checkpoint(p, params, meta)
    loaded, meta2 = urtf_io.load_checkpoint(p)
    assert meta2 == meta
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
    urtf_io.save_checkpoint(tmp_path / "m2.ckpt", loaded, meta2)
    assert (tmp_path / "m2.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_manifest_is_one_json_line(rng):
    buf = urtf_io.encode_checkpoint({"w": np.ones(3, np.float32)}, {})
    head, _, body = buf.partition(b"\n")
    manifest = json.loads(head)
    assert manifest["params"][0] == {"name": "w", "shape": [3], "offset": 0}
    assert body[:4] == b"URTF"


def test_checkpoint_rejects_garbage():
    with pytest.raises(FormatError):
        urtf_io.decode_checkpoint(b"no newline")
    with pytest.raises(FormatError):
        urtf_io.decode_checkpoint(b"{not json}\n")
    with pytest.raises(FormatError):
        urtf_io.decode_checkpoint(b'{"format":"other","version":1}\n')


def test_pgm_export(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0], [-1.0, 0.2]])
    p = tmp_path / "f.pgm"
    urtf_io.write_pgm(p, img)
    buf = p.read_bytes()
    assert buf.startswith(b"P5 2 3 255\n")
    assert list(buf[len(b"P5 2 3 255\n"):]) == [0, 128, 255, 255, 0, 51]
    np.testing.assert_allclose(urtf_io.read_pgm(p), np.round(np.clip(img, 0, 1) * 255) / 255)
