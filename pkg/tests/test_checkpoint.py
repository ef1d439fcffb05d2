import struct

import numpy as np
import pytest

from uilab.checkpoint import decode, encode, read_checkpoint, write_checkpoint
from uilab.errors import CheckpointError
from uilab.model import ArchSpec, init_params


def test_roundtrip_bitwise(tmp_path, tiny_theta):
    p = tmp_path / "m.ckpt"
    write_checkpoint(p, tiny_theta)
    back = read_checkpoint(p, tiny_theta.arch.input_dims)
    assert back.values.tobytes() == tiny_theta.values.tobytes()
    assert back.arch == tiny_theta.arch


def test_header_layout(tiny_theta):
    blob = encode(tiny_theta)
    assert blob[:4] == bytes([0x55, 0x53, 0x48, 0x44])
    version, layers = struct.unpack_from("<II", blob, 4)
    assert (version, layers) == (1, 3)
    assert struct.unpack_from("<II", blob, 12) == (9, 5)
    off = 12 + 8 * 3
    assert blob[off:off + 2] == b"\x00\x00"
    assert np.array_equal(np.frombuffer(blob[off + 2:], "<f8"), tiny_theta.values)


def test_relu_and_default_dims():
    theta = init_params(ArchSpec((2, 3, 1), (4,), 2, "relu"), 0)
    back = decode(encode(theta))
    assert back.arch.activation == "relu" and back.arch.input_dims == (1, 6, 1)


def test_truncated(tiny_theta):
    blob = encode(tiny_theta)
    for cut in (3, 10, 20, len(blob) - 1):
        with pytest.raises(CheckpointError, match="corrupt checkpoint"):
            decode(blob[:cut])


def test_bad_magic(tiny_theta):
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        decode(b"XXXX" + encode(tiny_theta)[4:])


def test_version_2(tiny_theta):
    with pytest.raises(CheckpointError, match=r"version 2.*version 1"):
        decode(encode(tiny_theta, version=2))


def test_dims_mismatch(tiny_theta):
    with pytest.raises(CheckpointError):
        decode(encode(tiny_theta), (4, 4, 1))
