"""Binary checkpoint format.

Layout, little-endian throughout::

    b"USHD"              magic
    u32 version          currently 1
    u32 layer_count
    layer_count x (u32 fan_in, u32 fan_out)
    u8  activation       0 = tanh, 1 = relu
    u8  dtype            0 = float64
    float64[n]           parameters in model flatten order

The format stores fan-in only, so the image shape is supplied by the caller
when reading (default: one row of pixels).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from uilab.errors import CheckpointError
from uilab.model import ACTIVATIONS, ArchSpec, ParamVector

MAGIC = b"USHD"
VERSION = 1
DTYPE_F64 = 0


def encode(theta: ParamVector, version: int = VERSION) -> bytes:
    arch = theta.arch
    sizes = arch.layer_sizes
    head = [MAGIC, struct.pack("<II", version, len(sizes))]
    head += [struct.pack("<II", fi, fo) for fi, fo in sizes]
    head.append(struct.pack("<BB", ACTIVATIONS.index(arch.activation), DTYPE_F64))
    return b"".join(head) + theta.values.astype("<f8").tobytes()


def decode(blob: bytes, input_dims=None) -> ParamVector:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not readable by version {VERSION} reader")
    off = 12
    if count < 1 or len(blob) < off + 8 * count + 2:
        raise CheckpointError("corrupt checkpoint: truncated header")
    sizes = [struct.unpack_from("<II", blob, off + 8 * i) for i in range(count)]
    off += 8 * count
    act, dtype = struct.unpack_from("<BB", blob, off)
    off += 2
    if act >= len(ACTIVATIONS) or dtype != DTYPE_F64:
        raise CheckpointError(f"corrupt checkpoint: activation {act} / dtype {dtype}")
    for (_, fo), (fi, _) in zip(sizes[:-1], sizes[1:]):
        if fo != fi:
            raise CheckpointError("corrupt checkpoint: layer sizes do not chain")
    fan_in = sizes[0][0]
    if input_dims is None:
        input_dims = (1, fan_in, 1)
    try:
        arch = ArchSpec(tuple(input_dims), tuple(fo for _, fo in sizes[:-1]), sizes[-1][1], ACTIVATIONS[act])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if arch.input_size != fan_in:
        raise CheckpointError(f"input dims {input_dims} do not match checkpoint fan-in {fan_in}")
    payload = blob[off:]
    if len(payload) != 8 * arch.num_params:
        raise CheckpointError(
            f"corrupt checkpoint: payload has {len(payload)} bytes, expected {8 * arch.num_params}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParamVector(values, arch)


def write_checkpoint(path, theta: ParamVector) -> None:
    Path(path).write_bytes(encode(theta))


def read_checkpoint(path, input_dims=None) -> ParamVector:
    return decode(Path(path).read_bytes(), input_dims)
