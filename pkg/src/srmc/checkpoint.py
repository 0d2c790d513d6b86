"""Versioned binary snapshots of training state.

Layout (all little-endian): magic "SRMC", u32 format version, the net
descriptor string, temperature, a dtype code, the iteration counters and
root seed, then per parameter its name, shape, and three 64-bit float
blobs (value, Adam first moment, Adam second moment), and a CRC32 of
everything before it.  Streams are re-derived from (seed, iteration), so
these fields are the whole of the resumable state: a loaded run continues
bit-exactly.  float32 nets round-trip exactly through the f64 blobs.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .nets import EnergyNet, conv_energy_net, expfam_energy_net
from .training import TrainState

MAGIC = b"SRMC"
FORMAT_VERSION = 1

_DTYPE_CODES = {4: np.float32, 8: np.float64}


class CheckpointError(RuntimeError):
    pass


def net_from_descriptor(descriptor: str, temperature: float, dtype) -> EnergyNet:
    """Rebuild an untrained net of the right shape from its descriptor."""
    parts = descriptor.split(":")
    if parts[0] == "conv" and len(parts) == 4:
        size, chans, n_f = (int(p) for p in parts[1:])
        return conv_energy_net(input_size=size, in_channels=chans, n_f=n_f,
                               seed=0, temperature=temperature, dtype=dtype)
    if parts[0] == "expfam" and len(parts) >= 2:
        return expfam_energy_net(":".join(parts[1:]), temperature=temperature,
                                 dtype=dtype)
    raise CheckpointError(f"unknown net descriptor {descriptor!r}")


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, state: TrainState, seed: int) -> None:
    """Write state atomically; same state always produces the same bytes."""
    net = state.net
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    desc = net.descriptor().encode()
    out += struct.pack("<H", len(desc)) + desc
    out += struct.pack("<dB", net.temperature, net.dtype.itemsize)
    out += struct.pack("<QQQ", state.t, state.adam_t, seed)
    out += struct.pack("<I", len(net.params))
    for name, p in net.params.items():
        enc = name.encode()
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<B", p.data.ndim)
        out += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        out += _blob(p.data)
        out += _blob(state.adam_m[name])
        out += _blob(state.adam_v[name])
    out += struct.pack("<I", zlib.crc32(out))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[TrainState, int]:
    """Read a checkpoint back into a fresh TrainState; returns (state, seed)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    cur = _Cursor(raw[:-4])
    cur.take(4)
    (version,) = cur.unpack("<I")
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than "
                              f"supported version {FORMAT_VERSION}")
    (dlen,) = cur.unpack("<H")
    desc = cur.take(dlen).decode()
    temperature, code = cur.unpack("<dB")
    if code not in _DTYPE_CODES:
        raise CheckpointError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    t, adam_t, seed = cur.unpack("<QQQ")
    (n_params,) = cur.unpack("<I")

    net = net_from_descriptor(desc, temperature, dtype)
    if n_params != len(net.params):
        raise CheckpointError(f"{path}: {n_params} parameter records but descriptor "
                              f"{desc!r} has {len(net.params)}")
    adam_m, adam_v = {}, {}
    for _ in range(n_params):
        (nlen,) = cur.unpack("<H")
        name = cur.take(nlen).decode()
        if name not in net.params:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        p = net.params[name]
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack(f"<{ndim}Q")
        if shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {shape}, "
                                  f"expected {p.data.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        def read_arr():
            arr = np.frombuffer(cur.take(nbytes), dtype="<f8").reshape(shape)
            return arr.astype(dtype)
        p.data[...] = read_arr()
        adam_m[name] = read_arr()
        adam_v[name] = read_arr()
    if cur.off != len(cur.buf):
        raise CheckpointError(f"{path}: {len(cur.buf) - cur.off} trailing bytes")
    state = TrainState(net=net, adam_m=adam_m, adam_v=adam_v, t=t, adam_t=adam_t)
    return state, seed


def load_net(path) -> EnergyNet:
    """Just the net, for sampling and generator workloads."""
    state, _ = load_checkpoint(path)
    return state.net
