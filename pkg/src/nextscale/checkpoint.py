"""Single-file binary checkpoint container.

Layout (little-endian):

    magic   4 bytes  b"AVAR"
    u32     format version (1)
    u64     train step
    str     rng algorithm, u64 seed, u64 stream, u64 counter
    str     config digest (hex)
    str     full canonical config text
    u32     buffer count, then records   (float64 payloads: codebook, codec)
    u32     parameter count, then records (float32 payloads)

A record is: str name, u8 dtype code (4 = f32, 8 = f64), u32 ndim,
u32 dims..., raw payload. Strings are u32 length + UTF-8 bytes. Any
truncation, bad magic, version or digest mismatch raises
CheckpointError; nothing is partially loaded.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVAR"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _w_str(fh, s: str) -> None:
    b = s.encode()
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _w_array(fh, name: str, arr: np.ndarray, dtype) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    _w_str(fh, name)
    fh.write(struct.pack("<B", 4 if dtype == np.float32 else 8))
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("corrupt checkpoint: truncated file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode()

    def array(self) -> tuple[str, np.ndarray]:
        name = self.string()
        code = self.u8()
        if code not in (4, 8):
            raise CheckpointError(f"corrupt checkpoint: unknown dtype code {code}")
        dtype = np.float32 if code == 4 else np.float64
        ndim = self.u32()
        if ndim > 8:
            raise CheckpointError(f"corrupt checkpoint: implausible ndim {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = self.take(count * dtype().itemsize)
        return name, np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save(
    path,
    step: int,
    rng_state: dict,
    digest: str,
    config_text: str,
    buffers: dict[str, np.ndarray],
    params: dict[str, np.ndarray],
) -> None:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<Q", step))
    _w_str(fh, rng_state["algorithm"])
    fh.write(struct.pack("<Q", rng_state["seed"]))
    fh.write(struct.pack("<Q", rng_state["stream"]))
    fh.write(struct.pack("<Q", rng_state["counter"]))
    _w_str(fh, digest)
    _w_str(fh, config_text)
    fh.write(struct.pack("<I", len(buffers)))
    for name in sorted(buffers):
        _w_array(fh, name, buffers[name], np.float64)
    fh.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        _w_array(fh, name, params[name], np.float32)
    Path(path).write_bytes(fh.getvalue())


def load(path, expected_digest: str | None = None) -> dict:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"not a checkpoint file: bad magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    step = r.u64()
    rng_state = {
        "algorithm": r.string(),
        "seed": r.u64(),
        "stream": r.u64(),
        "counter": r.u64(),
    }
    digest = r.string()
    config_text = r.string()
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(
            "config digest mismatch: checkpoint was produced under an incompatible configuration"
        )
    buffers = dict(r.array() for _ in range(r.u32()))
    params = dict(r.array() for _ in range(r.u32()))
    if r.pos != len(raw):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return {
        "step": step,
        "rng_state": rng_state,
        "digest": digest,
        "config_text": config_text,
        "buffers": buffers,
        "params": params,
    }
