"""Grids, seeded random streams and the binary ``HC3L`` container.

A grid is simply a C-contiguous ``numpy.ndarray``; compute happens in float64
(or float32 during training) and storage on disk is float32.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"HC3L"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be nonempty with all dims >= 1, got {shape}")
    return shape


class RngStream:
    """Counter-based deterministic random stream (Philox) with Box-Muller normals.

    The same seed and the same sequence of calls always produce the same
    numbers, on any platform.
    """

    def __init__(self, seed: int, *, _spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))

    def child(self, *tags: int) -> "RngStream":
        """Independent stream derived from this seed and integer tags (not from the current state)."""
        return RngStream(self.seed, _spawn_key=self.spawn_key + tuple(int(t) for t in tags))

    @property
    def counter(self) -> int:
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, shape) -> np.ndarray:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)


def sample_gaussian(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal grid of the given shape."""
    return rng.normal(shape)


_blas = None


def matmul(a, b) -> np.ndarray:
    """``a @ b`` with results independent of the BLAS thread count.

    OpenBLAS changes its summation order with the number of threads (matrix
    vector products, and matrix products with a long inner dimension), so
    every product runs with BLAS pinned to one thread.
    """
    global _blas
    if _blas is None:
        from threadpoolctl import ThreadpoolController

        _blas = ThreadpoolController()
    with _blas.limit(limits=1, user_api="blas"):
        return np.matmul(a, b)


def _validate_name(name) -> bytes:
    if not isinstance(name, str) or not name:
        raise ValueError("grid names must be nonempty strings")
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {name[:40]}...")
    return raw


def dumps_container(grids) -> bytes:
    """Serialize named grids; ``grids`` is a mapping or a sequence of (name, array) pairs."""
    items = list(grids.items()) if isinstance(grids, Mapping) else list(grids)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate grid names: {dup}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        raw = _validate_name(name)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise ValueError("rank > 255 not supported")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_container(data: bytes) -> dict[str, np.ndarray]:
    """Inverse of :func:`dumps_container`; arrays come back as float64."""
    mv = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(mv):
            raise FormatError(f"truncated file while reading {what}", pos)
        out = mv[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic bytes, expected b'HC3L'", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate entry {name!r}", start)
        dtype_pos = pos
        dtype_code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype_code not in _DTYPES:
            raise FormatError(f"unknown dtype code {dtype_code}", dtype_pos)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = _DTYPES[dtype_code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(dims)
    if pos != len(mv):
        raise FormatError("trailing bytes after last entry", pos)
    return out


def save_container(path, grids) -> None:
    """Write named grids to ``path`` atomically."""
    data = dumps_container(grids)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_container(path) -> dict[str, np.ndarray]:
    return loads_container(Path(path).read_bytes())


def checksum(grids: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names and float32 payloads, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(grids):
        h.update(name.encode())
        h.update(np.ascontiguousarray(grids[name], dtype="<f4").tobytes())
    return h.hexdigest()
