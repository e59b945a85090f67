"""RTEN tensor container and PGM/PPM image files.

RTEN layout (all little-endian)::

    offset 0   4 bytes  magic b"RTEN"
    offset 4   u16      version (1)
    offset 6   u8       dtype code: 0 f32, 1 f64, 2 c64 (re/im f32 pairs), 3 u8
    offset 7   u8       ndim
    offset 8   ndim*u64 dims
    then       payload, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8"), 3: np.dtype("u1")}


class RtenError(ValueError):
    pass


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    for code, candidate in DTYPES.items():
        if dt.kind == candidate.kind and dt.itemsize == candidate.itemsize:
            return code
    raise RtenError(f"dtype {dt} has no RTEN code")


def header_bytes(shape, dtype) -> bytes:
    return struct.pack(f"<4sHBB{len(shape)}Q", MAGIC, VERSION, dtype_code(dtype), len(shape), *shape)


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = dtype_code(arr.dtype)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return header_bytes(arr.shape, arr.dtype) + payload


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise RtenError(f"{source}: header truncated at offset {len(buf)}, need 8 bytes")
    magic, version, code, ndim = struct.unpack_from("<4sHBB", buf, 0)
    if magic != MAGIC:
        raise RtenError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise RtenError(f"{source}: unsupported version {version} at offset 4")
    if code not in DTYPES:
        raise RtenError(f"{source}: unknown dtype code {code} at offset 6")
    dims_end = 8 + 8 * ndim
    if len(buf) < dims_end:
        raise RtenError(f"{source}: dims truncated, need {dims_end} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 8)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    actual = len(buf) - dims_end
    if actual != expected:
        raise RtenError(f"{source}: payload at offset {dims_end} should be {expected} bytes, "
                        f"got {actual}")
    arr = np.frombuffer(buf, dtype=dt, offset=dims_end).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def read(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- images

def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    data = np.clip(img, 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an [H, W, 3] array")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.astype(np.uint8).tobytes())


def _read_netpbm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} pixel bytes, got {data.size}")
    shape = (h, w) if channels == 1 else (h, w, channels)
    return data.reshape(shape).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)
