"""Binary file formats.

KCT1 (tensor)::

    b"KCT1" | u8 rank | rank x u32 LE dims | prod(dims) x f64 LE, row-major

KCW1 (importance map)::

    b"KCW1" | u32 H | u32 W | u32 token_size | u32 H_t | u32 W_t
           | u32 len + UTF-8 image_id | u32 len + UTF-8 oracle_id
           | H_t*W_t x f64 LE

plus 8-bit binary PGM (P5) and PPM (P6).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

KCT_MAGIC = b"KCT1"
KCW_MAGIC = b"KCW1"
_F64 = np.dtype("<f8")


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise ValueError("rank too large for KCT1")
    head = KCT_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F64).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one KCT1 record at ``offset``; return the array and the end offset."""
    if buf[offset:offset + 4] != KCT_MAGIC:
        raise FormatError("bad KCT1 magic", offset)
    if len(buf) < offset + 5:
        raise FormatError("truncated KCT1 header", offset + 4)
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated KCT1 dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d == 0 for d in dims):
        raise FormatError(f"zero extent in KCT1 dims {dims}", offset + 5)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError(f"truncated KCT1 payload: need {8 * count} bytes, have {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype=_F64, count=count, offset=pos).astype(np.float64).reshape(dims)
    return arr, end


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after KCT1 payload", end)
    return arr


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int, what: str) -> tuple[str, int]:
    if len(buf) < pos + 4:
        raise FormatError(f"truncated {what} length", pos)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n:
        raise FormatError(f"truncated {what}", pos)
    try:
        return buf[pos:pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8", pos) from exc


def map_to_bytes(grid: np.ndarray, token_size: int, image_id: str, oracle_id: str) -> bytes:
    grid = np.asarray(grid, dtype=np.float64)
    ht, wt = grid.shape
    head = KCW_MAGIC + struct.pack("<5I", ht * token_size, wt * token_size, token_size, ht, wt)
    return head + _pack_str(image_id) + _pack_str(oracle_id) + grid.astype(_F64).tobytes()


def map_from_bytes(buf: bytes) -> tuple[np.ndarray, int, str, str]:
    """Return ``(grid, token_size, image_id, oracle_id)``."""
    if buf[:4] != KCW_MAGIC:
        raise FormatError("bad KCW1 magic", 0)
    if len(buf) < 24:
        raise FormatError("truncated KCW1 header", 4)
    h, w, t, ht, wt = struct.unpack_from("<5I", buf, 4)
    if t < 1 or ht * t != h or wt * t != w:
        raise FormatError(f"inconsistent KCW1 dims: image {h}x{w}, grid {ht}x{wt}, token {t}", 4)
    image_id, pos = _unpack_str(buf, 24, "image_id")
    oracle_id, pos = _unpack_str(buf, pos, "oracle_id")
    need = 8 * ht * wt
    if len(buf) - pos != need:
        raise FormatError(f"KCW1 payload is {len(buf) - pos} bytes, expected {need}", pos)
    grid = np.frombuffer(buf, dtype=_F64, offset=pos).astype(np.float64).reshape(ht, wt)
    return grid, t, image_id, oracle_id


# --- PGM / PPM -------------------------------------------------------------

def _read_header(buf: bytes, fields: int) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < fields:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError("truncated PNM header", pos)
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit P5 (H x W) or P6 (H x W x 3) file as uint8."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", 0)
    tokens, pos = _read_header(buf, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FormatError("non-numeric PNM header field", 2) from exc
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PNM supported, maxval={maxval}", 2)
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    if len(buf) - pos < need:
        raise FormatError(f"truncated PNM raster: need {need} bytes", pos)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM expects an H x W array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM expects an H x W x 3 array")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def to_u8(arr: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
