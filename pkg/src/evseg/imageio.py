"""PGM and raw ``.f32`` readers/writers.

PGM follows the Netpbm convention (binary P5; 16-bit samples big-endian).
``.f32``: ASCII magic ``EVSEG1``, u32 ndim, u32 dims, float32 payload, all
little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

F32_MAGIC = b"EVSEG1"


class ImageFormatError(ValueError):
    pass


def write_pgm(path, arr: np.ndarray, maxval: int | None = None) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ImageFormatError(f"PGM needs a 2-D array, got {arr.shape}")
    if maxval is None:
        maxval = 255 if arr.max(initial=0) < 256 else 65535
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ImageFormatError(f"values outside [0, {maxval}]")
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(dtype).tobytes())


def _tokens(blob: bytes, count: int):
    out, pos = [], 0
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        out.append(blob[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    return read_pgm_with_maxval(path)[0]


def read_pgm_with_maxval(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM")
    try:
        (w, h, maxval), pos = _tokens(blob[2:], 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageFormatError(f"{path}: bad PGM header ({e})") from None
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    payload = blob[2 + pos:2 + pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def write_f32(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(F32_MAGIC)
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(F32_MAGIC):
        raise ImageFormatError(f"{path}: bad .f32 magic")
    try:
        pos = len(F32_MAGIC)
        (nd,) = struct.unpack_from("<I", blob, pos)
        dims = struct.unpack_from(f"<{nd}I", blob, pos + 4)
        pos += 4 + 4 * nd
        size = int(np.prod(dims))
        return np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise ImageFormatError(f"{path}: truncated .f32 ({e})") from None


def encode_unit16(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> 16-bit levels, round(65535 * v)."""
    return np.rint(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.int64)


def write_image_pgms(stem, image: np.ndarray) -> list[Path]:
    """One 16-bit PGM per channel: ``<stem>_c<k>.pgm``."""
    paths = []
    for k, chan in enumerate(image):
        p = Path(f"{stem}_c{k}.pgm")
        write_pgm(p, encode_unit16(chan), maxval=65535)
        paths.append(p)
    return paths


def read_image(path, channels: int = 3) -> np.ndarray:
    """Load a (C, H, W) float image from ``.f32``, a single PGM, or a ``_c0.pgm`` stem.

    A single gray PGM is replicated across ``channels``.
    """
    path = Path(path)
    if path.suffix == ".f32":
        img = read_f32(path)
        if img.ndim == 2:
            img = np.repeat(img[None], channels, axis=0)
        return img
    if path.suffix == ".pgm":
        if path.stem.endswith("_c0"):
            stem = str(path)[: -len("_c0.pgm")]
            chans = []
            for k in range(channels):
                p = Path(f"{stem}_c{k}.pgm")
                if not p.exists():
                    break
                chans.append(_unit(p))
            if len(chans) == channels:
                return np.stack(chans)
        gray = _unit(path)
        return np.repeat(gray[None], channels, axis=0)
    raise ImageFormatError(f"{path}: unsupported image format")


def _unit(path) -> np.ndarray:
    levels, maxval = read_pgm_with_maxval(path)
    return levels.astype(np.float64) / maxval
