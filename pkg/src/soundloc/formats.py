"""File codecs for exported artifacts: PGM masks, PPM images, raw audio.

Masks are 8-bit binary PGM ("P5", maxval 255, pixel = round(255 * m)).
Images are 8-bit binary PPM ("P6").  Audio clips are 32-bit IEEE-754
little-endian samples behind an 8-byte header: magic ``SPLA`` plus a u32
sample count.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

AUDIO_MAGIC = b"SPLA"


class FormatError(Exception):
    pass


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Write a [0, 1] mask as an 8-bit binary PGM."""
    if mask.ndim != 2:
        raise FormatError(f"PGM expects a 2-D array, got shape {mask.shape}")
    vals = np.rint(255.0 * np.clip(mask, 0.0, 1.0)).astype(np.uint8)
    h, w = vals.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + vals.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary PGM back to a [0, 1] float array."""
    raw = Path(path).read_bytes()
    fields, pos = _read_header(raw, b"P5", 3)
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return pix.astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] HxWx3 image as an 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM expects HxWx3, got shape {image.shape}")
    vals = np.rint(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    h, w, _ = vals.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + vals.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = _read_header(raw, b"P6", 3)
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def _read_header(raw: bytes, magic: bytes, n_fields: int) -> tuple[list[int], int]:
    if raw[:2] != magic:
        raise FormatError(f"bad magic {raw[:2]!r}, expected {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < n_fields:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    return fields, pos + 1  # single whitespace byte after maxval


def write_audio(path: str | Path, samples: np.ndarray) -> None:
    """Write a 1-D clip as float32 little-endian with the SPLA header."""
    if samples.ndim != 1:
        raise FormatError(f"audio expects a 1-D array, got shape {samples.shape}")
    data = np.ascontiguousarray(samples, dtype="<f4")
    header = AUDIO_MAGIC + np.uint32(data.size).tobytes()
    Path(path).write_bytes(header + data.tobytes())


def read_audio(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != AUDIO_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    return np.frombuffer(raw, dtype="<f4", count=count, offset=8).astype(np.float64)
