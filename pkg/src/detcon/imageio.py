"""Binary PPM (P6) reading/writing for float images in [0, 1]."""
from __future__ import annotations

import numpy as np

from .dtns import atomic_write_bytes


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
