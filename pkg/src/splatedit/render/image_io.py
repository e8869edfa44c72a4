"""Image export/import: 8-bit PNG for people, raw float32 dumps for tests."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

F32_MAGIC = b"SPF3"


def to_uint8(img):
    """[0,1] float image -> 8-bit with round-half-up quantization."""
    return np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def from_uint8(img):
    return np.asarray(img, dtype=np.float64) / 255.0


def save_png(img, path):
    arr = to_uint8(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_png(path):
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def png_bytes(img):
    import io
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_to_array(data):
    import io
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_f32(img, path):
    """Raw dump: magic, rank u32, dims i64 LE, float32 LE payload."""
    a = np.asarray(img, dtype="<f4")
    with open(path, "wb") as f:
        f.write(F32_MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}q", *a.shape))
        f.write(a.tobytes())


def load_f32(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != F32_MAGIC:
        raise ValueError(f"{path}: not a raw float32 image dump")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}q", blob, 8)
    off = 8 + 8 * rank
    return np.frombuffer(blob, dtype="<f4", count=int(np.prod(dims)),
                         offset=off).reshape(dims).copy()
