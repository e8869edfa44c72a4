"""Binary weight checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"SPWT"
    version u32      1
    count   u32      number of tensors
    then per tensor, in the order given:
      name_len u32, name utf-8 bytes
      rank     u32
      dims     rank * i64
      data     prod(dims) * f32

Float32 payloads round-trip bit exactly. Ordering is preserved so a
checkpoint written from `named_parameters()` reloads positionally stable.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SPWT"
VERSION = 1


def save_weights(path, tensors):
    """tensors: mapping name -> ndarray (or Tensor-like with .data)."""
    items = []
    for name, arr in tensors.items():
        a = np.asarray(getattr(arr, "data", arr), dtype=np.float32, order="C")
        items.append((name, a))  # asarray keeps rank 0 (ascontiguousarray would not)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, a in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}q", *a.shape))
            f.write(a.tobytes())


def load_weights(path):
    """Returns an OrderedDict name -> float32 ndarray."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}q", blob, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(np.float32, copy=True)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out
