"""Splat .ply interchange (binary little endian, de-facto 3DGS layout).

Vertex properties, in order: x y z, nx ny nz (zeros), f_dc_0..2,
f_rest_0..(3(M-1)-1) channel-major, opacity (logit), scale_0..2 (log),
rot_0..3 (w,x,y,z). Floats round-trip bit exactly.
"""

from __future__ import annotations

import numpy as np

from .model import SplatScene


class PlyParseError(ValueError):
    """Malformed header; message carries the byte offset."""


class PlyFormatError(ValueError):
    """Structurally valid .ply that lacks a required splat property."""


_PLY_TO_NUMPY = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def _scene_fields(m):
    """Property names for a scene with m sh coefficients per channel."""
    rest = 3 * (m - 1)
    return (["x", "y", "z", "nx", "ny", "nz"]
            + [f"f_dc_{i}" for i in range(3)]
            + [f"f_rest_{i}" for i in range(rest)]
            + ["opacity"]
            + [f"scale_{i}" for i in range(3)]
            + [f"rot_{i}" for i in range(4)])


def save_ply(scene, path):
    m = scene.sh.shape[-1]
    names = _scene_fields(m)
    dtype = np.dtype([(n, "<f4") for n in names])
    n = len(scene)
    rec = np.zeros(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = scene.positions.T
    for i in range(3):
        rec[f"f_dc_{i}"] = scene.sh[:, i, 0]
    rest = scene.sh[:, :, 1:].reshape(n, 3 * (m - 1))  # channel-major: (ch, coeff)
    for i in range(rest.shape[1]):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = scene.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path):
    with open(path, "rb") as f:
        blob = f.read()
    names, dtype, count, data_off = _parse_header(blob)
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=data_off)

    have = set(names)
    rest_count = sum(1 for n in names if n.startswith("f_rest_"))
    if rest_count % 3 != 0:
        raise PlyFormatError(f"f_rest_* count {rest_count} not divisible by 3")
    m = rest_count // 3 + 1
    deg = int(np.sqrt(m)) - 1
    if (deg + 1) ** 2 != m:
        raise PlyFormatError(f"{rest_count} f_rest_* properties do not complete a degree")
    for need in _scene_fields(m):
        if need.startswith(("nx", "ny", "nz")):
            continue  # normals are decorative
        if need not in have:
            raise PlyFormatError(f"missing required property: {need}")

    n = count
    sh = np.zeros((n, 3, m), dtype=np.float32)
    for i in range(3):
        sh[:, i, 0] = rec[f"f_dc_{i}"]
    for i in range(rest_count):
        sh[:, i // (m - 1), 1 + i % (m - 1)] = rec[f"f_rest_{i}"]
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    log_scales = np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1)
    rotations = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1)
    return SplatScene(positions, log_scales, rotations,
                      np.asarray(rec["opacity"]), sh)


def _parse_header(blob):
    """Returns (property names, structured dtype, vertex count, data offset)."""
    end_tag = b"end_header\n"
    end = blob.find(end_tag)
    if not blob.startswith(b"ply"):
        raise PlyParseError("not a ply file (byte 0)")
    if end < 0:
        raise PlyParseError(f"no end_header within {len(blob)} bytes (byte 0)")
    data_off = end + len(end_tag)
    names, fields = [], []
    count = None
    in_vertex = False
    offset = 4
    for raw in blob[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        toks = line.split()
        if not toks or toks[0] in ("ply", "comment"):
            offset += len(raw) + 1
            continue
        if toks[0] == "format":
            if toks[1] != "binary_little_endian":
                raise PlyParseError(f"unsupported format {toks[1]!r} (byte {offset})")
        elif toks[0] == "element":
            in_vertex = toks[1] == "vertex"
            if in_vertex:
                try:
                    count = int(toks[2])
                except (IndexError, ValueError):
                    raise PlyParseError(f"bad element line (byte {offset})") from None
        elif toks[0] == "property" and in_vertex:
            if len(toks) != 3 or toks[1] not in _PLY_TO_NUMPY:
                raise PlyParseError(f"unsupported property line {line!r} (byte {offset})")
            names.append(toks[2])
            fields.append((toks[2], _PLY_TO_NUMPY[toks[1]]))
        offset += len(raw) + 1
    if count is None:
        raise PlyParseError(f"no vertex element (byte {end})")
    dtype = np.dtype(fields)
    need = data_off + count * dtype.itemsize
    if len(blob) < need:
        raise PlyParseError(f"truncated payload: need {need} bytes, have {len(blob)} (byte {data_off})")
    return names, dtype, count, data_off
