"""File formats: 16-bit PGM and PFM depth maps with JSON sidecars, PLY clouds, key=value configs."""

from __future__ import annotations

import configparser
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .forward import DepthImage, NoiseModel, QuantizerParams
from .metrics import PointCloud

__all__ = [
    "FormatError",
    "atomic_write",
    "read_depth",
    "write_depth",
    "read_ply",
    "write_ply",
    "read_config",
    "DEFAULT_DEPTH_SCALE",
]

# PGM16 stores round(depth * scale); 0.1 mm steps cover depths up to 6.5 m
DEFAULT_DEPTH_SCALE = 10.0


class FormatError(ValueError):
    """Malformed file content (as opposed to a missing or unreadable file)."""


def atomic_write(path, data: bytes):
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _jsonable(v):
    if isinstance(v, QuantizerParams):
        return {"theta": v.theta, "rho": v.rho, "x_min": v.x_min, "x_max": v.x_max, "phi": v.phi, "bits": v.bits}
    if isinstance(v, NoiseModel):
        return {"alpha": v.alpha, "mu": v.mu, "kappa": v.kappa, "family": v.family.value}
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _pfm_bytes(values):
    h, w = values.shape
    head = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM rows run bottom to top
    return head + np.ascontiguousarray(values[::-1], dtype="<f4").tobytes()


def _pgm_bytes(values, scale):
    h, w = values.shape
    q = np.round(values * scale)
    if q.max(initial=0) > 65535:
        raise ValueError(f"depth {values.max()} exceeds the 16-bit range at scale {scale}")
    head = f"P5\n{w} {h}\n65535\n".encode("ascii")
    return head + q.astype(">u2").tobytes()


def write_depth(path, img: DepthImage, fmt: str | None = None, depth_scale: float = DEFAULT_DEPTH_SCALE):
    """Write a depth map (missing pixels as 0) plus a ``.json`` sidecar with camera and provenance."""
    path = Path(path)
    fmt = fmt or ("pfm" if path.suffix.lower() == ".pfm" else "pgm16")
    values = np.where(img.mask, img.values, 0.0)
    if fmt == "pfm":
        data = _pfm_bytes(values)
    elif fmt == "pgm16":
        data = _pgm_bytes(values, depth_scale)
    else:
        raise ValueError(f"unknown depth format {fmt!r}")
    meta = {"focal": img.focal, "baseline": img.baseline, "cx": img.cx, "cy": img.cy, "format": fmt}
    if fmt == "pgm16":
        meta["depth_scale"] = depth_scale
    meta["meta"] = img.meta
    atomic_write(path, data)
    side = json.dumps(meta, sort_keys=True, indent=1, default=_jsonable) + "\n"
    atomic_write(_sidecar(path), side.encode("utf-8"))


def _header_tokens(buf, count):
    """First ``count`` whitespace-separated header tokens and the offset after them."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise FormatError("truncated header")
        tokens.append(m.group(2).decode("ascii"))
        pos = m.end()
    return tokens, pos + 1  # one whitespace byte ends the header


def read_depth(path, focal: float | None = None, baseline: float | None = None) -> DepthImage:
    """Read a PGM16 or PFM depth map; camera parameters come from the sidecar unless given."""
    path = Path(path)
    buf = path.read_bytes()
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if buf[:2] == b"P5":
        (_, w, h, maxval), off = _header_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u2" if maxval > 255 else "u1"
        raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off)
        values = raw.reshape(h, w).astype(float) / float(meta.get("depth_scale", DEFAULT_DEPTH_SCALE))
    elif buf[:2] == b"Pf":
        (_, w, h, scale), off = _header_tokens(buf, 4)
        w, h, scale = int(w), int(h), float(scale)
        raw = np.frombuffer(buf, dtype="<f4" if scale < 0 else ">f4", count=w * h, offset=off)
        values = raw.reshape(h, w)[::-1].astype(float)
    else:
        raise FormatError(f"{path}: not a PGM16 (P5) or PFM (Pf) file")
    if values.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    focal = meta.get("focal") if focal is None else focal
    baseline = meta.get("baseline") if baseline is None else baseline
    if focal is None or baseline is None:
        raise FormatError(f"{path}: focal length and baseline missing (no sidecar)")
    mask = values > 0
    return DepthImage(values, mask, float(focal), float(baseline), meta.get("cx"), meta.get("cy"), dict(meta.get("meta", {})))


def write_ply(path, pc: PointCloud, binary: bool = False):
    """PLY with double-precision ``x y z`` and optional ``nx ny nz``."""
    cols = [pc.points] + ([pc.normals] if pc.normals is not None else [])
    data = np.concatenate(cols, axis=1) if cols else np.empty((0, 3))
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if pc.normals is not None else [])
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(pc)}"]
    head += [f"property double {n}" for n in names]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        out += np.ascontiguousarray(data, dtype="<f8").tobytes()
    else:
        out += "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data).encode("ascii")
    atomic_write(path, out)


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
    "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}


def read_ply(path) -> PointCloud:
    """Read vertex positions (and normals if present) from ASCII or binary PLY."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = buf[:end].decode("ascii").splitlines()
    body = buf[buf.index(b"\n", end) + 1 :]
    fmt, n, props, in_vertex = None, 0, [], False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
            elif props or n:
                # only a leading vertex element is supported
                break
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list properties in vertex element are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:n]
        arr = np.array([[float(t) for t in r.split()[: len(props)]] for r in rows]).reshape(n, len(props))
        col = {k: arr[:, i] for i, k in enumerate(names)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(k, order + t) for k, t in props])
        rec = np.frombuffer(body, dtype=dt, count=n)
        col = {k: rec[k].astype(float) for k in names}
    else:
        raise FormatError(f"{path}: unknown PLY format {fmt!r}")
    try:
        pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    except KeyError as exc:
        raise FormatError(f"{path}: vertex element lacks {exc}") from None
    normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1) if {"nx", "ny", "nz"} <= col.keys() else None
    return PointCloud(pts, normals)


def read_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into a dict of strings."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    return dict(cp["config"])
