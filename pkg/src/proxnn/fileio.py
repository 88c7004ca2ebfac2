"""Bit-exact file formats shared by every module.

* PNG: minimal codec over ``zlib`` for 8/16-bit grayscale and RGB,
  deterministic output (fixed chunk layout, filter 0, no timestamps).
  Reading handles all five scanline filters; palette/alpha/interlace are
  rejected as out of scope.
* PGM/PPM: binary P5/P6 with maxval 255 or 65535 (16-bit big-endian).
* Weights container: magic line, one-line canonical JSON manifest, then
  concatenated little-endian float32 blobs at declared offsets.
* Trace CSV: decimal with 17 significant digits.

All whole-file writes go through a write-temp-then-rename step so readers
never observe partial files.
"""

import json
import os
import struct
import tempfile
import zlib

import numpy as np

__all__ = [
    "FormatError",
    "atomic_write_bytes",
    "write_png",
    "read_png",
    "write_pnm",
    "read_pnm",
    "save_image",
    "load_image",
    "write_trace_csv",
    "write_tensor_container",
    "read_tensor_container",
    "MAGIC",
]

MAGIC = b"PNNW1"


class FormatError(ValueError):
    """Raised on malformed or unsupported file contents."""


def atomic_write_bytes(path, data):
    """Write the whole file via a same-directory temp file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- value <-> integer sample mapping ---------------------------------------


def _to_samples(img, bits):
    """[0,1] floats to integer samples; (C,H,W) -> (H,W) or (H,W,3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise FormatError(f"only 1- or 3-channel images can be written, got {img.shape}")
    peak = (1 << bits) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(np.uint16 if bits == 16 else np.uint8)
    return q[0] if img.shape[0] == 1 else np.moveaxis(q, 0, -1)


def _from_samples(q):
    """Integer samples back to (C, H, W) floats in [0, 1]."""
    peak = float(np.iinfo(q.dtype).max)
    arr = q.astype(np.float64) / peak
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


# --- PNG ---------------------------------------------------------------------


def _png_chunk(tag, payload):
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, samples, bits):
    """Write grayscale (H, W) or RGB (H, W, 3) integer samples as PNG."""
    if bits not in (8, 16):
        raise FormatError(f"bit depth must be 8 or 16, got {bits}")
    q = np.asarray(samples)
    if q.ndim == 2:
        color_type, channels = 0, 1
    elif q.ndim == 3 and q.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise FormatError(f"samples must be (H, W) or (H, W, 3), got {q.shape}")
    H, W = q.shape[:2]
    dtype = ">u2" if bits == 16 else "u1"
    raw = q.astype(dtype).tobytes()
    stride = W * channels * (bits // 8)
    scanlines = b"".join(
        b"\x00" + raw[y * stride : (y + 1) * stride] for y in range(H)
    )
    ihdr = struct.pack(">IIBBBBB", W, H, bits, color_type, 0, 0, 0)
    blob = (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(scanlines, 6))
        + _png_chunk(b"IEND", b"")
    )
    atomic_write_bytes(path, blob)


def _unfilter(data, H, stride, bpp):
    out = bytearray(H * stride)
    pos = 0
    prev = bytearray(stride)
    for y in range(H):
        ftype = data[pos]
        line = bytearray(data[pos + 1 : pos + 1 + stride])
        pos += 1 + stride
        if ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((a + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise FormatError(f"unknown PNG filter type {ftype}")
        out[y * stride : (y + 1) * stride] = line
        prev = line
    return bytes(out)


def read_png(path):
    """Read a PNG into integer samples; returns (array, bits)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = b""
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError(f"{path}: truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) != length:
            raise FormatError(f"{path}: truncated chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError(f"{path}: missing IHDR")
    W, H, bits, color_type, comp, filt, interlace = ihdr
    if bits not in (8, 16) or color_type not in (0, 2):
        raise FormatError(
            f"{path}: unsupported PNG (bit depth {bits}, color type {color_type}); "
            "only 8/16-bit grayscale and RGB are handled"
        )
    if comp != 0 or filt != 0 or interlace != 0:
        raise FormatError(f"{path}: unsupported compression/filter/interlace settings")
    channels = 1 if color_type == 0 else 3
    bpp = channels * bits // 8
    stride = W * bpp
    data = zlib.decompress(idat)
    if len(data) != H * (stride + 1):
        raise FormatError(f"{path}: pixel data length mismatch")
    raw = _unfilter(data, H, stride, bpp)
    dtype = ">u2" if bits == 16 else "u1"
    q = np.frombuffer(raw, dtype=dtype).reshape(
        (H, W) if channels == 1 else (H, W, 3)
    )
    return np.ascontiguousarray(q.astype(np.uint16 if bits == 16 else np.uint8)), bits


# --- PGM / PPM ----------------------------------------------------------------


def write_pnm(path, samples, bits):
    """Binary P5 (gray) / P6 (RGB); 16-bit samples are big-endian."""
    if bits not in (8, 16):
        raise FormatError(f"bit depth must be 8 or 16, got {bits}")
    q = np.asarray(samples)
    if q.ndim == 2:
        tag = b"P5"
    elif q.ndim == 3 and q.shape[2] == 3:
        tag = b"P6"
    else:
        raise FormatError(f"samples must be (H, W) or (H, W, 3), got {q.shape}")
    H, W = q.shape[:2]
    maxval = (1 << bits) - 1
    header = tag + f"\n{W} {H}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2" if bits == 16 else "u1").tobytes()
    atomic_write_bytes(path, header + body)


def read_pnm(path):
    with open(path, "rb") as f:
        blob = f.read()
    tag = blob[:2]
    if tag not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary P5/P6 supported, got {tag!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    W, H, maxval = fields
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: maxval must be 255 or 65535, got {maxval}")
    channels = 1 if tag == b"P5" else 3
    dtype = ">u2" if maxval == 65535 else "u1"
    count = W * H * channels
    q = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if q.size != count:
        raise FormatError(f"{path}: truncated pixel data")
    q = q.reshape((H, W) if channels == 1 else (H, W, 3))
    bits = 16 if maxval == 65535 else 8
    return np.ascontiguousarray(q.astype(np.uint16 if bits == 16 else np.uint8)), bits


# --- unified image entry points ------------------------------------------------


def save_image(path, img, bits=8):
    """Write a (C, H, W) [0,1] image; format chosen by extension."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    q = _to_samples(img, bits)
    if ext == ".png":
        write_png(path, q, bits)
    elif ext in (".pgm", ".ppm"):
        write_pnm(path, q, bits)
    else:
        raise FormatError(f"unsupported image extension {ext!r}")


def load_image(path):
    """Read PNG/PGM/PPM into a (C, H, W) [0,1] image; returns (img, bits)."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".png":
        q, bits = read_png(path)
    elif ext in (".pgm", ".ppm"):
        q, bits = read_pnm(path)
    else:
        raise FormatError(f"unsupported image extension {ext!r}")
    return _from_samples(q), bits


# --- trace CSV ------------------------------------------------------------------


def _csv_cell(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_trace_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# --- tensor container -------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_tensor_container(path, meta, tensors):
    """Write ``MAGIC`` + manifest line + float32 payload.

    ``tensors`` is an ordered list of (name, float array); the manifest
    records each tensor's name, shape, byte offset, and byte length.
    """
    directory = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = dict(meta)
    manifest["tensors"] = directory
    blob = MAGIC + b"\n" + canonical_json(manifest).encode("utf-8") + b"\n" + b"".join(blobs)
    atomic_write_bytes(path, blob)


def read_tensor_container(path):
    """Read back (meta, {name: float64 array}); validates the directory."""
    with open(path, "rb") as f:
        blob = f.read()
    head = MAGIC + b"\n"
    if not blob.startswith(head):
        raise FormatError(f"{path}: bad magic, expected {MAGIC.decode()} container")
    nl = blob.find(b"\n", len(head))
    if nl < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(blob[len(head) : nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed manifest ({e})") from None
    payload = blob[nl + 1 :]
    tensors = {}
    prev_end = 0
    directory = manifest.get("tensors", [])
    for entry in directory:
        name, shape = entry["name"], tuple(entry["shape"])
        offset, length = entry["offset"], entry["length"]
        if offset != prev_end:
            raise FormatError(f"{path}: tensor {name!r} offset {offset} is not contiguous")
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected:
            raise FormatError(f"{path}: tensor {name!r} length {length} != shape {shape}")
        raw = payload[offset : offset + length]
        if len(raw) != length:
            raise FormatError(f"{path}: tensor {name!r} payload truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        prev_end = offset + length
    if prev_end != len(payload):
        raise FormatError(
            f"{path}: payload length {len(payload)} != directory total {prev_end}"
        )
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return meta, tensors
