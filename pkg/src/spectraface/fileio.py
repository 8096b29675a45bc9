"""Image and map file I/O: PNG (8/16-bit, stdlib codec) and PFM float maps.

PNG is used for sRGB images and masks, PFM (portable float map, little
endian, scale -1.0) for float-valued parameter maps. Both round-trip
losslessly at their native precisions; PNG files produced elsewhere are
readable as long as they are non-interlaced and non-paletted (all filter
types are supported, alpha is dropped).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png(path: str | Path, image: np.ndarray, bit_depth: int = 16):
    """Write a [0, 1] float image (H x W grayscale or H x W x 3 RGB) as PNG."""
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        color_type = 0
        channels = 1
    elif image.ndim == 3 and image.shape[2] == 3:
        color_type = 2
        channels = 3
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    h, w = image.shape[:2]
    peak = (1 << bit_depth) - 1
    quant = np.round(np.clip(image, 0.0, 1.0) * peak).astype(">u2" if bit_depth == 16 else "u1")
    raw = bytearray()
    row_bytes = quant.reshape(h, w * channels).view(np.uint8).reshape(h, -1)
    for row in row_bytes:
        raw.append(0)  # filter type none
        raw.extend(row.tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    data = (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(bytes(raw), 9))
        + _chunk(b"IEND", b"")
    )
    Path(path).write_bytes(data)


def _unfilter(raw: bytes, h: int, w: int, channels: int, bit_depth: int) -> np.ndarray:
    bpp = channels * bit_depth // 8
    stride = w * bpp
    out = bytearray()
    prev = bytearray(stride)
    pos = 0
    for _ in range(h):
        ftype = raw[pos]
        pos += 1
        line = bytearray(raw[pos:pos + stride])
        pos += stride
        if ftype == 1:  # sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise ValueError(f"unsupported PNG filter type {ftype}")
        out.extend(line)
        prev = line
    arr = np.frombuffer(bytes(out), dtype=">u2" if bit_depth == 16 else "u1")
    return arr.reshape(h, w, channels)


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG into floats in [0, 1]; alpha channels are dropped."""
    data = Path(path).read_bytes()
    if data[:8] != PNG_SIGNATURE:
        raise ValueError(f"{path} is not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise ValueError(f"{path}: missing IHDR")
    w, h, bit_depth, color_type, _, _, interlace = ihdr
    if interlace:
        raise ValueError(f"{path}: interlaced PNG not supported")
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color_type)
    if channels is None or bit_depth not in (8, 16):
        raise ValueError(f"{path}: unsupported colour type {color_type}/{bit_depth}-bit")
    arr = _unfilter(zlib.decompress(bytes(idat)), h, w, channels, bit_depth)
    if color_type in (4, 6):  # strip alpha
        arr = arr[:, :, :-1]
    peak = (1 << bit_depth) - 1
    out = arr.astype(float) / peak
    return out[:, :, 0] if out.shape[2] == 1 else out


def load_mask(path: str | Path, threshold: int = 128) -> np.ndarray:
    """Grayscale PNG -> boolean mask (>= threshold/255 is foreground)."""
    img = read_png(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img >= threshold / 255.0


def write_pfm(path: str | Path, data: np.ndarray):
    """Write a float map: 'Pf' for H x W, 'PF' for H x W x 3; little endian,
    rows stored bottom-to-top per the PFM convention."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"unsupported map shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM float map as float32 (H x W or H x W x 3)."""
    with open(path, "rb") as f:
        def token():
            buf = b""
            while True:
                c = f.read(1)
                if not c:
                    raise ValueError(f"{path}: truncated PFM header")
                if c.isspace():
                    if buf:
                        return buf
                    continue
                buf += c

        magic = token()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"{path} is not a PFM file")
        channels = 3 if magic == b"PF" else 1
        w = int(token())
        h = int(token())
        scale = float(token())
        count = w * h * channels
        payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    arr = np.flipud(arr).astype(np.float32)
    return arr[:, :, 0] if channels == 1 else arr
