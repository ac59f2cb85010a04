"""Binary PPM (P6) image IO and PGM (P5) heatmap output.

Dependency-free formats chosen for bit-exact round trips: u8 -> f32 is a
divide by 255, the inverse rounds half up.
"""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_header(buf, magic):
    """Parse 'Pn <w> <h> <maxval>' allowing comments; return fields + offset."""
    if buf[:2] != magic:
        raise ImageFormatError(f"bad magic {buf[:2]!r}, expected {magic!r}")
    fields = []
    i = 2
    while len(fields) < 3:
        if i >= len(buf):
            raise ImageFormatError(f"truncated header at offset {i}")
        ch = buf[i:i + 1]
        if ch == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace():
                j += 1
            tok = buf[i:j]
            if not tok.isdigit():
                raise ImageFormatError(f"bad header token {tok!r} at offset {i}")
            fields.append(int(tok))
            i = j
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at offset {i}")
    return fields[0], fields[1], fields[2], i + 1


def read_image(path):
    """P6 file -> f32 image (3, H, W) scaled to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, off = _read_header(buf, b"P6")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (need 255)")
    need = w * h * 3
    if len(buf) - off < need:
        raise ImageFormatError(
            f"truncated pixel data at offset {len(buf)} (need {off + need} bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def _to_u8(values):
    # round half up, clamped
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, img):
    """f32 image (3, H, W) in [0, 1] -> P6 file (round half up)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected (3, H, W), got {img.shape}")
    _, h, w = img.shape
    data = _to_u8(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data)


def write_u8_ppm(path, img_u8):
    """(H, W, 3) u8 -> P6 file (generator-side writer)."""
    img_u8 = np.asarray(img_u8, dtype=np.uint8)
    h, w, _ = img_u8.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img_u8.tobytes())


def write_heatmap_pgm(path, heat):
    """(H, W) floats in [-1, 1] -> P5, affinely mapped to [0, 255]."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise ImageFormatError(f"expected (H, W) heatmap, got {heat.shape}")
    h, w = heat.shape
    bytes_ = _to_u8((heat + 1.0) / 2.0)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(bytes_.tobytes())
