"""Binary 8-bit PGM (P5) images and the [-1, 1] <-> [0, 255] mapping."""
import numpy as np


class ImageFormatError(ValueError):
    pass


def to_uint8(img):
    """Affine map [-1, 1] -> [0, 255], clamped."""
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr):
    return (np.asarray(arr, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def write_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ImageFormatError(f"write_pgm expects a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path):
    """Read a P5 file as uint8. Colour (P6) or ASCII variants are rejected."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = buf[:2]
    if magic == b"P6":
        raise ImageFormatError(f"{path}: colour image (P6), expected grayscale")
    if magic != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()
