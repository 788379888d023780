"""Binary PPM (P6) / PGM (P5) reading and writing; PNG when Pillow is installed.

Images are uint8 arrays shaped (H, W, 3) for colour and (H, W) for grayscale.
"""

from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_WHITESPACE = b" \t\n\r\x0b\x0c"


class ImageFormatError(ValueError):
    """Malformed or unsupported image file. ``offset`` is the byte position."""

    def __init__(self, message, offset=None, path=None):
        self.message = message
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


def _read_token(buf, pos):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch[0] in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", offset=start)
    return buf[start:pos], start, pos


def _parse_int(token, offset, what):
    if not token.isdigit():
        raise ImageFormatError(f"expected {what}, got {token[:16]!r}", offset=offset)
    return int(token)


def decode_pnm(buf):
    """Decode P5/P6 bytes into a uint8 array."""
    if len(buf) < 2:
        raise ImageFormatError("file too short for a PNM header", offset=0)
    magic = bytes(buf[:2])
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r} (need P5 or P6)", offset=0)
    pos = 2
    tok, off, pos = _read_token(buf, pos)
    width = _parse_int(tok, off, "width")
    tok, off, pos = _read_token(buf, pos)
    height = _parse_int(tok, off, "height")
    tok, off, pos = _read_token(buf, pos)
    maxval = _parse_int(tok, off, "maxval")
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", offset=off)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)", offset=off)
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise ImageFormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise ImageFormatError(f"truncated pixel data: need {need} bytes, found {have}", offset=len(buf))
    pixels = np.frombuffer(bytes(buf[pos:pos + need]), dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def encode_pnm(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"PNM encoding needs uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def _pillow():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageFormatError("PNG support needs Pillow (pip install Pillow)") from exc
    return Image


def read_image(path, mode=None):
    """Read an image file.

    ``mode`` None keeps the stored layout; "rgb" replicates gray to three
    channels; "gray" converts colour to rounded BT.601 luma.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        with _pillow().open(path) as im:
            img = np.asarray(im.convert("RGB" if im.mode not in ("L", "1") else "L"), dtype=np.uint8)
    else:
        try:
            img = decode_pnm(path.read_bytes())
        except ImageFormatError as exc:
            raise ImageFormatError(exc.message, exc.offset, path) from None
    if mode == "rgb" and img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif mode == "gray" and img.ndim == 3:
        img = np.clip(np.rint(to_luma(img)), 0, 255).astype(np.uint8)
    elif mode not in (None, "rgb", "gray"):
        raise ValueError(f"unknown mode {mode!r}")
    return img


def write_image(img, path):
    path = Path(path)
    if path.suffix.lower() == ".png":
        _pillow().fromarray(np.asarray(img, dtype=np.uint8)).save(path)
        return
    path.write_bytes(encode_pnm(img))


def to_luma(img):
    """Float luma of an (H, W, 3) image; grayscale input is returned as float."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    r, g, b = LUMA_WEIGHTS
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


def to_unit(img):
    """uint8 (H, W, 3) -> float32 (1, 3, H, W) in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def from_unit(arr):
    """(1, 3, H, W) or (3, H, W) floats in [0, 1] -> uint8 (H, W, 3)."""
    arr = np.asarray(arr)
    if arr.ndim == 4:
        arr = arr[0]
    return np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
