"""Images as f64 arrays in [0,1], with binary PPM (P6) / PGM (P5) I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import atomic_write_bytes


@dataclass
class Image:
    """Row-major interleaved pixel data, 1 or 3 channels, values in [0,1]."""

    width: int
    height: int
    channels: int
    data: np.ndarray  # (height, width, channels) f64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValueError(f"image data shape {self.data.shape} does not "
                             f"match {self.height}x{self.width}x{self.channels}")
        if self.channels not in (1, 3):
            raise ValueError("images must have 1 or 3 channels")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("image values must lie in [0,1]")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr)


def _read_header_tokens(blob: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integer tokens, honoring # comments.
    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated netpbm header")
        tokens.append(int(blob[start:i]))
    return tokens, i + 1


def read_image(path: str) -> Image:
    """Read a binary PGM (P5) or PPM (P6) file with maxval <= 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    (w, h, maxval), off = _read_header_tokens(blob[2:], 3)
    off += 2
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    n = w * h * channels
    raw = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off)
    if raw.size != n:
        raise ValueError(f"{path}: truncated pixel payload")
    data = raw.reshape(h, w, channels).astype(np.float64) / maxval
    return Image(width=w, height=h, channels=channels, data=data)


def write_image(path: str, img: Image) -> None:
    """Write as P5 (1 channel) or P6 (3 channels), maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    pix = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, header + pix.tobytes())


def write_pgm_labels(path: str, labels: np.ndarray) -> None:
    """Store an integer label map (< 256 labels) as a raw P5 file."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label ids must fit one byte")
    h, w = labels.shape
    header = b"P5\n%d %d\n255\n" % (w, h)
    atomic_write_bytes(path, header + labels.astype(np.uint8).tobytes())


def read_pgm_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ValueError(f"{path}: expected P5 label map")
    (w, h, maxval), off = _read_header_tokens(blob[2:], 3)
    off += 2
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=off)
    if raw.size != w * h:
        raise ValueError(f"{path}: truncated label payload")
    return raw.reshape(h, w).astype(np.int64)
