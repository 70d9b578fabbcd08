"""8-bit image read/write. PNG via Pillow, binary PPM (P6) as a
zero-dependency fallback; the format is picked from the file extension.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_u8(img):
    """Clamp a float image in [0,1] to uint8."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_u8(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def write_image(path, img):
    """img: HxWx3 or HxW float in [0,1], or uint8."""
    path = str(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_u8(arr)
    if path.endswith(".ppm"):
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        h, w, _ = arr.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(arr.tobytes())
    else:
        Image.fromarray(arr).save(path)


def read_image(path):
    """Returns float64 image in [0,1] (HxWx3 or HxW)."""
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            magic = f.readline().strip()
            if magic != b"P6":
                raise ValueError(f"{path}: not a binary PPM")
            dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            f.readline()  # maxval
            arr = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
            arr = arr.reshape(h, w, 3)
    else:
        arr = np.asarray(Image.open(path))
    return from_u8(arr)
