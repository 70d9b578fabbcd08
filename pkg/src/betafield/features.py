"""Per-pixel feature provision.

Three providers feed the uncertainty predictor: a hand-crafted multi-scale
descriptor computed from the image itself, a synthetic oracle keyed to the
distractor masks (test fixture), and a binary file loader for externally
computed feature maps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

# Rec.709 luma weights
_LUMA = np.array([0.2126, 0.7152, 0.0722])


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32, row-major

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise FeatureError("feature map must be HxWxC")

    @property
    def shape(self):
        return self.data.shape

    def at(self, xs, ys):
        """Gather feature vectors at pixel coords (float64 output)."""
        return self.data[ys, xs].astype(np.float64)


def builtin_descriptor(image):
    """16-dim hand-crafted per-pixel descriptor.

    Channels: raw RGB (3), blurred RGB at sigma in {1,2} (6), gradient
    magnitude of the blurred luminance at sigma in {0.5,1,2} (3), local RGB
    std over a 3x3 window (3), raw luminance (1). The scales stay small so
    the descriptor remains sharp across object boundaries. Deterministic.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < 9 or w < 9:
        raise FeatureError(f"image {h}x{w} too small for the descriptor")
    lum = image @ _LUMA
    chans = [image[..., c] for c in range(3)]
    for sigma in (1.0, 2.0):
        for c in range(3):
            chans.append(gaussian_filter(image[..., c], sigma,
                                         mode="reflect", truncate=3.0))
    for sigma in (0.5, 1.0, 2.0):
        bl = gaussian_filter(lum, sigma, mode="reflect", truncate=3.0)
        gy, gx = np.gradient(bl)
        chans.append(np.sqrt(gx * gx + gy * gy))
    for c in range(3):
        m = uniform_filter(image[..., c], 3, mode="reflect")
        m2 = uniform_filter(image[..., c] ** 2, 3, mode="reflect")
        chans.append(np.sqrt(np.maximum(m2 - m * m, 0.0)))
    # tiny offset keeps the vector nonzero even on a pure black image
    chans.append(lum + 1e-6)
    return FeatureMap(np.stack(chans, axis=-1))


# fixed class directions for the oracle provider (norm 10 each); the base
# (background) vector is index 0, distractor classes use 1..7
_ORACLE_SCALE = 10.0


def _oracle_vector(k):
    v = np.zeros(8)
    v[k % 8] = _ORACLE_SCALE
    return v


def oracle_features(distractor_mask, class_ids, seed):
    """Synthetic 8-dim features: one fixed vector per class plus N(0, 0.01 I)
    noise; background and distractor classes are mutually near-orthogonal.
    """
    mask = np.asarray(distractor_mask, dtype=bool)
    ids = np.asarray(class_ids)
    if mask.shape != ids.shape:
        raise FeatureError("mask/class_ids shape mismatch")
    h, w = mask.shape
    rng = np.random.default_rng(seed)
    base = np.broadcast_to(_oracle_vector(0), (h, w, 8)).copy()
    for k in np.unique(ids[mask]):
        sel = mask & (ids == k)
        base[sel] = _oracle_vector(1 + int(k) % 7)
    base += rng.normal(0.0, 0.1, size=(h, w, 8))
    return FeatureMap(base)


def fmap_save(path, fmap):
    data = np.ascontiguousarray(fmap.data, dtype="<f4")
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<IIII", FMAP_VERSION, h, w, c))
        f.write(data.tobytes())


def fmap_load(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FMAP_MAGIC:
        raise FeatureError(f"{path}: bad magic at byte 0")
    if len(raw) < 20:
        raise FeatureError(f"{path}: truncated header at byte {len(raw)}")
    version, h, w, c = struct.unpack("<IIII", raw[4:20])
    if version != FMAP_VERSION:
        raise FeatureError(f"{path}: unsupported version {version}")
    if h == 0 or w == 0 or c == 0:
        raise FeatureError(f"{path}: zero dims")
    need = 20 + 4 * h * w * c
    if len(raw) < need:
        raise FeatureError(
            f"{path}: truncated payload at byte {len(raw)} (need {need})")
    data = np.frombuffer(raw[20:need], dtype="<f4").reshape(h, w, c)
    return FeatureMap(data.copy())


def nn_resample(fmap, new_h, new_w):
    """Nearest-neighbor resample with the floor((i+0.5)*src/dst) index rule."""
    h, w, _ = fmap.shape
    ys = np.floor((np.arange(new_h) + 0.5) * h / new_h).astype(np.int64)
    xs = np.floor((np.arange(new_w) + 0.5) * w / new_w).astype(np.int64)
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    return FeatureMap(fmap.data[ys[:, None], xs[None, :]])


def nn_upsample(fmap, new_h, new_w):
    h, w, _ = fmap.shape
    if new_h < h or new_w < w:
        raise FeatureError(f"upsample target {new_h}x{new_w} smaller than "
                           f"source {h}x{w}")
    return nn_resample(fmap, new_h, new_w)


def cosine(f, g):
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    nf = np.linalg.norm(f)
    ng = np.linalg.norm(g)
    if nf == 0.0 or ng == 0.0:
        raise FeatureError("cosine of zero vector")
    return float(np.dot(f, g) / (nf * ng))
