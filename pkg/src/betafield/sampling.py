"""Ray/pixel batch construction: dilated patch sampling plus contiguous-patch
and random baselines for the sampler ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSample:
    view_id: int
    x0: int
    y0: int
    patch_size: int
    dilation: int

    @property
    def footprint(self):
        return (self.patch_size - 1) * self.dilation + 1

    def coords(self):
        """(P*P, 2) pixel coords, row-major: (x0 + j*d, y0 + i*d)."""
        p, d = self.patch_size, self.dilation
        j, i = np.meshgrid(np.arange(p), np.arange(p))
        xs = self.x0 + j * d
        ys = self.y0 + i * d
        return np.stack([xs.ravel(), ys.ravel()], axis=-1)


@dataclass(frozen=True)
class RandomBatch:
    view_ids: np.ndarray  # (N,)
    coords: np.ndarray    # (N, 2) pixel coords


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "dilated_patch"  # dilated_patch | contiguous_patch | random
    patch_size: int = 32
    dilation: int = 4
    patches_per_batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("dilated_patch", "contiguous_patch", "random"):
            raise SamplingError(f"unknown strategy {self.strategy!r}")
        if self.strategy != "random" and self.patch_size < 2:
            raise SamplingError("patch size must be >= 2")
        if self.dilation < 1:
            raise SamplingError("dilation must be >= 1")
        if self.patches_per_batch < 1:
            raise SamplingError("patches_per_batch must be >= 1")

    @property
    def effective_dilation(self):
        return 1 if self.strategy == "contiguous_patch" else self.dilation

    @property
    def footprint(self):
        return (self.patch_size - 1) * self.effective_dilation + 1

    @property
    def rays_per_batch(self):
        return self.patches_per_batch * self.patch_size ** 2

    def validate_for(self, height, width):
        if self.strategy != "random" and self.footprint > min(height, width):
            raise SamplingError(
                f"footprint {self.footprint} exceeds view {height}x{width}")


def sample_batch(cfg, view_shapes, rng):
    """Draw one batch of pixel coordinates.

    view_shapes: list of (H, W) per view. Patch strategies return a list of
    PatchSample (view uniform per patch, anchor uniform over valid positions);
    the random strategy returns a RandomBatch of uniform (view, pixel) draws.
    """
    n_views = len(view_shapes)
    for h, w in view_shapes:
        cfg.validate_for(h, w)
    if cfg.strategy == "random":
        n = cfg.rays_per_batch
        vids = rng.integers(0, n_views, size=n)
        shapes = np.asarray(view_shapes)
        hs = shapes[vids, 0]
        ws = shapes[vids, 1]
        xs = rng.integers(0, ws)
        ys = rng.integers(0, hs)
        return RandomBatch(view_ids=vids, coords=np.stack([xs, ys], axis=-1))
    d = cfg.effective_dilation
    fp = cfg.footprint
    patches = []
    for _ in range(cfg.patches_per_batch):
        vid = int(rng.integers(0, n_views))
        h, w = view_shapes[vid]
        x0 = int(rng.integers(0, w - fp + 1))
        y0 = int(rng.integers(0, h - fp + 1))
        patches.append(PatchSample(view_id=vid, x0=x0, y0=y0,
                                   patch_size=cfg.patch_size, dilation=d))
    return patches


def gather_patch(image, fmap, patch):
    """Gather (colors (P,P,3), features (P,P,C)) at the patch coordinates."""
    p = patch.patch_size
    coords = patch.coords()
    xs, ys = coords[:, 0], coords[:, 1]
    colors = np.asarray(image, dtype=np.float64)[ys, xs].reshape(p, p, 3)
    feats = None
    if fmap is not None:
        feats = fmap.at(xs, ys).reshape(p, p, -1)
    return colors, feats
