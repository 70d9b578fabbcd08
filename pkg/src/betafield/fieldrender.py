"""Trainable scene representations and the rendering path.

Two fields share one interface: a 2D image field (bilinear color grid) and a
3D voxel field (softplus density + sigmoid color, trilinear). Rendering in 3D
is emission-absorption compositing along camera rays with analytic gradients
back into the grid parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numkit import NumkitError, ParamStore, _softplus


class RenderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Cameras and rays


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # 3x4 world-from-camera
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise RenderError(f"pose must be 3x4, got {self.pose.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        r = self.pose[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise RenderError("rotation block is not orthonormal")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise RenderError("principal point outside image")

    @property
    def rotation(self):
        return self.pose[:, :3]

    @property
    def center(self):
        return self.pose[:, 3]


def generate_rays(camera, pixels):
    """pixels: (N,2) array of (u,v). Returns (origins (N,3), unit dirs (N,3))."""
    pixels = np.asarray(pixels, dtype=np.float64)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(u >= camera.width) or \
       np.any(v < 0) or np.any(v >= camera.height):
        raise RenderError("pixel out of bounds")
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=-1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def generate_ray(camera, pixel):
    o, d = generate_rays(camera, np.asarray(pixel, dtype=np.float64)[None, :])
    return o[0], d[0]


# ---------------------------------------------------------------------------
# Interpolation helpers


def _bilinear(grid, x, y):
    """grid: (H,W,...) values; x,y fractional grid coords. Returns value and
    the index/weight cache used by the scatter in backward."""
    h, w = grid.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(x, np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(y, np.int64)
    fx = x - x0
    fy = y - y0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    val = (w00[..., None] * grid[y0, x0] + w01[..., None] * grid[y0, x1] +
           w10[..., None] * grid[y1, x0] + w11[..., None] * grid[y1, x1])
    cache = (y0, x0, y1, x1, w00, w01, w10, w11)
    return val, cache


def _bilinear_scatter(grad_grid, cache, dval):
    y0, x0, y1, x1, w00, w01, w10, w11 = cache
    np.add.at(grad_grid, (y0, x0), w00[..., None] * dval)
    np.add.at(grad_grid, (y0, x1), w01[..., None] * dval)
    np.add.at(grad_grid, (y1, x0), w10[..., None] * dval)
    np.add.at(grad_grid, (y1, x1), w11[..., None] * dval)


def _trilinear(grid, g):
    """grid: (Nz,Ny,Nx,...) values, g: (N,3) grid coords (x,y,z)."""
    nz, ny, nx = grid.shape[:3]
    x = np.clip(g[:, 0], 0.0, nx - 1.0)
    y = np.clip(g[:, 1], 0.0, ny - 1.0)
    z = np.clip(g[:, 2], 0.0, nz - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(nx - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(ny - 2, 0))
    z0 = np.clip(np.floor(z).astype(np.int64), 0, max(nz - 2, 0))
    fx, fy, fz = x - x0, y - y0, z - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    idx = []
    val = 0.0
    scalar = grid.ndim == 3
    gv = grid[..., None] if scalar else grid
    for (zi, wz) in ((z0, 1 - fz), (z1, fz)):
        for (yi, wy) in ((y0, 1 - fy), (y1, fy)):
            for (xi, wx) in ((x0, 1 - fx), (x1, fx)):
                w = wz * wy * wx
                idx.append((zi, yi, xi, w))
                val = val + w[:, None] * gv[zi, yi, xi]
    if scalar:
        val = val[:, 0]
    return val, (idx, scalar)


def _trilinear_scatter(grad_grid, cache, dval):
    idx, scalar = cache
    gg = grad_grid[..., None] if scalar else grad_grid
    dv = dval[:, None] if scalar else dval
    for zi, yi, xi, w in idx:
        np.add.at(gg, (zi, yi, xi), w[:, None] * dv)


# ---------------------------------------------------------------------------
# Fields


class ImageField2D:
    """Color grid queried bilinearly over [0,1]^2. Raw grid values are the
    colors; clamping happens only at image export, never in the loss path."""

    def __init__(self, height, width, init=0.5, params=None):
        self.height = int(height)
        self.width = int(width)
        if params is None:
            params = ParamStore().add(
                "color", (self.height, self.width, 3),
                init=np.full((self.height, self.width, 3), init))
        self.params = params

    def query(self, pos):
        """pos: (N,2) positions in [0,1]^2 -> colors (N,3) plus cache."""
        pos = np.asarray(pos, dtype=np.float64)
        if not np.all(np.isfinite(pos)):
            raise RenderError("NaN position")
        grid = self.params.view("color")
        x = pos[:, 0] * (self.width - 1)
        y = pos[:, 1] * (self.height - 1)
        val, cache = _bilinear(grid, x, y)
        return val, cache

    def query_backward(self, cache, dcolors):
        _bilinear_scatter(self.params.grad_view("color"), cache, dcolors)


class VoxelField3D:
    """Axis-aligned dense voxel grid: raw density mapped through softplus,
    raw color through sigmoid. Queries outside the bounds return sigma=0."""

    def __init__(self, resolution, bounds_lo, bounds_hi, params=None,
                 density_init=-2.0, color_init=0.0):
        self.resolution = tuple(int(r) for r in resolution)  # (Nx, Ny, Nz)
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
        nx, ny, nz = self.resolution
        if params is None:
            params = ParamStore()
            params.add("density_raw", (nz, ny, nx),
                       init=np.full((nz, ny, nx), density_init))
            params.add("color_raw", (nz, ny, nx, 3),
                       init=np.full((nz, ny, nx, 3), color_init))
        self.params = params

    def _grid_coords(self, points):
        nx, ny, nz = self.resolution
        scale = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
        return (points - self.bounds_lo) / (self.bounds_hi - self.bounds_lo) * scale

    def query(self, points):
        """points: (N,3) world positions -> (sigma (N,), color (N,3), cache)."""
        points = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(points)):
            raise RenderError("NaN position")
        inside = np.all((points >= self.bounds_lo) & (points <= self.bounds_hi),
                        axis=-1)
        g = self._grid_coords(points)
        draw, dcache = _trilinear(self.params.view("density_raw"), g)
        craw, ccache = _trilinear(self.params.view("color_raw"), g)
        sigma = np.where(inside, _softplus(draw), 0.0)
        color = expit(craw)
        cache = {"dcache": dcache, "ccache": ccache, "draw": draw,
                 "craw": craw, "inside": inside}
        return sigma, color, cache

    def query_backward(self, cache, dsigma, dcolor):
        ddraw = np.where(cache["inside"], dsigma * expit(cache["draw"]), 0.0)
        s = expit(cache["craw"])
        dcraw = dcolor * s * (1.0 - s)
        _trilinear_scatter(self.params.grad_view("density_raw"),
                           cache["dcache"], ddraw)
        _trilinear_scatter(self.params.grad_view("color_raw"),
                           cache["ccache"], dcraw)


# ---------------------------------------------------------------------------
# Compositing


def composite(t_vals, sigma, color, background, far):
    """Emission-absorption compositing.

    t_vals, sigma: (R,N); color: (R,N,3); background: (3,).
    alpha_i = 1-exp(-sigma_i*delta_i), T_i = prod_{j<i}(1-alpha_j),
    C = sum_i T_i alpha_i c_i + T_end*background, last delta = far - t_N.
    """
    t_vals = np.asarray(t_vals, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if np.any(sigma < 0):
        raise RenderError("negative density")
    delta = np.diff(t_vals, axis=-1)
    delta = np.concatenate([delta, (far - t_vals[..., -1:])], axis=-1)
    alpha = 1.0 - np.exp(-sigma * delta)
    one_m = 1.0 - alpha
    # exclusive cumulative transmittance: T[...,i] = prod_{j<i} (1-alpha_j)
    t_acc = np.cumprod(one_m, axis=-1)
    trans = np.concatenate([np.ones_like(t_acc[..., :1]), t_acc[..., :-1]],
                           axis=-1)
    t_end = t_acc[..., -1]
    weights = trans * alpha
    chat = (weights[..., None] * color).sum(axis=-2) + t_end[..., None] * background
    cache = {"delta": delta, "alpha": alpha, "trans": trans, "t_end": t_end,
             "weights": weights, "color": color, "background": background}
    return chat, cache


def composite_backward(cache, dchat):
    """dchat: (R,3) -> (dsigma (R,N), dcolor (R,N,3))."""
    color = cache["color"]
    dcolor = cache["weights"][..., None] * dchat[..., None, :]
    h = (color * dchat[..., None, :]).sum(axis=-1)  # (R,N)
    b = dchat @ cache["background"]  # (R,)
    wh = cache["weights"] * h
    # suffix[i] = sum_{j>i} w_j h_j
    suffix = np.flip(np.cumsum(np.flip(wh, axis=-1), axis=-1), axis=-1) - wh
    t_next = cache["trans"] * (1.0 - cache["alpha"])  # T_{i+1}
    dsigma = cache["delta"] * (t_next * h - suffix - cache["t_end"][..., None] * b[..., None])
    return dsigma, dcolor


# ---------------------------------------------------------------------------
# Pixel rendering


def stratified_depths(n_rays, n_samples, near, far, rng=None):
    """Stratified per-ray sample depths; jitter from rng. Without an rng,
    samples sit at bin starts so the per-bin quadrature telescopes exactly."""
    if rng is None:
        u = np.zeros((n_rays, n_samples))
    else:
        u = rng.random((n_rays, n_samples))
    k = np.arange(n_samples, dtype=np.float64)
    return near + (k + u) / n_samples * (far - near)


def render_pixels_2d(field, view_shape, pixels):
    """Render pixel centers of an HxW view through a 2D field.

    Returns (colors (N,3), backward) where backward(dcolors) accumulates
    into the field's parameter gradients.
    """
    h, w = view_shape
    pixels = np.asarray(pixels, dtype=np.float64)
    pos = np.stack([(pixels[:, 0] + 0.5) / w, (pixels[:, 1] + 0.5) / h], axis=-1)
    colors, cache = field.query(pos)

    def backward(dcolors):
        field.query_backward(cache, dcolors)

    return colors, backward


def render_pixels_3d(field, camera, pixels, n_samples=64, near=0.5, far=4.5,
                     background=(1.0, 1.0, 1.0), rng=None):
    """Render rays through a voxel field with stratified sampling.

    Returns (colors (N,3), backward).
    """
    origins, dirs = generate_rays(camera, pixels)
    t_vals = stratified_depths(len(pixels), n_samples, near, far, rng)
    points = origins[:, None, :] + t_vals[..., None] * dirs[:, None, :]
    flat = points.reshape(-1, 3)
    sigma, color, qcache = field.query(flat)
    sigma = sigma.reshape(t_vals.shape)
    color = color.reshape(t_vals.shape + (3,))
    chat, ccache = composite(t_vals, sigma, color, background, far)

    def backward(dchat):
        dsigma, dcolor = composite_backward(ccache, dchat)
        field.query_backward(qcache, dsigma.reshape(-1), dcolor.reshape(-1, 3))

    return chat, backward
