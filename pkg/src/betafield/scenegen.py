"""Synthetic dataset generation and evaluation metrics.

Two modes: flat2d (one procedural ground-truth image; every train view is
that image plus per-view pasted distractors) and voxel3d (a random voxel
scene rendered from a camera ring, distractors pasted in image space).
Distractor masks are recorded for evaluation only and are never visible to
training.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from . import features as feat
from . import imgio
from .fieldrender import CameraModel, VoxelField3D, render_pixels_3d
from .robustloss import SsimConstants, ssim_components

# luminance-preserving color direction used by camouflage distractors
_CHROMA_DIR = np.array([0.7152, -0.2126, 0.0])
_CHROMA_DIR = _CHROMA_DIR / np.linalg.norm(_CHROMA_DIR)

_KIND_IDS = {"disk": 0, "box": 1, "blob": 2}


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    mode: str = "flat2d"                 # flat2d | voxel3d
    seed: int = 0
    n_views: int = 24
    n_test_views: int = 4
    height: int = 64
    width: int = 64
    occlusion: float = 0.2               # target mean masked fraction per view
    distractor_min: int = 0
    distractor_max: int = 64
    kinds: tuple = ("disk", "box", "blob")
    feature_provider: str = "builtin_descriptor"  # | oracle | file
    camouflage: float = 0.0              # fraction of camouflaged distractors
    recurring: float = 0.0               # fraction reusing a shared template
    camouflage_amp: float = 0.06
    texture: float = 0.0                 # high-frequency detail in the clean image
    gt_resolution: int = 48              # voxel3d ground-truth grid side

    def __post_init__(self):
        if self.mode not in ("flat2d", "voxel3d"):
            raise SceneError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.occlusion <= 0.5:
            raise SceneError("occlusion must be in [0, 0.5]")
        if self.feature_provider not in ("builtin_descriptor", "oracle", "file"):
            raise SceneError(f"unknown provider {self.feature_provider!r}")
        for k in self.kinds:
            if k not in _KIND_IDS:
                raise SceneError(f"unknown distractor kind {k!r}")


@dataclass
class View:
    image: np.ndarray                  # (H,W,3) float in [0,1], 8-bit grid
    camera: CameraModel
    fmap: feat.FeatureMap = None
    mask: np.ndarray = None            # (H,W) bool, evaluation only


@dataclass
class Dataset:
    config: SceneConfig
    train: list
    test: list

    @property
    def feature_dim(self):
        for v in self.train:
            if v.fmap is not None:
                return v.fmap.shape[2]
        return 0

    def view_shapes(self):
        return [v.image.shape[:2] for v in self.train]


# ---------------------------------------------------------------------------
# Procedural content


def _identity_camera(h, w):
    pose = np.hstack([np.eye(3), np.zeros((3, 1))])
    return CameraModel(fx=float(max(h, w)), fy=float(max(h, w)),
                       cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                       pose=pose, width=w, height=h)


def _gt_image(h, w, rng, texture=0.0):
    """Smooth gradients + shapes + low-frequency noise, in [0.03, 0.97].

    texture > 0 adds shared high-frequency luminance detail (unit-variance
    noise at sigma 0.5, scaled by the amplitude) on top of the smooth base."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    for c in range(3):
        a, b = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.22 * np.sin(2 * np.pi * (a * xx + b * yy) + phase)
    for _ in range(5):
        color = rng.uniform(0.1, 0.9, size=3)
        r = rng.uniform(0.08, 0.22) * min(h, w)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            m = (np.mgrid[0:h, 0:w][0] - cy) ** 2 + \
                (np.mgrid[0:h, 0:w][1] - cx) ** 2 <= r ** 2
        else:
            m = (np.abs(np.mgrid[0:h, 0:w][0] - cy) <= r) & \
                (np.abs(np.mgrid[0:h, 0:w][1] - cx) <= 0.7 * r)
        img[m] = 0.65 * color + 0.35 * img[m]
    noise = rng.standard_normal((h, w, 3))
    for c in range(3):
        noise[..., c] = gaussian_filter(noise[..., c], 1.5, mode="reflect")
    img += 0.10 * noise
    if texture > 0.0:
        fine = gaussian_filter(rng.standard_normal((h, w)), 0.5,
                               mode="reflect")
        img += texture * (fine / fine.std())[..., None]
    return np.clip(img, 0.03, 0.97)


def _shape_mask(kind, h, w, cy, cx, r, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if kind == "box":
        ar = rng.uniform(0.6, 1.6)
        return (np.abs(yy - cy) <= r * ar) & (np.abs(xx - cx) <= r / ar)
    # blob: thresholded smooth noise inside a bounding disk
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    noise = gaussian_filter(rng.standard_normal((h, w)), 2.5, mode="reflect")
    return (d2 <= (1.4 * r) ** 2) & (noise + 0.8 * (1.0 - d2 / (1.4 * r) ** 2) > 0.8)


def _paste_distractors(clean, cfg, rng, templates):
    """Returns (image, mask, class_ids). Coverage targets cfg.occlusion
    within +-0.05; raises when the count budget cannot reach it."""
    h, w = clean.shape[:2]
    img = clean.copy()
    mask = np.zeros((h, w), dtype=bool)
    ids = np.zeros((h, w), dtype=np.int16)
    target = cfg.occlusion
    if target <= 0:
        return img, mask, ids
    count = 0
    max_r = max(3.0, 0.30 * min(h, w))
    while True:
        cov = mask.mean()
        remaining = target - cov
        if remaining <= 0.01:
            break
        if count >= cfg.distractor_max:
            if cov < target - 0.05:
                raise SceneError(
                    f"cannot reach occlusion {target:.2f} with "
                    f"{cfg.distractor_max} distractors (got {cov:.2f})")
            break
        if templates and rng.random() < cfg.recurring:
            kind, color, r = templates[int(rng.integers(0, len(templates)))]
        else:
            kind = cfg.kinds[int(rng.integers(0, len(cfg.kinds)))]
            color = rng.uniform(0.05, 0.95, size=3)
            r = np.sqrt(min(remaining, 0.06) * h * w / np.pi)
            r = float(np.clip(r, 3.0, max_r))
            if templates is not None and rng.random() < cfg.recurring:
                templates.append((kind, color, r))
        cy = rng.uniform(r, h - r) if h > 2 * r else h / 2
        cx = rng.uniform(r, w - r) if w > 2 * r else w / 2
        m = _shape_mask(kind, h, w, cy, cx, r, rng)
        if not m.any():
            count += 1
            continue
        camo = rng.random() < cfg.camouflage
        if camo:
            # color-matched distractor: local texture is flattened away while
            # the palette stays close to the background (small chroma shift),
            # so per-pixel color error is tiny but structure clearly differs
            flat = np.stack([gaussian_filter(clean[..., c], 2.0,
                                             mode="reflect")
                             for c in range(3)], axis=-1)
            shift = cfg.camouflage_amp * rng.choice([-1.0, 1.0]) * _CHROMA_DIR
            img[m] = np.clip(flat[m] + shift, 0.0, 1.0)
        else:
            tex = 0.05 * gaussian_filter(
                rng.standard_normal((h, w)), 1.0, mode="reflect")
            img[m] = np.clip(color + tex[m, None], 0.0, 1.0)
        ids[m] = _KIND_IDS[kind]
        mask |= m
        count += 1
    if count < cfg.distractor_min:
        raise SceneError("distractor_min exceeds what the occlusion target allows")
    return img, mask, ids


def _quantize(img):
    return imgio.from_u8(imgio.to_u8(img))


def _ring_camera(h, w, angle, radius=3.0, elevation=1.2):
    pos = np.array([radius * np.cos(angle), radius * np.sin(angle), elevation])
    fwd = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    pose = np.hstack([rot, pos[:, None]])
    f = 1.1 * max(h, w)
    return CameraModel(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                       pose=pose, width=w, height=h)


def _gt_voxel_field(cfg, rng):
    n = cfg.gt_resolution
    fld = VoxelField3D((n, n, n), (-1, -1, -1), (1, 1, 1),
                       density_init=-10.0)
    draw = fld.params.view("density_raw")
    craw = fld.params.view("color_raw")
    zz, yy, xx = np.mgrid[0:n, 0:n, 0:n] / (n - 1) * 2.0 - 1.0
    for _ in range(6):
        center = rng.uniform(-0.55, 0.55, size=3)
        color = rng.uniform(0.1, 0.9, size=3)
        if rng.random() < 0.5:
            half = rng.uniform(0.12, 0.3, size=3)
            m = (np.abs(xx - center[0]) < half[0]) & \
                (np.abs(yy - center[1]) < half[1]) & \
                (np.abs(zz - center[2]) < half[2])
        else:
            r = rng.uniform(0.15, 0.32)
            m = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 + \
                (zz - center[2]) ** 2 < r ** 2
        draw[m] = 8.0
        logit = np.log(color / (1.0 - color))
        craw[m] = logit
    return fld


def _render_view_3d(fld, camera):
    h, w = camera.height, camera.width
    j, i = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([j.ravel(), i.ravel()], axis=-1).astype(np.float64)
    colors, _ = render_pixels_3d(fld, camera, pixels, n_samples=96,
                                 near=1.0, far=5.0, rng=None)
    return np.clip(colors.reshape(h, w, 3), 0.0, 1.0)


def _make_fmap(cfg, image, mask, ids, view_seed):
    if cfg.feature_provider == "builtin_descriptor":
        return feat.builtin_descriptor(image)
    if cfg.feature_provider == "oracle":
        return feat.oracle_features(mask, ids, view_seed)
    return None  # file provider: maps live next to the dataset


def gen_scene(cfg):
    """Generate a full dataset in memory, deterministic per cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    templates = [] if cfg.recurring > 0 else None
    if cfg.mode == "flat2d":
        gt = _quantize(_gt_image(h, w, rng, cfg.texture))
        clean_views = [gt] * (cfg.n_views + cfg.n_test_views)
        cameras = [_identity_camera(h, w)] * (cfg.n_views + cfg.n_test_views)
    else:
        fld = _gt_voxel_field(cfg, rng)
        total = cfg.n_views + cfg.n_test_views
        angles = np.linspace(0.0, 2 * np.pi, total, endpoint=False)
        cameras = [_ring_camera(h, w, a) for a in angles]
        clean_views = [_quantize(_render_view_3d(fld, c)) for c in cameras]
    train = []
    for i in range(cfg.n_views):
        img, mask, ids = _paste_distractors(clean_views[i], cfg, rng, templates)
        img = _quantize(img)
        mask = np.any(img != clean_views[i], axis=-1)
        fmap = _make_fmap(cfg, img, mask, ids, cfg.seed * 100003 + i)
        train.append(View(image=img, camera=cameras[i], fmap=fmap, mask=mask))
    test = [View(image=clean_views[cfg.n_views + i],
                 camera=cameras[cfg.n_views + i])
            for i in range(cfg.n_test_views)]
    return Dataset(config=cfg, train=train, test=test)


# ---------------------------------------------------------------------------
# Dataset directory I/O


def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "masks", "features"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    cfg = ds.config
    manifest = {"format_version": 1, "config": asdict(cfg),
                "n_train": len(ds.train), "n_test": len(ds.test)}
    manifest["config"]["kinds"] = list(cfg.kinds)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    lines = []
    for i, v in enumerate(ds.train + ds.test):
        imgio.write_image(os.path.join(out_dir, "images", f"{i:03d}.png"), v.image)
        c = v.camera
        pose = " ".join(repr(float(x)) for x in c.pose.ravel())
        lines.append(f"{i} {float(c.fx)!r} {float(c.fy)!r} "
                     f"{float(c.cx)!r} {float(c.cy)!r} {pose}")
        if v.mask is not None:
            imgio.write_image(os.path.join(out_dir, "masks", f"{i:03d}.png"),
                              v.mask.astype(np.float64))
        if v.fmap is not None:
            feat.fmap_save(os.path.join(out_dir, "features", f"{i:03d}.fmap"),
                           v.fmap)
    with open(os.path.join(out_dir, "cameras.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(in_dir):
    man_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise SceneError(f"missing manifest: {man_path}")
    with open(man_path, encoding="utf-8") as f:
        manifest = json.load(f)
    ccfg = dict(manifest["config"])
    ccfg["kinds"] = tuple(ccfg["kinds"])
    cfg = SceneConfig(**ccfg)
    n_train, n_test = manifest["n_train"], manifest["n_test"]
    if n_train == 0:
        raise SceneError("empty dataset")
    cameras = {}
    with open(os.path.join(in_dir, "cameras.txt"), encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            vid = int(parts[0])
            fx, fy, cx, cy = map(float, parts[1:5])
            pose = np.array(list(map(float, parts[5:17]))).reshape(3, 4)
            cameras[vid] = (fx, fy, cx, cy, pose)
    views = []
    for i in range(n_train + n_test):
        img_path = os.path.join(in_dir, "images", f"{i:03d}.png")
        if not os.path.exists(img_path):
            raise SceneError(f"missing image: {img_path}")
        image = imgio.read_image(img_path)
        fx, fy, cx, cy, pose = cameras[i]
        camera = CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, pose=pose,
                             width=image.shape[1], height=image.shape[0])
        mask = fmap = None
        if i < n_train:
            mask_path = os.path.join(in_dir, "masks", f"{i:03d}.png")
            if os.path.exists(mask_path):
                mask = imgio.read_image(mask_path) > 0.5
            fmap_path = os.path.join(in_dir, "features", f"{i:03d}.fmap")
            if os.path.exists(fmap_path):
                fmap = feat.fmap_load(fmap_path)
            elif cfg.feature_provider == "file":
                raise SceneError(f"missing feature map: {fmap_path}")
        views.append(View(image=image, camera=camera, fmap=fmap, mask=mask))
    return Dataset(config=cfg, train=views[:n_train], test=views[n_train:])


# ---------------------------------------------------------------------------
# Metrics


def psnr(a, b):
    """10*log10(1/MSE) with peak 1.0, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SceneError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def ssim_metric(a, b, window=11):
    """Mean L*C*S over pixels, 11x11 window, standard constants."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SceneError(f"shape mismatch: {a.shape} vs {b.shape}")
    maps = ssim_components(a, b, window=window, constants=SsimConstants())
    maps.cache = None
    return float(np.mean(maps.lum * maps.con * maps.struc))
