"""Decoupled training loop: batch sampling, routed losses, two independent
Adam optimizers (field and uncertainty MLP), periodic evaluation against
clean held-out views, checkpointing, and the ablation runner.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import imgio, numkit, plots
from .fieldrender import ImageField2D, VoxelField3D, render_pixels_2d, \
    render_pixels_3d
from .numkit import AdamState, MlpSpec, adam_step, load_segments, \
    mlp_add_params, mlp_forward, save_segments
from .robustloss import BatchPatch, LossWeights, total_step_loss
from .sampling import RandomBatch, SamplerConfig, gather_patch, sample_batch
from .scenegen import psnr, ssim_metric

REPORT_COLUMNS = ["iter", "loss_total", "loss_nerf", "loss_uncer", "loss_reg",
                  "test_psnr", "test_ssim", "beta_distractor", "beta_static",
                  "beta_auroc"]


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    deterministic: bool = True
    # sampler
    strategy: str = "dilated_patch"
    patch_size: int = 32
    dilation: int = 4
    batch_rays: int = 4096
    # loss
    lam1: float = 100.0
    lam2: float = 0.5
    lam3: float = 0.5
    lam4: float = 0.1
    eta: float = 0.75
    ssim_mode: str = "modified"
    ssim_window: int = 3
    neighbor_scope: str = "patch"
    couple_uncer_to_field: bool = False
    # field
    field_resolution: int = 256          # 2D grid side; 3D voxel side is /4
    background: float = 1.0
    near: float = 1.0
    far: float = 5.0
    n_samples: int = 64
    # uncertainty MLP
    hidden: tuple = (64, 64)
    beta_min: float = 0.001
    # optimization
    lr_field: float = 1e-2
    lr_g: float = 1e-2
    lr_decay: bool = False
    warmup_iters: int = 0
    # evaluation / output
    eval_every: int = 100
    beta_norm_max: float = 0.3
    heatmap_views: int = 1
    threads: int = 0                     # reserved; compute is vectorized

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_field <= 0 or self.lr_g <= 0:
            raise ValueError("learning rates must be positive")

    def sampler_config(self, min_view_dim=None):
        # clamp the patch so its dilated footprint fits the smallest view
        p = self.patch_size
        if min_view_dim is not None and self.strategy != "random":
            d = 1 if self.strategy == "contiguous_patch" else self.dilation
            p = min(p, (min_view_dim - 1) // d + 1)
            if p < 2:
                raise ValueError(
                    f"dilation {d} leaves no room for a patch in a view of "
                    f"side {min_view_dim}")
        per_batch = max(1, math.ceil(self.batch_rays / p ** 2))
        return SamplerConfig(strategy=self.strategy, patch_size=p,
                             dilation=self.dilation,
                             patches_per_batch=per_batch, seed=self.seed)

    def weights(self):
        return LossWeights(lam1=self.lam1, lam2=self.lam2, lam3=self.lam3,
                           lam4=self.lam4)


@dataclass
class RunReport:
    rows: list
    checkpoint_path: str = None
    beta_range: tuple = (0.0, 0.3)
    baseline: bool = False

    @property
    def final(self):
        return self.rows[-1]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            wr = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: row[k] for k in REPORT_COLUMNS})

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as f:
            rows = []
            for row in csv.DictReader(f):
                rows.append({k: (int(row[k]) if k == "iter" else float(row[k]))
                             for k in REPORT_COLUMNS})
        return cls(rows=rows)


def auroc(pos, neg):
    """Rank-based AUROC of pos scores against neg scores."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(1, allv.size + 1)
    # midranks for ties
    sorted_v = allv[order]
    i = 0
    while i < allv.size:
        j = i
        while j + 1 < allv.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# Internal run state


def _iter_rng(seed, stream, iteration):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream, iteration)))


def _make_field(ds, cfg):
    if ds.config.mode == "flat2d":
        return ImageField2D(cfg.field_resolution, cfg.field_resolution)
    res = max(8, cfg.field_resolution // 4)
    return VoxelField3D((res, res, res), (-1, -1, -1), (1, 1, 1))


def _make_g(ds, cfg):
    spec = MlpSpec(in_dim=ds.feature_dim, hidden=tuple(cfg.hidden), out_dim=1,
                   output_transform="softplus_shifted", shift=cfg.beta_min)
    params = numkit.ParamStore()
    mlp_add_params(params, spec, _iter_rng(cfg.seed, 2, 0))
    return spec, params


def _render_patch(ds, cfg, field, view, coords, jitter_rng):
    if ds.config.mode == "flat2d":
        return render_pixels_2d(field, view.image.shape[:2], coords)
    bg = np.full(3, cfg.background)
    return render_pixels_3d(field, view.camera, coords,
                            n_samples=cfg.n_samples, near=cfg.near,
                            far=cfg.far, background=bg,
                            rng=jitter_rng)


def _build_patches(ds, cfg, field, batch, iteration):
    out = []
    if isinstance(batch, RandomBatch):
        for vid in np.unique(batch.view_ids):
            sel = batch.view_ids == vid
            coords = batch.coords[sel]
            view = ds.train[int(vid)]
            xs, ys = coords[:, 0], coords[:, 1]
            colors = view.image[ys, xs]
            feats = view.fmap.at(xs, ys)
            jr = _iter_rng(cfg.seed, 1, iteration) if ds.config.mode != "flat2d" else None
            chat, back = _render_patch(ds, cfg, field, view,
                                       coords.astype(np.float64), jr)
            out.append(BatchPatch(colors=colors, features=feats, chat=chat,
                                  backward=back, view_id=int(vid),
                                  is_patch=False))
        return out
    for k, patch in enumerate(batch):
        view = ds.train[patch.view_id]
        colors, feats = gather_patch(view.image, view.fmap, patch)
        jr = None if ds.config.mode == "flat2d" else \
            _iter_rng(cfg.seed, 1, iteration * 1000 + k)
        chat, back = _render_patch(ds, cfg, field, view,
                                   patch.coords().astype(np.float64), jr)
        out.append(BatchPatch(colors=colors,
                              features=feats.reshape(-1, feats.shape[-1]),
                              chat=chat, backward=back,
                              view_id=patch.view_id, is_patch=True))
    return out


def _render_full_view(ds, cfg, field, view):
    h, w = view.image.shape[:2]
    j, i = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([j.ravel(), i.ravel()], axis=-1).astype(np.float64)
    colors, _ = _render_patch(ds, cfg, field, view, pixels, None)
    return np.clip(colors.reshape(h, w, 3), 0.0, 1.0)


def _beta_map(g_spec, g_params, fmap):
    h, w, c = fmap.shape
    beta, _ = mlp_forward(g_spec, g_params, fmap.data.reshape(-1, c).astype(np.float64))
    return beta[:, 0].reshape(h, w)


def _evaluate(ds, cfg, field, g_spec, g_params, iteration, parts, out_dir,
              baseline):
    test_p, test_s = [], []
    for v in ds.test:
        render = _render_full_view(ds, cfg, field, v)
        test_p.append(psnr(render, v.image))
        test_s.append(ssim_metric(render, v.image))
    betas_d, betas_s = [], []
    heat_written = 0
    for vi, v in enumerate(ds.train):
        if baseline or g_params is None:
            bmap = np.ones(v.image.shape[:2])
        else:
            bmap = _beta_map(g_spec, g_params, v.fmap)
        if v.mask is not None:
            betas_d.append(bmap[v.mask])
            betas_s.append(bmap[~v.mask])
        if out_dir and heat_written < cfg.heatmap_views:
            lo, hi = cfg.beta_min, cfg.beta_norm_max
            norm = np.clip((bmap - lo) / (hi - lo), 0.0, 1.0)
            imgio.write_image(os.path.join(
                out_dir, f"beta_{vi:03d}_iter{iteration:06d}.png"), norm)
            heat_written += 1
    bd = np.concatenate(betas_d) if betas_d else np.array([])
    bs = np.concatenate(betas_s) if betas_s else np.array([])
    return {"iter": iteration,
            "loss_total": parts["total"], "loss_nerf": parts["nerf"],
            "loss_uncer": parts["uncer"], "loss_reg": parts["reg"],
            "test_psnr": float(np.mean(test_p)),
            "test_ssim": float(np.mean(test_s)),
            "beta_distractor": float(bd.mean()) if bd.size else float("nan"),
            "beta_static": float(bs.mean()) if bs.size else float("nan"),
            "beta_auroc": auroc(bd, bs) if bd.size and bs.size else float("nan")}


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, field, g_params, st_field, st_g, iteration):
    segs = []
    for name in field.params.segments:
        segs.append((f"field/{name}", field.params.view(name)))
    segs += [("field_adam/m", st_field.m), ("field_adam/v", st_field.v),
             ("field_adam/t", np.array(float(st_field.t)))]
    if g_params is not None:
        for name in g_params.segments:
            segs.append((f"g/{name}", g_params.view(name)))
        segs += [("g_adam/m", st_g.m), ("g_adam/v", st_g.v),
                 ("g_adam/t", np.array(float(st_g.t)))]
    segs.append(("meta/iter", np.array(float(iteration))))
    save_segments(path, segs)


def load_checkpoint(path, field, g_params, st_field, st_g):
    if not path or not os.path.exists(path):
        raise TrainError(f"missing checkpoint: {path!r}")
    data = dict(load_segments(path))

    def pull(name, target):
        if name not in data:
            raise TrainError(f"checkpoint lacks segment {name!r}")
        if data[name].shape != target.shape:
            raise TrainError(f"segment {name!r}: shape {data[name].shape} "
                             f"does not match {target.shape}")
        target[...] = data[name]

    for name in field.params.segments:
        pull(f"field/{name}", field.params.view(name))
    pull("field_adam/m", st_field.m)
    pull("field_adam/v", st_field.v)
    st_field.t = int(data["field_adam/t"].reshape(-1)[0])
    if g_params is not None:
        for name in g_params.segments:
            pull(f"g/{name}", g_params.view(name))
        pull("g_adam/m", st_g.m)
        pull("g_adam/v", st_g.v)
        st_g.t = int(data["g_adam/t"].reshape(-1)[0])
    return int(data["meta/iter"].reshape(-1)[0])


# ---------------------------------------------------------------------------
# Training entry points


def train(ds, cfg, out_dir=None, baseline=False, resume=None):
    """Run the decoupled training loop; returns a RunReport.

    baseline=True freezes beta to 1 and leaves the uncertainty MLP out
    entirely (plain weighted-l2 control).
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    min_dim = min(min(h, w) for h, w in ds.view_shapes())
    scfg = cfg.sampler_config(min_dim)
    for h, w in ds.view_shapes():
        scfg.validate_for(h, w)
    weights = cfg.weights()
    field = _make_field(ds, cfg)
    g_spec = g_params = st_g = None
    if not baseline:
        g_spec, g_params = _make_g(ds, cfg)
        st_g = AdamState.for_params(g_params, lr=cfg.lr_g)
    st_field = AdamState.for_params(field.params, lr=cfg.lr_field)
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, field, g_params, st_field, st_g)
    rows = []
    parts = {"total": float("nan"), "nerf": float("nan"),
             "uncer": float("nan"), "reg": float("nan")}
    view_shapes = ds.view_shapes()
    for it in range(start + 1, cfg.iterations + 1):
        rng = _iter_rng(cfg.seed, 0, it)
        batch = sample_batch(scfg, view_shapes, rng)
        patches = _build_patches(ds, cfg, field, batch, it)
        warm = it <= cfg.warmup_iters
        bundle = total_step_loss(
            patches, g_spec, g_params, weights, cfg.eta,
            ssim_mode=cfg.ssim_mode, window=cfg.ssim_window,
            neighbor_scope=cfg.neighbor_scope,
            couple_uncer_to_field=cfg.couple_uncer_to_field,
            beta_override=1.0 if (baseline or warm or g_params is None) else None)
        for name, v in (("total", bundle.total), ("nerf", bundle.nerf),
                        ("uncer", bundle.uncer), ("reg", bundle.reg)):
            if not np.isfinite(v):
                raise TrainError(f"non-finite {name} loss at iteration {it}")
        parts = {"total": bundle.total, "nerf": bundle.nerf,
                 "uncer": bundle.uncer, "reg": bundle.reg}
        if cfg.lr_decay:
            frac = it / cfg.iterations
            st_field.lr = cfg.lr_field * 0.1 ** frac
            if st_g is not None:
                st_g.lr = cfg.lr_g * 0.1 ** frac
        adam_step(field.params, st_field)
        if g_params is not None and not warm:
            adam_step(g_params, st_g)
        elif g_params is not None:
            g_params.zero_grads()
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            rows.append(_evaluate(ds, cfg, field, g_spec, g_params, it, parts,
                                  out_dir, baseline))
    ckpt = None
    if out_dir:
        ckpt = os.path.join(out_dir, "checkpoint.rfck")
        save_checkpoint(ckpt, field, g_params, st_field, st_g, cfg.iterations)
        report = RunReport(rows=rows, checkpoint_path=ckpt,
                           beta_range=(cfg.beta_min, cfg.beta_norm_max),
                           baseline=baseline)
        report.to_csv(os.path.join(out_dir, "report.csv"))
        plots.convergence_plot(rows, os.path.join(out_dir, "convergence.png"))
        return report
    return RunReport(rows=rows, checkpoint_path=ckpt,
                     beta_range=(cfg.beta_min, cfg.beta_norm_max),
                     baseline=baseline)


def run_baseline(ds, cfg, out_dir=None):
    """Plain l2 control: beta frozen to 1, no uncertainty MLP."""
    return train(ds, cfg, out_dir=out_dir, baseline=True)


ABLATION_SUITES = {
    "dilation": {"d1": {"dilation": 1}, "d2": {"dilation": 2},
                 "d4": {"dilation": 4}, "d8": {"dilation": 8}},
    "loss": {"ours": {},
             "a": {"lam4": 0.0},
             "b": {"ssim_mode": "l2"},
             "c": {"couple_uncer_to_field": True}},
    "sampler": {"random": {"strategy": "random"},
                "patch": {"strategy": "contiguous_patch"},
                "dilated": {"strategy": "dilated_patch"}},
}


def run_ablation(ds, suite, cfg, out_dir=None, variants=None):
    """One training run per variant (shared seed); returns a table of final
    metrics plus the per-variant reports."""
    if suite not in ABLATION_SUITES:
        raise TrainError(f"unknown ablation suite {suite!r}")
    chosen = ABLATION_SUITES[suite]
    if variants is not None:
        chosen = {k: v for k, v in chosen.items() if k in variants}
    table = []
    reports = {}
    for name, overrides in chosen.items():
        vcfg = replace(cfg, **overrides)
        vdir = os.path.join(out_dir, name) if out_dir else None
        rep = train(ds, vcfg, out_dir=vdir)
        reports[name] = rep
        final = rep.final
        table.append({"variant": name, "test_psnr": final["test_psnr"],
                      "test_ssim": final["test_ssim"],
                      "beta_auroc": final["beta_auroc"]})
    if out_dir:
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="",
                  encoding="utf-8") as f:
            wr = csv.DictWriter(f, fieldnames=["variant", "test_psnr",
                                               "test_ssim", "beta_auroc"])
            wr.writeheader()
            wr.writerows(table)
        plots.ablation_plot(table, "test_psnr",
                            os.path.join(out_dir, "ablation.png"))
    return table, reports


def evaluate_checkpoint(ds, cfg, ckpt_path, baseline=False):
    """Metrics for a stored checkpoint on a dataset (final-row format)."""
    field = _make_field(ds, cfg)
    g_spec = g_params = st_g = None
    if not baseline:
        g_spec, g_params = _make_g(ds, cfg)
        st_g = AdamState.for_params(g_params, lr=cfg.lr_g)
    st_field = AdamState.for_params(field.params, lr=cfg.lr_field)
    it = load_checkpoint(ckpt_path, field, g_params, st_field, st_g)
    parts = {"total": float("nan"), "nerf": float("nan"),
             "uncer": float("nan"), "reg": float("nan")}
    row = _evaluate(ds, cfg, field, g_spec, g_params, it, parts, None,
                    baseline)
    return row, field, (g_spec, g_params)
