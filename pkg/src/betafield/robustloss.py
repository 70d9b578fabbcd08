"""The robust loss system.

SSIM luminance/contrast/structure maps with a reformulated product-form
error, the uncertainty loss (error / 2 beta^2 + lambda1 log beta), the
uncertainty-weighted reconstruction loss, a feature-neighbor variance
regularizer, and the combined objective with decoupled gradient routing:
the reconstruction loss reaches only the field, the uncertainty and
regularization losses reach only the uncertainty MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d

from . import numkit


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class SsimConstants:
    c1: float = 1e-4       # (0.01 * range)^2
    c2: float = 9e-4       # (0.03 * range)^2
    c3: float = 4.5e-4     # c2 / 2


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 100.0   # log-beta regularizer inside the uncertainty loss
    lam2: float = 0.5     # reconstruction loss
    lam3: float = 0.5     # uncertainty loss
    lam4: float = 0.1     # neighbor variance regularizer

    def __post_init__(self):
        if self.lam1 <= 0:
            raise LossError("lam1 must be positive")
        if min(self.lam2, self.lam3, self.lam4) < 0:
            raise LossError("loss weights must be nonnegative")


# ---------------------------------------------------------------------------
# Windowed statistics with symmetric padding and an exact adjoint


class WindowOps:
    """Windowed mean over an image with symmetric (reflect) padding.

    mean() and its adjoint mean_t() implement the same linear operator
    exactly, so analytic SSIM gradients match finite differences.
    """

    def __init__(self, height, width, window):
        if window % 2 == 0:
            raise LossError("window must be odd")
        if window > height or window > width:
            raise LossError(f"window {window} larger than {height}x{width}")
        self.height, self.width, self.window = height, width, window
        m = window // 2
        self.pi = np.pad(np.arange(height), m, mode="symmetric")
        self.pj = np.pad(np.arange(width), m, mode="symmetric")
        self._kernel = np.ones((window, window)) / window ** 2
        self._scatter = (self.pi[:, None].repeat(len(self.pj), 1),
                         np.broadcast_to(self.pj, (len(self.pi), len(self.pj))))

    def mean(self, x):
        """x: (..., H, W) -> windowed means (..., H, W)."""
        xp = x[..., self.pi[:, None], self.pj[None, :]]
        v = sliding_window_view(xp, (self.window, self.window), axis=(-2, -1))
        return v.mean(axis=(-2, -1))

    def mean_t(self, g):
        """Adjoint of mean() for a single (H, W) map."""
        gfull = convolve2d(g, self._kernel, mode="full")
        out = np.zeros((self.height, self.width))
        np.add.at(out, self._scatter, gfull)
        return out


# ---------------------------------------------------------------------------
# SSIM decomposition


@dataclass
class SsimMaps:
    lum: np.ndarray     # per-pixel luminance similarity, channel-averaged
    con: np.ndarray     # contrast similarity
    struc: np.ndarray   # structure similarity
    window: int
    constants: SsimConstants
    cache: dict = field(repr=False, default=None)


def ssim_components(target, rendered, window=5, constants=SsimConstants()):
    """Per-pixel L, C, S similarity maps between two (H, W, 3) patches.

    Windowed means/variances/covariance with symmetric padding; the three
    maps are averaged over channels. The cache supports ssim_backward.
    """
    x = np.asarray(target, dtype=np.float64)
    y = np.asarray(rendered, dtype=np.float64)
    if x.shape != y.shape:
        raise LossError(f"patch shapes differ: {x.shape} vs {y.shape}")
    h, w = x.shape[:2]
    ops = WindowOps(h, w, window)
    xc = np.moveaxis(x, -1, 0)  # (3, H, W)
    yc = np.moveaxis(y, -1, 0)
    mu_x = ops.mean(xc)
    mu_y = ops.mean(yc)
    var_x = ops.mean(xc * xc) - mu_x ** 2
    var_y = ops.mean(yc * yc) - mu_y ** 2
    cov = ops.mean(xc * yc) - mu_x * mu_y
    s_x = np.sqrt(np.maximum(var_x, 0.0))
    s_y = np.sqrt(np.maximum(var_y, 0.0))
    k = constants
    den_l = mu_x ** 2 + mu_y ** 2 + k.c1
    den_c = var_x + var_y + k.c2
    den_s = s_x * s_y + k.c3
    lum_c = (2 * mu_x * mu_y + k.c1) / den_l
    con_c = (2 * s_x * s_y + k.c2) / den_c
    str_c = (cov + k.c3) / den_s
    cache = {"ops": ops, "xc": xc, "yc": yc, "mu_x": mu_x, "mu_y": mu_y,
             "var_y": var_y, "cov": cov, "s_x": s_x, "s_y": s_y,
             "den_l": den_l, "den_c": den_c, "den_s": den_s,
             "lum_c": lum_c, "con_c": con_c, "str_c": str_c}
    return SsimMaps(lum=lum_c.mean(axis=0), con=con_c.mean(axis=0),
                    struc=str_c.mean(axis=0), window=window,
                    constants=constants, cache=cache)


def ssim_backward(maps, d_lum, d_con, d_struc):
    """Gradient of the channel-averaged L, C, S maps w.r.t. the rendered
    patch. Returns (H, W, 3)."""
    c = maps.cache
    if c is None:
        raise LossError("SsimMaps carries no cache")
    ops = c["ops"]
    n_ch = c["xc"].shape[0]
    dy = np.zeros_like(c["yc"])
    for ch in range(n_ch):
        g_l = d_lum / n_ch
        g_c = d_con / n_ch
        g_s = d_struc / n_ch
        mu_x, mu_y = c["mu_x"][ch], c["mu_y"][ch]
        s_x, s_y = c["s_x"][ch], c["s_y"][ch]
        den_l, den_c, den_s = c["den_l"][ch], c["den_c"][ch], c["den_s"][ch]
        lum, con, struc = c["lum_c"][ch], c["con_c"][ch], c["str_c"][ch]
        inv2sy = np.where(s_y > 0.0, 0.5 / np.maximum(s_y, 1e-300), 0.0)
        u_sy = g_c * 2 * s_x / den_c + g_s * (-struc * s_x / den_s)
        u_var = g_c * (-con / den_c) + u_sy * inv2sy
        u_cov = g_s / den_s
        u_mu = (g_l * 2 * (mu_x - lum * mu_y) / den_l
                - 2 * mu_y * u_var - mu_x * u_cov)
        y = c["yc"][ch]
        x = c["xc"][ch]
        dy[ch] = (2 * y * ops.mean_t(u_var) + x * ops.mean_t(u_cov)
                  + ops.mean_t(u_mu))
    return np.moveaxis(dy, 0, -1)


def error_map(maps, mode):
    """Per-pixel SSIM error: product form, conventional form, or None for l2
    (the caller substitutes the squared color error)."""
    if mode == "modified":
        return (1.0 - maps.lum) * (1.0 - maps.con) * (1.0 - maps.struc)
    if mode == "conventional":
        return 1.0 - maps.lum * maps.con * maps.struc
    raise LossError(f"unknown ssim mode {mode!r}")


def error_map_backward(maps, mode, derr):
    if mode == "modified":
        d_lum = -derr * (1.0 - maps.con) * (1.0 - maps.struc)
        d_con = -derr * (1.0 - maps.lum) * (1.0 - maps.struc)
        d_struc = -derr * (1.0 - maps.lum) * (1.0 - maps.con)
    elif mode == "conventional":
        d_lum = -derr * maps.con * maps.struc
        d_con = -derr * maps.lum * maps.struc
        d_struc = -derr * maps.lum * maps.con
    else:
        raise LossError(f"unknown ssim mode {mode!r}")
    return d_lum, d_con, d_struc


# ---------------------------------------------------------------------------
# Per-ray losses


def loss_uncer(err, beta, lam1):
    """err / (2 beta^2) + lam1 * log(beta), averaged over rays.

    err is a constant here (detached); gradients flow only to beta.
    Returns (value, dbeta)."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise LossError("beta must be positive")
    err = np.asarray(err, dtype=np.float64)
    n = beta.size
    value = float(np.mean(err / (2.0 * beta ** 2) + lam1 * np.log(beta)))
    dbeta = (-err / beta ** 3 + lam1 / beta) / n
    return value, dbeta


def loss_nerf(target, rendered, beta):
    """||C - Chat||^2 / (2 beta^2) averaged over rays; beta is detached.

    Returns (value, dchat)."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise LossError("beta must be positive")
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.shape[0]
    sq = (diff ** 2).sum(axis=-1)
    value = float(np.mean(sq / (2.0 * beta ** 2)))
    dchat = diff / (beta[:, None] ** 2 * n)
    return value, dchat


def optimal_beta(err_sq, lam1):
    """Stationary point of the per-ray weighted objective over beta:
    sqrt(err_sq / lam1). Test-oracle utility."""
    if lam1 <= 0:
        raise LossError("lam1 must be positive")
    return np.sqrt(np.asarray(err_sq, dtype=np.float64) / lam1)


def neighbor_sets(feats, eta, view_ids=None):
    """Boolean (N, N) membership: rays whose feature cosine exceeds eta.

    Self-membership always holds. view_ids, when given, restricts sets to
    rays of the same view."""
    if eta >= 1.0:
        raise LossError("eta must be < 1")
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1)
    if np.any(norms == 0.0):
        raise LossError("zero feature vector")
    fn = feats / norms[:, None]
    gram = fn @ fn.T
    m = gram > eta
    if view_ids is not None:
        vid = np.asarray(view_ids)
        m &= vid[:, None] == vid[None, :]
    np.fill_diagonal(m, True)
    return m


def loss_reg(beta, sets):
    """Mean over rays of the beta-variance within each neighbor set.

    Returns (value, dbeta)."""
    beta = np.asarray(beta, dtype=np.float64)
    mf = sets.astype(np.float64)
    n = mf.sum(axis=1)
    bbar = (mf @ beta) / n
    second = (mf @ (beta ** 2)) / n
    var = np.maximum(second - bbar ** 2, 0.0)
    value = float(var.mean())
    n_rays = beta.size
    inv_n = 1.0 / n
    col = mf.T @ inv_n
    colb = mf.T @ (bbar * inv_n)
    dbeta = (2.0 / n_rays) * (beta * col - colb)
    return value, dbeta


# ---------------------------------------------------------------------------
# Combined routed objective


@dataclass
class BatchPatch:
    """One unit of loss computation: gathered targets/features plus the
    rendered colors and a backward closure into the field parameters."""
    colors: np.ndarray        # (P,P,3) target, or (N,3) for random batches
    features: np.ndarray      # (N, C) per-ray feature vectors
    chat: np.ndarray          # (N, 3) rendered colors
    backward: callable        # dchat (N,3) -> accumulates field grads
    view_id: int = 0
    is_patch: bool = True

    @property
    def n_rays(self):
        return self.chat.shape[0]


@dataclass
class LossBundle:
    total: float
    nerf: float
    uncer: float
    reg: float
    ssim_err: np.ndarray     # per-ray error fed to the uncertainty loss
    beta: np.ndarray         # per-ray uncertainty
    l2_err: np.ndarray       # per-ray squared color error
    routing: dict


def _patch_errors(patch, ssim_mode, window, constants):
    """Per-ray error for the uncertainty loss, with an optional backward
    producing d(err)/d(chat) for the coupling ablation."""
    diff = patch.chat - patch.colors.reshape(-1, 3)
    l2 = (diff ** 2).sum(axis=-1)
    if ssim_mode == "l2" or not patch.is_patch:
        def back(derr):
            return 2.0 * diff * derr[:, None]
        return l2, l2, back
    p = patch.colors.shape[0]
    chat_img = patch.chat.reshape(p, p, 3)
    maps = ssim_components(patch.colors, chat_img, window, constants)
    err = error_map(maps, ssim_mode)

    def back(derr):
        d_l, d_c, d_s = error_map_backward(maps, ssim_mode, derr.reshape(p, p))
        return ssim_backward(maps, d_l, d_c, d_s).reshape(-1, 3)

    return err.reshape(-1), l2, back


def total_step_loss(patches, g_spec, g_params, weights, eta,
                    ssim_mode="modified", window=5,
                    constants=SsimConstants(), neighbor_scope="patch",
                    couple_uncer_to_field=False, beta_override=None):
    """One training step's combined objective with routed backward passes.

    Field gradients are accumulated via each patch's backward closure
    (reconstruction loss only, beta treated as constant); the uncertainty
    MLP receives gradients from the uncertainty and regularization losses
    only (rendered colors treated as constants). beta_override freezes the
    uncertainty (baseline mode, no MLP involved).
    """
    feats = np.concatenate([p.features for p in patches], axis=0)
    targets = np.concatenate([p.colors.reshape(-1, 3) for p in patches], axis=0)
    chat = np.concatenate([p.chat for p in patches], axis=0)
    n_total = chat.shape[0]

    if beta_override is not None:
        beta = np.broadcast_to(np.asarray(beta_override, dtype=np.float64),
                               (n_total,)).copy()
        g_cache = None
    else:
        beta, g_cache = numkit.mlp_forward(g_spec, g_params, feats)
        beta = beta[:, 0]

    errs, l2s, err_backs, slices = [], [], [], []
    pos = 0
    for p in patches:
        e, l2, back = _patch_errors(p, ssim_mode, window, constants)
        errs.append(e)
        l2s.append(l2)
        err_backs.append(back)
        slices.append(slice(pos, pos + p.n_rays))
        pos += p.n_rays
    err = np.concatenate(errs)
    l2 = np.concatenate(l2s)

    v_nerf, dchat = loss_nerf(targets, chat, beta)
    v_uncer, dbeta_u = loss_uncer(err, beta, weights.lam1)

    v_reg = 0.0
    dbeta_r = np.zeros_like(beta)
    if weights.lam4 > 0.0:
        if neighbor_scope == "patch":
            for p, sl in zip(patches, slices):
                sets = neighbor_sets(feats[sl], eta)
                v, d = loss_reg(beta[sl], sets)
                v_reg += v * p.n_rays / n_total
                dbeta_r[sl] = d * p.n_rays / n_total
        elif neighbor_scope in ("batch", "view"):
            vids = np.concatenate([
                np.full(p.n_rays, p.view_id) for p in patches]) \
                if neighbor_scope == "view" else None
            sets = neighbor_sets(feats, eta, view_ids=vids)
            v_reg, dbeta_r = loss_reg(beta, sets)
        else:
            raise LossError(f"unknown neighbor scope {neighbor_scope!r}")

    # route: reconstruction -> field
    if weights.lam2 > 0.0:
        for p, sl, back in zip(patches, slices, err_backs):
            d = weights.lam2 * dchat[sl]
            if couple_uncer_to_field:
                # ablation: let the uncertainty loss leak into the field
                derr = weights.lam3 * (1.0 / (2.0 * beta[sl] ** 2)) / n_total
                d = d + back(derr)
            p.backward(d)
    elif couple_uncer_to_field:
        for p, sl, back in zip(patches, slices, err_backs):
            derr = weights.lam3 * (1.0 / (2.0 * beta[sl] ** 2)) / n_total
            p.backward(back(derr))

    # route: uncertainty + regularizer -> G
    if beta_override is None and (weights.lam3 > 0.0 or weights.lam4 > 0.0):
        dbeta = weights.lam3 * dbeta_u + weights.lam4 * dbeta_r
        numkit.mlp_backward(g_spec, g_params, g_cache, dbeta[:, None])

    total = weights.lam2 * v_nerf + weights.lam3 * v_uncer + weights.lam4 * v_reg
    routing = {"nerf": "field", "uncer": "G", "reg": "G",
               "coupled": bool(couple_uncer_to_field)}
    return LossBundle(total=total, nerf=v_nerf, uncer=v_uncer, reg=v_reg,
                      ssim_err=err, beta=beta, l2_err=l2, routing=routing)
