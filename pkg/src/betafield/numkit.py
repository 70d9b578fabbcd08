"""Minimal numerical core: flat parameter store, hand-rolled MLP with manual
backprop, Adam, and a finite-difference gradient checker.

Everything is float64 by default; gradient checks are always float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

CKPT_MAGIC = b"RFCK"
CKPT_VERSION = 1


class NumkitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ParamStore


class ParamStore:
    """Flat float64 value/grad arrays with named, disjoint segments."""

    def __init__(self):
        self.values = np.zeros(0, dtype=np.float64)
        self.grads = np.zeros(0, dtype=np.float64)
        self._segments = {}  # name -> (offset, shape)

    def add(self, name, shape, init=None):
        if name in self._segments:
            raise NumkitError(f"duplicate segment {name!r}")
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape)) if shape else 1
        offset = self.values.size
        self.values = np.concatenate([self.values, np.zeros(size)])
        self.grads = np.concatenate([self.grads, np.zeros(size)])
        self._segments[name] = (offset, shape)
        if init is not None:
            init = np.asarray(init, dtype=np.float64)
            if init.shape != shape:
                raise NumkitError(
                    f"segment {name!r}: init shape {init.shape} != {shape}")
            self.view(name)[...] = init
        return self

    @property
    def segments(self):
        return dict(self._segments)

    def view(self, name):
        offset, shape = self._segments[name]
        size = int(np.prod(shape)) if shape else 1
        return self.values[offset:offset + size].reshape(shape)

    def grad_view(self, name):
        offset, shape = self._segments[name]
        size = int(np.prod(shape)) if shape else 1
        return self.grads[offset:offset + size].reshape(shape)

    def segment_of_index(self, flat_index):
        for name, (offset, shape) in self._segments.items():
            size = int(np.prod(shape)) if shape else 1
            if offset <= flat_index < offset + size:
                return name
        raise IndexError(flat_index)

    def zero_grads(self):
        self.grads[:] = 0.0

    def copy(self):
        other = ParamStore()
        other.values = self.values.copy()
        other.grads = self.grads.copy()
        other._segments = dict(self._segments)
        return other

    def save(self, path):
        save_segments(path, [(n, self.view(n)) for n in self._segments])

    @classmethod
    def load(cls, path):
        store = cls()
        for name, arr in load_segments(path):
            store.add(name, arr.shape, init=arr)
        return store


def save_segments(path, named_arrays):
    """Write (name, float64 array) pairs in the binary checkpoint format."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in named_arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_segments(path):
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise NumkitError(
                f"truncated checkpoint: {what} at byte {pos} of {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise NumkitError("bad checkpoint magic")
    version, = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise NumkitError(f"unsupported checkpoint version {version}")
    out = []
    while pos < len(data):
        nlen, = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        rank, = struct.unpack("<I", take(4, "shape rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        payload = take(8 * size, f"payload of {name!r}")
        out.append((name, np.frombuffer(payload, dtype="<f8").reshape(shape).copy()))
    return out


# ---------------------------------------------------------------------------
# Shallow MLP with manual backprop


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = "relu"
    output_transform: str = "identity"
    shift: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise NumkitError("all MLP dims must be >= 1")
        if self.activation != "relu":
            raise NumkitError(f"unknown activation {self.activation!r}")
        if self.output_transform not in ("identity", "softplus_shifted"):
            raise NumkitError(f"unknown transform {self.output_transform!r}")

    @property
    def layer_dims(self):
        return (self.in_dim,) + tuple(self.hidden) + (self.out_dim,)


def mlp_init(spec, rng, prefix=""):
    """He-initialized ParamStore with segments w0,b0,w1,b1,..."""
    store = ParamStore()
    mlp_add_params(store, spec, rng, prefix)
    return store


def mlp_add_params(store, spec, rng, prefix=""):
    dims = spec.layer_dims
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)
        store.add(f"{prefix}w{i}", (dout, din), init=w)
        store.add(f"{prefix}b{i}", (dout,))


def _softplus(x):
    return np.logaddexp(0.0, x)


def mlp_forward(spec, params, x, prefix=""):
    """Batched forward pass. x is (N, in_dim) or (in_dim,).

    Returns (y, cache); cache feeds mlp_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != spec.in_dim:
        raise NumkitError(
            f"input dim {x.shape[1]} != spec.in_dim {spec.in_dim}")
    n_layers = len(spec.hidden) + 1
    acts = [x]
    pre = []
    h = x
    for i in range(n_layers):
        w = params.view(f"{prefix}w{i}")
        b = params.view(f"{prefix}b{i}")
        if w.shape[1] != h.shape[1]:
            raise NumkitError(f"layer {i}: weight shape {w.shape} does not "
                              f"match input width {h.shape[1]}")
        z = h @ w.T + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    if spec.output_transform == "softplus_shifted":
        y = spec.shift + _softplus(h)
    else:
        y = h
    cache = {"acts": acts, "pre": pre, "squeeze": squeeze}
    return (y[0] if squeeze else y), cache


def mlp_backward(spec, params, cache, dy, prefix=""):
    """Accumulates dL/dparams into params.grads, returns dL/dx."""
    if cache is None:
        raise NumkitError("missing forward cache")
    dy = np.asarray(dy, dtype=np.float64)
    if cache["squeeze"]:
        dy = dy[None, :]
    n_layers = len(spec.hidden) + 1
    z_out = cache["pre"][-1]
    if spec.output_transform == "softplus_shifted":
        g = dy * expit(z_out)
    else:
        g = dy
    for i in range(n_layers - 1, -1, -1):
        w = params.view(f"{prefix}w{i}")
        a = cache["acts"][i]
        params.grad_view(f"{prefix}w{i}")[...] += g.T @ a
        params.grad_view(f"{prefix}b{i}")[...] += g.sum(axis=0)
        g = g @ w
        if i > 0:
            g = g * (cache["pre"][i - 1] > 0.0)
    return g[0] if cache["squeeze"] else g


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls(m=np.zeros_like(params.values),
                   v=np.zeros_like(params.values), lr=lr, **kw)


def adam_step(params, state):
    """Standard Adam update; clears grads and increments t."""
    g = params.grads
    if g.shape != state.m.shape:
        raise NumkitError("Adam state does not match parameter count")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumkitError(
            f"non-finite gradient in segment {params.segment_of_index(bad)!r}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    params.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if not np.all(np.isfinite(params.values)):
        bad = int(np.flatnonzero(~np.isfinite(params.values))[0])
        raise NumkitError(
            f"non-finite value in segment {params.segment_of_index(bad)!r}")
    params.zero_grads()
    return params


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    analytic: np.ndarray = field(repr=False, default=None)
    numeric: np.ndarray = field(repr=False, default=None)

    def ok(self, tol):
        return self.max_rel_err < tol


def grad_check(f, params, h=1e-5):
    """Compare params.grads (filled by the caller's analytic backward)
    against central finite differences of the scalar f(params).
    """
    analytic = params.grads.copy()
    numeric = np.zeros_like(analytic)
    base = params.values.copy()
    for i in range(base.size):
        params.values[i] = base[i] + h
        fp = f(params)
        params.values[i] = base[i] - h
        fm = f(params)
        params.values[i] = base[i]
        numeric[i] = (fp - fm) / (2.0 * h)
    params.values[:] = base
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(max_rel_err=float(rel.max(initial=0.0)),
                           worst_index=worst, analytic=analytic,
                           numeric=numeric)
