"""Ray sampling, SDF-to-density conversion, and compositing.

Transmittance uses the exact exponential form T_i = exp(-sum_{j<i} sigma_j
delta_j), which telescopes against alpha_i = 1 - exp(-sigma_i delta_i) so
that sum_i T_i alpha_i == 1 - prod_i (1 - alpha_i) to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value


@dataclass
class RayBatch:
    """o, v: (B, 3); near, far: (B,). Directions must be unit length."""

    o: np.ndarray
    v: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        self.o = np.atleast_2d(np.asarray(self.o, dtype=np.float64))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        self.near = np.atleast_1d(np.asarray(self.near, dtype=np.float64))
        self.far = np.atleast_1d(np.asarray(self.far, dtype=np.float64))
        norms = np.linalg.norm(self.v, axis=-1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("RayBatch: directions must be unit length")
        if not np.all(self.near < self.far):
            raise ValueError("RayBatch: requires near < far for every ray")

    def __len__(self):
        return self.o.shape[0]


@dataclass
class RenderOutputs:
    """Per-ray composited quantities (graph Values) plus sample data."""

    color: Value          # (B, 3)
    color_vi: Value       # (B, 3)
    depth: Value          # (B,)
    normal: Value         # (B, 3)
    trans: Value          # (B, n) transmittance T_i
    alpha: Value          # (B, n)
    weights: Value        # (B, n) T_i * alpha_i
    opacity: Value        # (B,)
    sdf: Value            # (B, n) per-sample SDF values
    t: np.ndarray         # (B, n) sample depths
    delta: np.ndarray     # (B, n) sample gaps


def sphere_exit_depth(o, v, radius=1.0):
    """Distance to exit a sphere of `radius` from inside, along unit v."""
    o = np.atleast_2d(o)
    v = np.atleast_2d(v)
    b = np.sum(o * v, axis=-1)
    disc = b * b + radius * radius - np.sum(o * o, axis=-1)
    if np.any(disc <= 0):
        raise ValueError("sphere_exit_depth: ray origin outside the sphere")
    return -b + np.sqrt(disc)


# ------------------------------------------------------------------ density

def laplace_density_np(s, beta):
    """Density from signed distance; Laplace-CDF shaped, sharpness beta."""
    s = np.asarray(s, dtype=np.float64)
    u = np.exp(-np.abs(s) / beta)
    return np.where(s > 0, u / (2.0 * beta), (1.0 - 0.5 * u) / beta)


def sdf_to_density(s, beta):
    """Graph version; `s` a Value, `beta` a positive scalar Value."""
    if np.any(beta.data <= 0):
        raise ValueError("sdf_to_density: beta must be positive")
    u = ad.exp(ad.neg(ad.div(ad.absval(s), beta)))
    pos = ad.div(u, ad.mul(Value(2.0), beta))
    neg = ad.div(ad.sub(Value(1.0), ad.mul(Value(0.5), u)), beta)
    return ad.where(s.data > 0, pos, neg)


# ----------------------------------------------------------------- sampling

def stratified_samples(near, far, n, rng):
    """One uniform sample per bin of [near, far); shapes (B,) -> (B, n)."""
    near = np.atleast_1d(near)[:, None]
    far = np.atleast_1d(far)[:, None]
    width = (far - near) / n
    edges = near + width * np.arange(n)[None, :]
    return edges + width * rng.uniform(size=(near.shape[0], n))


def sample_pdf(edges, weights, n, rng):
    """Inverse-CDF draws from a piecewise-constant pdf over interval edges.

    edges: (B, m) ascending; weights: (B, m-1) nonnegative per interval.
    """
    w = weights + 1e-5
    pdf = w / np.sum(w, axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=-1)], axis=-1)
    u = rng.uniform(size=(edges.shape[0], n))
    idx = np.empty(u.shape, dtype=np.int64)
    for b in range(edges.shape[0]):
        idx[b] = np.searchsorted(cdf[b], u[b], side="right") - 1
    idx = np.clip(idx, 0, pdf.shape[-1] - 1)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    denom = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    frac = (u - lo) / denom
    e_lo = np.take_along_axis(edges, idx, axis=-1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=-1)
    return e_lo + frac * (e_hi - e_lo)


def sample_rays(field, rays: RayBatch, n_coarse, n_fine, rng):
    """Stratified + importance sample depths, merged and sorted: (B, n).

    Importance weights come from a gradient-free forward pass of the field
    at the coarse points, so fine samples concentrate near surfaces.
    """
    if n_coarse < 2:
        raise ValueError("sample_rays: need at least two coarse samples")
    t = stratified_samples(rays.near, rays.far, n_coarse, rng)
    if n_fine > 0:
        x = rays.o[:, None, :] + t[..., None] * rays.v[:, None, :]
        s = field.sdf_np(x)
        sigma = laplace_density_np(s, field.beta_np)
        delta = np.diff(t, axis=-1)
        delta = np.concatenate([delta, (rays.far[:, None] - t[:, -1:])], axis=-1)
        sd = sigma * np.maximum(delta, 0.0)
        acc = np.cumsum(sd, axis=-1)
        trans = np.exp(-np.concatenate([np.zeros_like(acc[:, :1]), acc[:, :-1]], axis=-1))
        wts = trans * (1.0 - np.exp(-sd))
        interval_w = 0.5 * (wts[:, :-1] + wts[:, 1:])
        t_fine = sample_pdf(t, interval_w, n_fine, rng)
        t = np.concatenate([t, t_fine], axis=-1)
        t = np.sort(t, axis=-1)
        # enforce strictly increasing depths (duplicate draws are possible
        # in principle through searchsorted edge hits)
        eps = np.finfo(np.float64).eps
        for _ in range(2):
            dup = np.diff(t, axis=-1) <= 0
            if not dup.any():
                break
            t[:, 1:][dup] = np.nextafter(t[:, 1:][dup], np.inf)
    return t


# --------------------------------------------------------------- composite

def composite(t, far, sigma, c, c_vi, n):
    """Alpha-composite color, view-independent color, depth and normal.

    t: (B, n) ascending sample depths (ndarray); far: (B,) ray end;
    sigma: Value (B, n); c, c_vi, n: Values (B, n, 3).
    Returns a RenderOutputs with weights w_i = T_i alpha_i shared by all
    composited quantities.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ValueError("composite: sample depths must be strictly increasing")
    B, ns = t.shape
    delta = np.concatenate(
        [np.diff(t, axis=-1), np.maximum(np.atleast_1d(far)[:, None] - t[:, -1:], 1e-12)],
        axis=-1,
    )
    sd = ad.mul(sigma, Value(delta))
    alpha = ad.sub(Value(1.0), ad.exp(ad.neg(sd)))
    acc = ad.cumsum(sd, axis=1)
    shifted = ad.concat([Value(np.zeros((B, 1))), ad.narrow(acc, 1, 0, ns - 1)], axis=1)
    trans = ad.exp(ad.neg(shifted))
    w = ad.mul(trans, alpha)
    w3 = ad.reshape(w, (B, ns, 1))
    color = ad.vsum(ad.mul(w3, c), axis=1)
    color_vi = ad.vsum(ad.mul(w3, c_vi), axis=1)
    normal = ad.vsum(ad.mul(w3, n), axis=1)
    depth = ad.vsum(ad.mul(w, Value(t)), axis=1)
    opacity = ad.vsum(w, axis=1)
    return dict(
        color=color, color_vi=color_vi, depth=depth, normal=normal,
        trans=trans, alpha=alpha, weights=w, opacity=opacity,
        t=t, delta=delta,
    )


def render_rays(field, rays: RayBatch, t):
    """Full render of a batch along precomputed sample depths t (B, n)."""
    B, ns = t.shape
    x_np = rays.o[:, None, :] + t[..., None] * rays.v[:, None, :]
    x = ad.leaf(x_np.reshape(-1, 3))
    s_flat, z, n_flat = field.eval_geometry(x)
    v_np = np.broadcast_to(rays.v[:, None, :], (B, ns, 3)).reshape(-1, 3)
    c_vd, c_vi, c = field.eval_color(x, n_flat, Value(v_np.copy()), z)
    sigma = sdf_to_density(ad.reshape(s_flat, (B, ns)), field.beta())
    parts = composite(
        t, rays.far, sigma,
        ad.reshape(c, (B, ns, 3)),
        ad.reshape(c_vi, (B, ns, 3)),
        ad.reshape(n_flat, (B, ns, 3)),
    )
    return RenderOutputs(
        color=parts["color"], color_vi=parts["color_vi"], depth=parts["depth"],
        normal=parts["normal"], trans=parts["trans"], alpha=parts["alpha"],
        weights=parts["weights"], opacity=parts["opacity"],
        sdf=ad.reshape(s_flat, (B, ns)), t=parts["t"], delta=parts["delta"],
    )
