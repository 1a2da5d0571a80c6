"""Virtual-viewpoint generation and the two multi-view consistency residuals.

Each source ray back-projects its rendered depth to a target point; a
virtual viewpoint near the source origin looks at that point, the virtual
ray is rendered, and depth/color agreement between the two rays becomes a
training signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .renderer import RayBatch, sphere_exit_depth

MIN_TARGET_DISTANCE = 1e-6
MAX_ORIGIN_NORM = 0.999


@dataclass
class VirtualRays:
    origins: np.ndarray      # (B, 3)
    dirs: np.ndarray         # (B, 3) unit, toward the target points
    valid: np.ndarray        # (B,) bool; False rows are degenerate pairs
    target_np: np.ndarray    # (B, 3) detached target points


def back_project(o, v, depth):
    """Target points x_t = o + depth * v; differentiable in depth.

    Rows with nonpositive depth are flagged invalid and must be masked out
    of any residual by the caller.
    """
    B = np.atleast_2d(o).shape[0]
    d3 = ad.reshape(depth, (B, 1))
    x_t = ad.add(Value(np.atleast_2d(o)), ad.mul(d3, Value(np.atleast_2d(v))))
    return x_t, depth.data > 0.0


def gen_virtual_views(o, x_t_np, rho, rng, max_attempts=8):
    """Virtual origins uniform in a ball of radius rho around each source
    origin, aimed at the target points.

    Rows are redrawn (up to max_attempts) while the origin falls outside
    the unit bounding sphere or lands on the target point; rows that never
    succeed are flagged invalid.
    """
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    x_t_np = np.atleast_2d(np.asarray(x_t_np, dtype=np.float64))
    B = o.shape[0]
    o_v = o.copy()
    ok = np.zeros(B, dtype=bool)
    for _ in range(max_attempts):
        need = ~ok
        if not need.any():
            break
        k = int(need.sum())
        d = rng.normal(size=(k, 3))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        rad = rho * rng.uniform(size=(k, 1)) ** (1.0 / 3.0)
        cand = o[need] + rad * d
        dist = np.linalg.norm(x_t_np[need] - cand, axis=1)
        good = (dist >= MIN_TARGET_DISTANCE) & (np.linalg.norm(cand, axis=1) < MAX_ORIGIN_NORM)
        rows = np.flatnonzero(need)[good]
        o_v[rows] = cand[good]
        ok[rows] = True
    dirs = x_t_np - o_v
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    safe = np.where(norms < MIN_TARGET_DISTANCE, 1.0, norms)
    dirs = dirs / safe
    # for invalid rows keep some unit direction so downstream shapes hold
    bad = norms[:, 0] < MIN_TARGET_DISTANCE
    dirs[bad] = np.array([0.0, 0.0, 1.0])
    return VirtualRays(origins=o_v, dirs=dirs, valid=ok, target_np=x_t_np.copy())


def virtual_ray_batch(vr: VirtualRays, near=1e-3):
    far = sphere_exit_depth(vr.origins, vr.dirs)
    return RayBatch(o=vr.origins, v=vr.dirs, near=np.full(len(vr.valid), near), far=far)


def target_distance(x_t, o_v, live_grad=True):
    """D-bar = ||x_t - o_v||; a graph Value when live_grad, constant otherwise.

    The live path is what lets the consistency residual refine the source
    ray's rendered depth in addition to the virtual ray's.
    """
    if live_grad:
        diff = ad.sub(x_t, Value(o_v))
        return ad.l2norm(diff, axis=1)
    return Value(np.linalg.norm(x_t.data - o_v, axis=1))


def geometric_residual(d_virtual, d_bar):
    """Per-pair 0.5 * (D_hat(r_v) - D_bar(r_v))^2 as a (B,) Value."""
    diff = ad.sub(d_virtual, d_bar)
    return ad.mul(Value(0.5), ad.mul(diff, diff))


def photometric_residual(c_vi_source, c_vi_virtual):
    """Per-pair L1 difference of view-independent composited colors, (B,)."""
    return ad.vsum(ad.absval(ad.sub(c_vi_source, c_vi_virtual)), axis=1)
