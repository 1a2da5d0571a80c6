"""Analytic CSG scenes, sphere tracing, and synthetic dataset generation.

Scenes are unions/intersections/differences of boxes, spheres, cylinders
and planes with exact primitive SDFs. Ground-truth views are rendered by
sphere tracing and shaded with a directional light plus ambient term;
normal-prior maps can be corrupted by rotating a chosen fraction of pixels
by an exact angle about a random axis perpendicular to the normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SPHERE_TRACE_MAX_STEPS = 256
SPHERE_TRACE_EPS = 1e-4


# ---------------------------------------------------------------- CSG tree

class Node:
    def evaluate(self, x):
        """(sdf (N,), albedo (N, 3)) at points x (N, 3)."""
        raise NotImplementedError

    def sdf_only(self, x):
        """Distance without albedo bookkeeping (hot path for tracing)."""
        return self.evaluate(x)[0]

    def sdf(self, x):
        return self.sdf_only(np.atleast_2d(x))


@dataclass
class Sphere(Node):
    center: tuple
    radius: float
    albedo: tuple = (0.7, 0.7, 0.7)

    def evaluate(self, x):
        d = self.sdf_only(x)
        return d, np.tile(np.asarray(self.albedo, float), (x.shape[0], 1))

    def sdf_only(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box(Node):
    center: tuple
    half: tuple
    albedo: tuple = (0.7, 0.7, 0.7)
    rot_z_deg: float = 0.0

    def evaluate(self, x):
        return self.sdf_only(x), np.tile(np.asarray(self.albedo, float),
                                         (x.shape[0], 1))

    def sdf_only(self, x):
        p = x - np.asarray(self.center)
        if self.rot_z_deg:
            a = np.deg2rad(self.rot_z_deg)
            c, s = np.cos(a), np.sin(a)
            p = p @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]).T
        q = np.abs(p) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class Cylinder(Node):
    """Axis-aligned (z) capped cylinder."""

    center: tuple
    radius: float
    half_height: float
    albedo: tuple = (0.7, 0.7, 0.7)

    def evaluate(self, x):
        return self.sdf_only(x), np.tile(np.asarray(self.albedo, float),
                                         (x.shape[0], 1))

    def sdf_only(self, x):
        p = x - np.asarray(self.center)
        d_r = np.linalg.norm(p[:, :2], axis=-1) - self.radius
        d_z = np.abs(p[:, 2]) - self.half_height
        q = np.stack([d_r, d_z], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class Plane(Node):
    """Half-space n . x - d <= 0 is solid."""

    normal: tuple
    offset: float
    albedo: tuple = (0.7, 0.7, 0.7)

    def evaluate(self, x):
        return self.sdf_only(x), np.tile(np.asarray(self.albedo, float),
                                         (x.shape[0], 1))

    def sdf_only(self, x):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        return x @ n - self.offset


@dataclass
class Union(Node):
    children: list

    def evaluate(self, x):
        dists, albs = zip(*(c.evaluate(x) for c in self.children))
        dists = np.stack(dists, axis=0)
        albs = np.stack(albs, axis=0)
        pick = np.argmin(dists, axis=0)
        idx = np.arange(x.shape[0])
        return dists[pick, idx], albs[pick, idx]

    def sdf_only(self, x):
        d = self.children[0].sdf_only(x)
        for c in self.children[1:]:
            d = np.minimum(d, c.sdf_only(x))
        return d


@dataclass
class Intersection(Node):
    children: list

    def evaluate(self, x):
        dists, albs = zip(*(c.evaluate(x) for c in self.children))
        dists = np.stack(dists, axis=0)
        albs = np.stack(albs, axis=0)
        pick = np.argmax(dists, axis=0)
        idx = np.arange(x.shape[0])
        return dists[pick, idx], albs[pick, idx]

    def sdf_only(self, x):
        d = self.children[0].sdf_only(x)
        for c in self.children[1:]:
            d = np.maximum(d, c.sdf_only(x))
        return d


@dataclass
class Difference(Node):
    base: Node
    cut: Node

    def evaluate(self, x):
        d_a, alb = self.base.evaluate(x)
        d_b, _ = self.cut.evaluate(x)
        return np.maximum(d_a, -d_b), alb

    def sdf_only(self, x):
        return np.maximum(self.base.sdf_only(x), -self.cut.sdf_only(x))


@dataclass
class AnalyticScene:
    root: Node
    light_dir: tuple = (0.35, -0.3, 0.89)
    ambient: float = 0.2
    background: tuple = (1.0, 1.0, 1.0)
    specular: float = 0.0          # Phong strength; 0 disables
    phong_exponent: float = 32.0

    def sdf(self, x):
        return self.root.sdf(x)

    def albedo(self, x):
        return self.root.evaluate(np.atleast_2d(x))[1]

    def normal(self, x, h=1e-5):
        """Central-difference gradient of the SDF, normalized."""
        x = np.atleast_2d(x)
        g = np.empty_like(x)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[:, a] = (self.sdf(x + e) - self.sdf(x - e)) / (2.0 * h)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    def shade(self, points, normals, view_dirs):
        """Lambertian + ambient, optional Phong specular toward the light."""
        alb = self.albedo(points)
        l = np.asarray(self.light_dir, float)
        l = l / np.linalg.norm(l)
        lam = np.maximum(normals @ l, 0.0)
        color = alb * (self.ambient + (1.0 - self.ambient) * lam)[:, None]
        if self.specular > 0.0:
            refl = 2.0 * (normals @ l)[:, None] * normals - l
            spec = np.maximum(-np.sum(refl * view_dirs, axis=-1), 0.0) ** self.phong_exponent
            color = color + self.specular * spec[:, None]
        return color


def sphere_trace(scene: AnalyticScene, origins, dirs, t_max=4.0,
                 max_steps=SPHERE_TRACE_MAX_STEPS, eps=SPHERE_TRACE_EPS):
    """March rays by their SDF value until |sdf| < eps or t exceeds t_max.

    Returns (hit (N,), depth (N,), normal (N, 3), albedo (N, 3)); missed
    rays report depth 0 and zero normal/albedo.
    """
    origins = np.atleast_2d(np.asarray(origins, float))
    dirs = np.atleast_2d(np.asarray(dirs, float))
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = scene.sdf(p)
        idx = np.flatnonzero(active)
        newly_hit = d < eps
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        t[idx[~newly_hit]] += d[~newly_hit]
        overshoot = t > t_max
        active &= ~overshoot
    depth = np.where(hit, t, 0.0)
    normal = np.zeros_like(origins)
    albedo = np.zeros_like(origins)
    if hit.any():
        pts = origins[hit] + depth[hit, None] * dirs[hit]
        normal[hit] = scene.normal(pts)
        albedo[hit] = scene.albedo(pts)
    return hit, depth, normal, albedo


# ------------------------------------------------------------ view layout

def look_at_pose(eye, target, up_hint=(0.0, 0.0, 1.0)):
    """Camera-to-world 4x4; camera looks along +z, x right, y down."""
    eye = np.asarray(eye, float)
    forward = np.asarray(target, float) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up_hint, float)
    right = np.cross(up, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick an arbitrary right
        right = np.cross(np.array([1.0, 0.0, 0.0]), forward)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = eye
    return pose


def viewing_sphere_poses(n_views, radius, target=(0.0, 0.0, 0.0),
                         elev_range_deg=(-40.0, 60.0)):
    """Fibonacci-spiral viewpoints on a spherical band, all looking at target."""
    lo, hi = np.deg2rad(elev_range_deg[0]), np.deg2rad(elev_range_deg[1])
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(n_views):
        frac = (i + 0.5) / n_views
        elev = lo + (hi - lo) * frac
        azim = golden * i
        eye = np.array([
            radius * np.cos(elev) * np.cos(azim),
            radius * np.cos(elev) * np.sin(azim),
            radius * np.sin(elev),
        ]) + np.asarray(target, float)
        poses.append(look_at_pose(eye, target))
    return np.stack(poses)


def pixel_directions(width, height, fx, fy, cx, cy):
    """Unit camera-frame directions for every pixel center, (H, W, 3)."""
    u = (np.arange(width) + 0.5 - cx) / fx
    v = (np.arange(height) + 0.5 - cy) / fy
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


# -------------------------------------------------------------- corruption

def corrupt_normals(normals, p, kappa_deg, rng):
    """Rotate round(p * H * W) pixels' normals by exactly kappa degrees.

    The rotation axis is a uniformly random direction in each normal's
    tangent plane, so the angle between the old and new normal is exactly
    kappa. Zero normals (ray misses) are left untouched.
    """
    h, w, _ = normals.shape
    out = normals.copy()
    k = int(round(p * h * w))
    if k == 0:
        return out
    flat = out.reshape(-1, 3)
    idx = rng.choice(h * w, size=k, replace=False)
    n = flat[idx]
    valid = np.linalg.norm(n, axis=-1) > 0.5
    n = n[valid]
    sel = idx[valid]
    # random unit axis orthogonal to each normal
    raw = rng.normal(size=n.shape)
    axis = raw - (np.sum(raw * n, axis=-1, keepdims=True)) * n
    nrm = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = axis / np.maximum(nrm, 1e-12)
    ang = np.deg2rad(kappa_deg)
    # Rodrigues; axis orthogonal to n so the (1-cos) term vanishes
    rotated = n * np.cos(ang) + np.cross(axis, n) * np.sin(ang)
    flat[sel] = rotated
    return out


# ---------------------------------------------------------------- presets

def _room_scene():
    parts = [
        Box(center=(0.0, 0.0, -0.32), half=(0.50, 0.42, 0.03),
            albedo=(0.60, 0.55, 0.48)),                                # floor
        Box(center=(0.0, 0.40, 0.0), half=(0.50, 0.03, 0.34),
            albedo=(0.45, 0.62, 0.75)),                                # back wall
        Box(center=(-0.47, 0.0, 0.0), half=(0.03, 0.42, 0.34),
            albedo=(0.72, 0.52, 0.42)),                                # left wall
        Box(center=(0.47, 0.0, 0.0), half=(0.03, 0.42, 0.34),
            albedo=(0.50, 0.68, 0.45)),                                # right wall
        Box(center=(0.16, 0.08, -0.18), half=(0.12, 0.09, 0.11),
            albedo=(0.70, 0.30, 0.25), rot_z_deg=20.0),                # table
        Sphere(center=(-0.18, 0.02, -0.19), radius=0.10,
               albedo=(0.25, 0.35, 0.75)),                             # ball
        Cylinder(center=(0.0, 0.26, -0.09), radius=0.06, half_height=0.20,
                 albedo=(0.30, 0.60, 0.55)),                           # column
    ]
    return AnalyticScene(root=Union(parts))


def _sphere_column_scene():
    parts = [
        Box(center=(0.0, 0.0, -0.30), half=(0.45, 0.45, 0.04),
            albedo=(0.55, 0.55, 0.50)),
        Cylinder(center=(0.0, 0.0, -0.10), radius=0.08, half_height=0.16,
                 albedo=(0.65, 0.45, 0.30)),
        Sphere(center=(0.0, 0.0, 0.16), radius=0.10, albedo=(0.30, 0.40, 0.70)),
    ]
    return AnalyticScene(root=Union(parts))


def _two_objects_scene():
    parts = [
        Box(center=(0.0, 0.0, -0.30), half=(0.45, 0.45, 0.04),
            albedo=(0.55, 0.52, 0.48)),
        Box(center=(0.16, 0.0, -0.16), half=(0.11, 0.11, 0.10),
            albedo=(0.70, 0.35, 0.30), rot_z_deg=30.0),
        Sphere(center=(-0.17, 0.02, -0.14), radius=0.12, albedo=(0.30, 0.55, 0.40)),
    ]
    return AnalyticScene(root=Union(parts))


SCENE_PRESETS = {
    "box-room": _room_scene,
    "sphere-column": _sphere_column_scene,
    "two-objects": _two_objects_scene,
}

CAMERA_RADIUS = 0.85
FOV_DEG = 60.0


def generate_synthetic(preset, out_dir, n_views, resolution, corruption_p=0.0,
                       corruption_deg=30.0, seed=0, specular=0.0):
    """Render a preset to a scene directory; returns the in-memory dataset.

    Writes images/*.png, normals/*.f32 (corrupted priors), gt_normals/*.f32,
    depths/*.f32, poses.txt, intrinsics.txt, manifest.json and gt_mesh.ply.
    The returned dataset holds exactly the arrays that were serialized.
    """
    from .extraction import bake_grid_from_callable, marching_cubes, write_ply
    from .scene import SceneDataset, write_scene

    if preset not in SCENE_PRESETS:
        raise ValueError(
            f"unknown preset {preset!r}; available: {sorted(SCENE_PRESETS)}"
        )
    scene = SCENE_PRESETS[preset]()
    scene.specular = specular
    rng = np.random.default_rng([int(seed), 0x5CE11E])

    h = w = int(resolution)
    fx = fy = 0.5 * w / np.tan(0.5 * np.deg2rad(FOV_DEG))
    cx = cy = 0.5 * w
    poses = viewing_sphere_poses(n_views, CAMERA_RADIUS)
    cam_dirs = pixel_directions(w, h, fx, fy, cx, cy)

    images = np.zeros((n_views, h, w, 3))
    normals = np.zeros((n_views, h, w, 3), dtype=np.float32)
    priors = np.zeros((n_views, h, w, 3), dtype=np.float32)
    depths = np.zeros((n_views, h, w), dtype=np.float32)
    for k in range(n_views):
        R = poses[k, :3, :3]
        o = poses[k, :3, 3]
        dirs = cam_dirs.reshape(-1, 3) @ R.T
        origins = np.tile(o, (dirs.shape[0], 1))
        hit, depth, normal, _ = sphere_trace(scene, origins, dirs)
        pts = origins + depth[:, None] * dirs
        color = np.where(hit[:, None], scene.shade(pts, normal, dirs),
                         np.asarray(scene.background))
        images[k] = color.reshape(h, w, 3)
        normals[k] = normal.reshape(h, w, 3).astype(np.float32)
        depths[k] = depth.reshape(h, w).astype(np.float32)
        prior = corrupt_normals(normal.reshape(h, w, 3), corruption_p,
                                corruption_deg, rng)
        priors[k] = prior.astype(np.float32)

    # quantize images exactly as they will live on disk
    images_q = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)

    manifest = {
        "preset": preset,
        "n_views": int(n_views),
        "resolution": int(resolution),
        "corruption": {"p": float(corruption_p), "kappa_deg": float(corruption_deg)},
        "seed": int(seed),
        "background": list(scene.background),
        "light_dir": list(scene.light_dir),
        "ambient": float(scene.ambient),
        "specular": float(specular),
        "normals_frame": "world",
        "normalization": {"scale": 1.0, "offset": [0.0, 0.0, 0.0]},
        "camera_radius": CAMERA_RADIUS,
        "fov_deg": FOV_DEG,
    }
    dataset = SceneDataset(
        images=images_q.astype(np.float64) / 255.0,
        poses=poses,
        intrinsics=(fx, fy, cx, cy),
        priors=priors.astype(np.float64),
        background=np.asarray(scene.background, float),
        manifest=manifest,
    )
    write_scene(out_dir, dataset, images_q, priors, normals, depths)

    grid, coords = bake_grid_from_callable(scene.sdf, 256)
    mesh = marching_cubes(grid, coords)
    write_ply(f"{out_dir}/gt_mesh.ply", mesh)
    return dataset
