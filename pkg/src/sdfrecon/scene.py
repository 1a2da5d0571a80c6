"""Scene dataset container and directory IO.

Directory layout:
  images/NNNN.png          8-bit RGB views
  normals/NNNN.f32         normal priors, world frame, raw float32 LE,
                           planar (3, H, W)
  gt_normals/NNNN.f32      uncorrupted normals (reference only)
  depths/NNNN.f32          ground-truth depths, raw float32 LE, (H, W)
  poses.txt                camera-to-world 4x4 blocks, row-major floats
  intrinsics.txt           fx fy cx cy
  manifest.json            generation settings, background, normalization
  gt_mesh.ply              ground-truth surface (synthetic scenes)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .renderer import RayBatch, sphere_exit_depth
from .synthetic import pixel_directions

POSE_ORTHO_TOL = 1e-6
CAMERA_NORM_TARGET = 0.85


@dataclass
class SceneDataset:
    """Posed images with per-pixel normal priors, normalized to the unit sphere."""

    images: np.ndarray          # (K, H, W, 3) float64 in [0, 1]
    poses: np.ndarray           # (K, 4, 4) camera-to-world
    intrinsics: tuple           # (fx, fy, cx, cy)
    priors: np.ndarray          # (K, H, W, 3) float64, world frame
    background: np.ndarray      # (3,)
    manifest: dict = field(default_factory=dict)
    _dirs: dict = field(default_factory=dict, repr=False)

    @property
    def n_views(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:3]

    def ray_dirs(self, k):
        """World-frame unit ray directions for every pixel of view k."""
        if k not in self._dirs:
            h, w = self.image_shape
            fx, fy, cx, cy = self.intrinsics
            cam = pixel_directions(w, h, fx, fy, cx, cy)
            self._dirs[k] = cam.reshape(-1, 3) @ self.poses[k, :3, :3].T
        return self._dirs[k]

    def rays_for_pixels(self, k, flat_idx, near=1e-3):
        """RayBatch plus ground-truth colors and priors for chosen pixels."""
        dirs = self.ray_dirs(k)[flat_idx]
        o = np.tile(self.poses[k, :3, 3], (len(flat_idx), 1))
        far = sphere_exit_depth(o, dirs)
        rays = RayBatch(o=o, v=dirs, near=np.full(len(flat_idx), near), far=far)
        h, w = self.image_shape
        gt = self.images[k].reshape(-1, 3)[flat_idx]
        prior = self.priors[k].reshape(-1, 3)[flat_idx]
        return rays, gt, prior


def _write_raw_f32(path, planes):
    arr = np.ascontiguousarray(planes, dtype="<f4")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def _read_raw_f32(path, shape):
    with open(path, "rb") as f:
        data = f.read()
    count = int(np.prod(shape))
    if len(data) != count * 4:
        raise ValueError(f"{path}: expected {count * 4} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(shape)


def write_scene(out_dir, dataset: SceneDataset, images_u8, priors_f32,
                normals_f32=None, depths_f32=None):
    """Serialize a dataset; arrays are written exactly as provided."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "normals", "gt_normals", "depths"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    k_views = images_u8.shape[0]
    for k in range(k_views):
        Image.fromarray(images_u8[k]).save(
            os.path.join(out_dir, "images", f"{k:04d}.png"))
        _write_raw_f32(os.path.join(out_dir, "normals", f"{k:04d}.f32"),
                       np.moveaxis(priors_f32[k], -1, 0))
        if normals_f32 is not None:
            _write_raw_f32(os.path.join(out_dir, "gt_normals", f"{k:04d}.f32"),
                           np.moveaxis(normals_f32[k], -1, 0))
        if depths_f32 is not None:
            _write_raw_f32(os.path.join(out_dir, "depths", f"{k:04d}.f32"),
                           depths_f32[k])
    with open(os.path.join(out_dir, "poses.txt"), "w") as f:
        for k in range(k_views):
            for row in dataset.poses[k]:
                f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            f.write("\n")
    fx, fy, cx, cy = dataset.intrinsics
    with open(os.path.join(out_dir, "intrinsics.txt"), "w") as f:
        f.write(f"{fx:.17g} {fy:.17g} {cx:.17g} {cy:.17g}\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(dataset.manifest, f, indent=2)


def _validate_pose(pose, idx):
    R = pose[:3, :3]
    if not np.all(np.isfinite(pose)):
        raise ValueError(f"pose {idx}: non-finite entries")
    err = np.linalg.norm(R.T @ R - np.eye(3))
    if err >= POSE_ORTHO_TOL:
        raise ValueError(f"pose {idx}: rotation not orthonormal (|R'R - I| = {err:.2e})")
    if np.linalg.det(R) < 0:
        raise ValueError(f"pose {idx}: rotation has det = -1 (reflection)")


def load_scene(path):
    """Load and validate a scene directory; normalizes into the unit sphere.

    Normalization is a pure translation + uniform scale (never a rotation),
    so world-frame normal priors are unaffected. A manifest normalization
    block takes precedence; otherwise cameras are centered on their
    centroid and scaled so the farthest sits at radius CAMERA_NORM_TARGET.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"scene directory not found: {path}")
    img_dir = os.path.join(path, "images")
    nrm_dir = os.path.join(path, "normals")
    img_files = sorted(os.listdir(img_dir)) if os.path.isdir(img_dir) else []
    nrm_files = sorted(os.listdir(nrm_dir)) if os.path.isdir(nrm_dir) else []
    if not img_files:
        raise ValueError(f"{path}: no images found")
    if len(img_files) != len(nrm_files):
        raise ValueError(
            f"{path}: {len(img_files)} images but {len(nrm_files)} normal maps")

    poses_raw = np.loadtxt(os.path.join(path, "poses.txt")).reshape(-1, 4, 4)
    if poses_raw.shape[0] != len(img_files):
        raise ValueError(
            f"{path}: {poses_raw.shape[0]} poses but {len(img_files)} images")
    intr = np.loadtxt(os.path.join(path, "intrinsics.txt")).reshape(-1)
    if intr.size != 4:
        raise ValueError(f"{path}: intrinsics.txt must hold fx fy cx cy")

    manifest = {}
    man_path = os.path.join(path, "manifest.json")
    if os.path.exists(man_path):
        with open(man_path) as f:
            manifest = json.load(f)

    images = []
    priors = []
    for img_f, nrm_f in zip(img_files, nrm_files):
        arr = np.asarray(Image.open(os.path.join(img_dir, img_f)).convert("RGB"))
        images.append(arr.astype(np.float64) / 255.0)
        h, w = arr.shape[:2]
        planes = _read_raw_f32(os.path.join(nrm_dir, nrm_f), (3, h, w))
        prior = np.moveaxis(planes, 0, -1).astype(np.float64)
        if not np.all(np.isfinite(prior)):
            raise ValueError(f"{nrm_f}: non-finite normal prior")
        norms = np.linalg.norm(prior, axis=-1)
        valid = norms > 0.5
        if valid.any() and not np.allclose(norms[valid], 1.0, atol=1e-3):
            raise ValueError(f"{nrm_f}: priors are not unit length")
        priors.append(prior)
    images = np.stack(images)
    priors = np.stack(priors)

    for i, pose in enumerate(poses_raw):
        _validate_pose(pose, i)

    poses = poses_raw.copy()
    norm_block = manifest.get("normalization")
    if norm_block is not None:
        scale = float(norm_block["scale"])
        offset = np.asarray(norm_block["offset"], float)
    else:
        centers = poses[:, :3, 3]
        offset = centers.mean(axis=0)
        spread = np.linalg.norm(centers - offset, axis=1).max()
        scale = 1.0 if spread == 0 else CAMERA_NORM_TARGET / spread
    poses[:, :3, 3] = (poses[:, :3, 3] - offset) * scale
    radii = np.linalg.norm(poses[:, :3, 3], axis=1)
    if np.any(radii >= 1.0):
        raise ValueError(
            f"{path}: camera origins not inside the unit sphere after "
            f"normalization (max radius {radii.max():.3f})")
    manifest["normalization"] = {"scale": scale, "offset": offset.tolist()}

    background = np.asarray(manifest.get("background", [1.0, 1.0, 1.0]), float)
    frame = manifest.get("normals_frame", "world")
    if frame == "camera":
        # estimators emit camera-frame normals; rotate into world
        for k in range(priors.shape[0]):
            R = poses[k, :3, :3]
            flat = priors[k].reshape(-1, 3)
            priors[k] = (flat @ R.T).reshape(priors[k].shape)
    elif frame != "world":
        raise ValueError(f"{path}: unknown normals_frame {frame!r}")

    return SceneDataset(
        images=images,
        poses=poses,
        intrinsics=tuple(float(v) for v in intr),
        priors=priors,
        background=background,
        manifest=manifest,
    )
