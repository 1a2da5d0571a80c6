"""Implicit scene representation.

A geometry MLP maps a 3D point to a signed distance and a feature vector;
two color MLP heads map point attributes to view-dependent and
view-independent RGB. Density sharpness is a trainable positive scalar
stored as its log. All parameters are float64 autodiff leaves.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

CKPT_MAGIC = b"SDFRECONCKPT1\n"


@dataclass
class FieldConfig:
    geo_width: int = 128
    geo_depth: int = 4
    feature_width: int = 64
    color_width: int = 128
    color_depth: int = 2
    enc_levels_pos: int = 6
    enc_levels_dir: int = 4
    r_init: float = 0.6
    softplus_sharpness: float = 100.0
    beta_init: float = 0.1
    color_decomposition: bool = True


def encode_width(levels):
    return 3 + 6 * levels


def positional_encode_np(x, levels):
    """Frequency encoding [x, sin(2^k x), cos(2^k x)]; levels=0 is identity."""
    if levels == 0:
        return np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(levels):
        fx = (2.0 ** k) * x
        parts.append(np.sin(fx))
        parts.append(np.cos(fx))
    return np.concatenate(parts, axis=-1)


def positional_encode(x, levels):
    """Graph version of the frequency encoding."""
    if levels == 0:
        return x
    parts = [x]
    for k in range(levels):
        fx = ad.mul(x, Value(2.0 ** k))
        parts.append(ad.sin(fx))
        parts.append(ad.cos(fx))
    return ad.concat(parts, axis=-1)


class _Linear:
    def __init__(self, name, w, b):
        self.name = name
        self.w = ad.leaf(w)
        self.b = ad.leaf(b)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def apply_np(self, x):
        return x @ self.w.data + self.b.data


class GeometryNet:
    """MLP from encoded position to (signed distance, feature vector).

    Initialized so the zero level set approximates a centered sphere of
    radius ``r_init``: the encoding columns of the first and skip layers
    start at zero so the raw xyz channel dominates early on, first-layer
    columns come in +/- pairs to cancel the linear ripple term, the output
    scale is calibrated on unit-sphere probes, and the draw is retried
    deterministically until the level set passes a sign-band check.
    """

    BAND_TOL = 0.1
    BAND_FRACTION = 0.995
    MAX_INIT_DRAWS = 64

    def __init__(self, cfg: FieldConfig, seed):
        self.cfg = cfg
        in_dim = encode_width(cfg.enc_levels_pos)
        self.in_dim = in_dim
        self.skip = cfg.geo_depth // 2
        best = None
        best_frac = -1.0
        for attempt in range(self.MAX_INIT_DRAWS):
            rng = np.random.default_rng([int(seed), 0x6E0, attempt])
            self._draw_layers(rng)
            self._calibrate_init_scale()
            frac = self._band_fraction()
            if frac > best_frac:
                best, best_frac = self.layers, frac
            if frac >= self.BAND_FRACTION:
                break
        # tiny configurations may never reach the threshold; keep the best draw
        self.layers = best
        self.init_band_fraction = best_frac

    def _draw_layers(self, rng):
        cfg = self.cfg
        in_dim = self.in_dim
        dims = [in_dim] + [cfg.geo_width] * cfg.geo_depth + [1 + cfg.feature_width]
        self.layers = []
        for l in range(len(dims) - 1):
            d_in, d_out = dims[l], dims[l + 1]
            if l == self.skip and l not in (0, len(dims) - 2):
                d_in += in_dim
            if l == len(dims) - 2:
                w = rng.normal(np.sqrt(np.pi) / np.sqrt(d_in), 1e-4, size=(d_in, d_out))
                b = np.full(d_out, -cfg.r_init)
            else:
                w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(d_out), size=(d_in, d_out))
                b = np.zeros(d_out)
                if l == 0:
                    w[3:, :] = 0.0
                    half = d_out // 2
                    w[:, half:2 * half] = -w[:, :half]
                elif l == self.skip:
                    w[-(in_dim - 3):, :] = 0.0
            self.layers.append(_Linear(f"geo.{l}", w, b))

    def _calibrate_init_scale(self):
        """Rescale the output layer so the mean SDF on the unit sphere is
        1 - r_init. s(0) = -r_init is exact and unaffected because only
        weights, not biases, are scaled."""
        probe_rng = np.random.default_rng(0x5CA1E)
        dirs = probe_rng.normal(size=(1024, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        m1 = float(self.sdf_np(dirs).mean())
        k = 1.0 / (m1 + self.cfg.r_init)
        self.layers[-1].w.data = self.layers[-1].w.data * k

    def _band_fraction(self):
        """Fraction of ball probes outside r_init +/- BAND_TOL with correct sign."""
        rng = np.random.default_rng(0xBA2D)
        p = rng.normal(size=(8192, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        p *= rng.uniform(0.0, 1.0, size=(8192, 1)) ** (1.0 / 3.0)
        r = np.linalg.norm(p, axis=1)
        sel = np.abs(r - self.cfg.r_init) > self.BAND_TOL
        s = self.sdf_np(p[sel])
        return float((np.sign(s) == np.sign(r[sel] - self.cfg.r_init)).mean())

    def params(self):
        out = {}
        for lin in self.layers:
            out[f"{lin.name}.w"] = lin.w
            out[f"{lin.name}.b"] = lin.b
        return out

    def forward(self, x):
        """Graph forward; x is a Value of shape (N, 3)."""
        # swish keeps the geometric init exact at the origin (act(0) = 0)
        # while staying ReLU-like away from it, unlike raw softplus
        beta = Value(self.cfg.softplus_sharpness)
        enc = positional_encode(x, self.cfg.enc_levels_pos)
        h = enc
        for l, lin in enumerate(self.layers):
            if l == self.skip and l not in (0, len(self.layers) - 1):
                h = ad.mul(ad.concat([h, enc], axis=-1), Value(1.0 / np.sqrt(2.0)))
            h = lin(h)
            if l < len(self.layers) - 1:
                h = ad.mul(h, ad.sigmoid(ad.mul(h, beta)))
        s = ad.reshape(ad.narrow(h, 1, 0, 1), (x.data.shape[0],))
        z = ad.narrow(h, 1, 1, self.cfg.feature_width)
        return s, z

    def sdf_np(self, x):
        """Plain numpy forward returning only the signed distance.

        Mirrors ``forward`` op for op so both paths agree bitwise; used by
        the ray sampler, the mask computations and grid baking.
        """
        beta = self.cfg.softplus_sharpness
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        enc = positional_encode_np(flat, self.cfg.enc_levels_pos)
        h = enc
        for l, lin in enumerate(self.layers):
            if l == self.skip and l not in (0, len(self.layers) - 1):
                h = np.concatenate([h, enc], axis=-1) * (1.0 / np.sqrt(2.0))
            h = lin.apply_np(h)
            if l < len(self.layers) - 1:
                h = h * ad._sigmoid_np(h * beta)
        return h[:, 0].reshape(x.shape[:-1])


class ColorNet:
    """ReLU MLP with a sigmoid head emitting RGB in [0, 1]."""

    def __init__(self, name, in_dim, cfg: FieldConfig, rng: np.random.Generator):
        self.name = name
        dims = [in_dim] + [cfg.color_width] * cfg.color_depth + [3]
        self.layers = []
        for l in range(len(dims) - 1):
            w = rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l], dims[l + 1]))
            b = np.zeros(dims[l + 1])
            self.layers.append(_Linear(f"{name}.{l}", w, b))

    def params(self):
        out = {}
        for lin in self.layers:
            out[f"{lin.name}.w"] = lin.w
            out[f"{lin.name}.b"] = lin.b
        return out

    def forward(self, inp):
        h = inp
        for l, lin in enumerate(self.layers):
            h = lin(h)
            if l < len(self.layers) - 1:
                h = ad.clamp(h, 0.0, None)
        return ad.sigmoid(h)


class FieldSet:
    """Geometry net, color heads and density sharpness, as one unit."""

    def __init__(self, cfg: FieldConfig, seed):
        self.cfg = cfg
        self.geometry = GeometryNet(cfg, seed)
        rng = np.random.default_rng([int(seed), 0xC0103])
        vd_in = 3 + 3 + encode_width(cfg.enc_levels_dir) + cfg.feature_width
        vi_in = 3 + 3 + cfg.feature_width
        self.color_vd = ColorNet("col_vd", vd_in, cfg, rng)
        self.color_vi = ColorNet("col_vi", vi_in, cfg, rng) if cfg.color_decomposition else None
        self.log_beta = ad.leaf(np.array(np.log(cfg.beta_init)))

    # ----------------------------------------------------------- evaluate

    def eval_geometry(self, x):
        """(s, z, n) at leaf Value x of shape (N, 3); n = ds/dx, differentiable."""
        if not np.all(np.isfinite(x.data)):
            raise ValueError("eval_geometry: non-finite input point")
        s, z = self.geometry.forward(x)
        n = ad.grad(s.sum(), x, create_graph=True)
        return s, z, n

    def eval_color(self, x, n, v, z):
        """(c_vd, c_vi, c) for points x, normals n, unit view dirs v, features z.

        Without color decomposition there is a single head; the summed color
        and the view-independent slot then both alias its output.
        """
        enc_v = positional_encode(v, self.cfg.enc_levels_dir)
        c_vd = self.color_vd.forward(ad.concat([x, n, enc_v, z], axis=-1))
        if self.color_vi is None:
            return c_vd, c_vd, c_vd
        c_vi = self.color_vi.forward(ad.concat([x, n, z], axis=-1))
        return c_vd, c_vi, ad.add(c_vd, c_vi)

    def beta(self):
        return ad.exp(self.log_beta)

    @property
    def beta_np(self):
        return float(np.exp(self.log_beta.data))

    def sdf_np(self, x):
        return self.geometry.sdf_np(x)

    # --------------------------------------------------------- parameters

    def params(self):
        out = dict(self.geometry.params())
        out.update(self.color_vd.params())
        if self.color_vi is not None:
            out.update(self.color_vi.params())
        out["log_beta"] = self.log_beta
        return out

    # --------------------------------------------------------- checkpoint

    def state_tensors(self):
        return {k: v.data for k, v in self.params().items()}

    def load_state_tensors(self, tensors):
        params = self.params()
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        for k, v in params.items():
            arr = np.asarray(tensors[k], dtype=v.data.dtype)
            if arr.shape != v.data.shape:
                raise ValueError(
                    f"checkpoint tensor {k}: shape {arr.shape} != {v.data.shape}"
                )
            v.data = arr.copy()


def save_checkpoint(path, tensors, meta):
    """Binary checkpoint: magic, JSON meta block, then per-tensor f64 blobs.

    Layout (all integers little-endian):
      magic bytes
      u32 json length, JSON meta (includes the tensor manifest)
      for each tensor in manifest order: raw float64 little-endian data
    """
    names = sorted(tensors)
    manifest = [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names]
    blob = dict(meta)
    blob["tensors"] = manifest
    payload = json.dumps(blob).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (tensors, meta) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (jlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(jlen).decode("utf-8"))
        tensors = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            tensors[entry["name"]] = arr.astype(np.float64)
        trailing = f.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after tensor data")
    return tensors, meta


def build_fields(cfg: FieldConfig, seed):
    return FieldSet(cfg, seed)


def fields_from_checkpoint(path):
    tensors, meta = load_checkpoint(path)
    cfg = FieldConfig(**meta["field_config"])
    fs = FieldSet(cfg, seed=0)
    fs.load_state_tensors(tensors)
    return fs, meta
