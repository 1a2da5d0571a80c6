"""Two-stage training loop, optimizer, and run logging.

Stage 1 fits color and unmasked normal priors to form an initial shape.
Stage 2 pairs every source ray with a virtual ray, routes rays through the
mask scheme, and applies geometric consistency (stage 2a) and additionally
photometric consistency (stage 2b). Checkpoints land at stage boundaries.

All randomness is drawn from streams keyed by (seed, purpose, iteration),
so a resumed run is bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .config import RunConfig
from .consistency import (back_project, gen_virtual_views, geometric_residual,
                          photometric_residual, target_distance,
                          virtual_ray_batch)
from .fields import FieldSet, build_fields, load_checkpoint, save_checkpoint
from .losses import (LossWeights, loss_eikonal, loss_normal, loss_rgb,
                     masked_mean, total_loss)
from .masks import build_masks
from .renderer import render_rays, sample_rays

# rng purpose codes
_RNG_PIXELS = 1
_RNG_SAMPLES = 2
_RNG_VIRTUAL = 3
_RNG_VSAMPLES = 4
_RNG_PROBES = 5


class NanLossError(RuntimeError):
    def __init__(self, iteration, checkpoint):
        super().__init__(
            f"non-finite loss at iteration {iteration}; "
            f"last good checkpoint: {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class Schedule:
    iters_stage1: int
    iters_gc_only: int
    iters_total: int
    batch_rays: int

    def __post_init__(self):
        if not (self.iters_stage1 < self.iters_gc_only <= self.iters_total):
            raise ValueError("schedule requires stage1 < gc_only <= total")

    def stage_of(self, iteration):
        if iteration < self.iters_stage1:
            return "1"
        if iteration < self.iters_gc_only:
            return "2a"
        return "2b"


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params          # dict name -> Value
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, lr):
        """Consume `.grad` of every parameter (missing grads count as 0)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None

    def state_tensors(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors, t):
        for k in self.m:
            self.m[k] = np.asarray(tensors[f"adam.m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(tensors[f"adam.v.{k}"], dtype=np.float64).copy()
        self.t = int(t)


def cosine_lr(iteration, total, lr0, lr_min):
    frac = min(max(iteration / max(total - 1, 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * frac))


def _rng(seed, purpose, iteration):
    return np.random.default_rng([int(seed), int(purpose), int(iteration)])


def _sphere_probes(rng, n):
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)


def training_step(fields: FieldSet, dataset, cfg: RunConfig, iteration,
                  schedule: Schedule):
    """One forward pass; returns (total, parts dict, mask fractions or None).

    Must run inside an active Tape. `parts` holds the individual loss
    Values actually used for the stage.
    """
    stage = schedule.stage_of(iteration)
    if cfg.normal_only:
        stage = "1"
    weights = cfg.loss_weights()

    rng_pix = _rng(cfg.seed, _RNG_PIXELS, iteration)
    k = int(rng_pix.integers(dataset.n_views))
    h, w = dataset.image_shape
    pix = rng_pix.choice(h * w, size=schedule.batch_rays, replace=False)
    rays, gt, prior = dataset.rays_for_pixels(k, pix, near=cfg.ray_near)

    t = sample_rays(fields, rays, cfg.n_coarse, cfg.n_fine,
                    _rng(cfg.seed, _RNG_SAMPLES, iteration))
    src = render_rays(fields, rays, t)

    # known constant background closes the color model for escaping rays
    bg = Value(dataset.background[None, :])
    resid = ad.sub(Value(1.0), ad.reshape(src.opacity, (len(rays), 1)))
    color_full = ad.add(src.color, ad.mul(resid, bg))
    l_rgb = loss_rgb(color_full, gt)

    probes = _sphere_probes(_rng(cfg.seed, _RNG_PROBES, iteration), cfg.eik_probes)
    l_eik = loss_eikonal(fields, probes)

    parts = {"rgb": l_rgb, "eik": l_eik}
    fractions = None

    if stage == "1":
        l_normal = loss_normal(src.normal, prior, np.ones(len(rays), dtype=bool))
        parts["normal"] = l_normal
        total = total_loss("1", weights, l_rgb, l_normal, eik=l_eik)
        return total, parts, fractions

    x_t, depth_ok = back_project(rays.o, rays.v, src.depth)
    vr = gen_virtual_views(rays.o, x_t.data, cfg.rho,
                           _rng(cfg.seed, _RNG_VIRTUAL, iteration))
    pair_ok = vr.valid & depth_ok
    vrays = virtual_ray_batch(vr, near=cfg.ray_near)
    tv = sample_rays(fields, vrays, cfg.n_coarse, cfg.n_fine,
                     _rng(cfg.seed, _RNG_VSAMPLES, iteration))
    virt = render_rays(fields, vrays, tv)

    if cfg.disable_mask:
        m_v = pair_ok
        m_r = pair_ok
        normal_mask = np.ones(len(rays), dtype=bool)
        fractions = {"frac_ms": np.nan, "frac_mo": np.nan, "frac_ma": np.nan,
                     "frac_mv": float(np.mean(m_v)), "frac_mr": float(np.mean(m_r))}
    else:
        ms = build_masks(fields.sdf_np(vr.origins), src.sdf.data, virt.sdf.data,
                         src.normal.data, virt.normal.data, cfg.epsilon,
                         extra_valid=pair_ok)
        m_v, m_r = ms.m_v, ms.m_r
        normal_mask = m_r
        fractions = ms.fractions()

    l_normal = loss_normal(src.normal, prior, normal_mask)
    parts["normal"] = l_normal

    if cfg.disable_gc:
        l_gc = Value(0.0)
    else:
        d_bar = target_distance(x_t, vr.origins, live_grad=cfg.gc_live_grad)
        l_gc = masked_mean(geometric_residual(virt.depth, d_bar), m_v)
    parts["gc"] = l_gc

    if stage == "2a":
        return total_loss("2a", weights, l_rgb, l_normal, gc=l_gc, eik=l_eik), \
            parts, fractions

    if cfg.disable_pc:
        l_pc = Value(0.0)
    else:
        l_pc = masked_mean(photometric_residual(src.color_vi, virt.color_vi), m_r)
    parts["pc"] = l_pc
    total = total_loss("2b", weights, l_rgb, l_normal, gc=l_gc, pc=l_pc, eik=l_eik)
    return total, parts, fractions


_CSV_FIELDS = ["iteration", "stage", "loss_total", "loss_rgb", "loss_normal",
               "loss_gc", "loss_pc", "loss_eik", "frac_ms", "frac_mo",
               "frac_ma", "frac_mv", "frac_mr", "beta", "lr"]


def _checkpoint_meta(cfg: RunConfig, iteration, adam_t):
    return {
        "field_config": asdict(cfg.field_config()),
        "run_config": asdict(cfg),
        "iteration": int(iteration),
        "adam_t": int(adam_t),
    }


def save_training_checkpoint(path, fields, adam, cfg, iteration):
    tensors = fields.state_tensors()
    tensors.update(adam.state_tensors())
    save_checkpoint(path, tensors, _checkpoint_meta(cfg, iteration, adam.t))


def load_training_checkpoint(path, cfg: RunConfig):
    """Rebuild fields + optimizer state; returns (fields, tensors, meta)."""
    tensors, meta = load_checkpoint(path)
    fields = build_fields(cfg.field_config(), cfg.seed)
    fields.load_state_tensors(tensors)
    return fields, tensors, meta


def train(cfg: RunConfig, dataset, out_dir, resume_from=None, progress=None):
    """Run the schedule; writes checkpoints and a loss/mask CSV.

    Returns a dict with the final checkpoint path and last loss values.
    """
    os.makedirs(out_dir, exist_ok=True)
    schedule = Schedule(cfg.iters_stage1, cfg.iters_gc_only, cfg.iters_total,
                        cfg.batch_rays)
    start_iter = 0
    if resume_from:
        fields, tensors, meta = load_training_checkpoint(resume_from, cfg)
        adam = Adam(fields.params())
        adam.load_state_tensors(tensors, meta["adam_t"])
        start_iter = meta["iteration"]
    else:
        fields = build_fields(cfg.field_config(), cfg.seed)
        adam = Adam(fields.params())

    log_path = os.path.join(out_dir, "train_log.csv")
    mode = "a" if (resume_from and os.path.exists(log_path)) else "w"
    log_f = open(log_path, mode, newline="")
    writer = csv.DictWriter(log_f, fieldnames=_CSV_FIELDS)
    if mode == "w":
        writer.writeheader()

    snapshot_path = os.path.join(out_dir, "ckpt_lastgood.bin")
    boundaries = {schedule.iters_stage1: "ckpt_stage1.bin",
                  schedule.iters_gc_only: "ckpt_stage2a.bin"}
    final_path = os.path.join(out_dir, "ckpt_final.bin")

    last = {}
    t_start = time.time()
    try:
        for it in range(start_iter, schedule.iters_total):
            lr = cosine_lr(it, schedule.iters_total, cfg.lr, cfg.lr_min)
            with Tape():
                total, parts, fractions = training_step(
                    fields, dataset, cfg, it, schedule)
                loss_val = float(total.data)
                if not np.isfinite(loss_val):
                    ckpt = snapshot_path if os.path.exists(snapshot_path) else ""
                    raise NanLossError(it, ckpt)
                ad.backward(total)
            adam.step(lr)

            if cfg.log_every and it % cfg.log_every == 0:
                row = {
                    "iteration": it,
                    "stage": schedule.stage_of(it) if not cfg.normal_only else "1",
                    "loss_total": f"{loss_val:.8g}",
                    "loss_rgb": f"{float(parts['rgb'].data):.8g}",
                    "loss_normal": f"{float(parts['normal'].data):.8g}",
                    "loss_gc": f"{float(parts['gc'].data):.8g}" if "gc" in parts else "",
                    "loss_pc": f"{float(parts['pc'].data):.8g}" if "pc" in parts else "",
                    "loss_eik": f"{float(parts['eik'].data):.8g}",
                    "beta": f"{fields.beta_np:.8g}",
                    "lr": f"{lr:.8g}",
                }
                for key in ("frac_ms", "frac_mo", "frac_ma", "frac_mv", "frac_mr"):
                    val = (fractions or {}).get(key)
                    row[key] = "" if val is None or not np.isfinite(val) else f"{val:.6g}"
                writer.writerow(row)

            nxt = it + 1
            if cfg.snapshot_every and nxt % cfg.snapshot_every == 0:
                save_training_checkpoint(snapshot_path, fields, adam, cfg, nxt)
            if nxt in boundaries:
                save_training_checkpoint(
                    os.path.join(out_dir, boundaries[nxt]), fields, adam, cfg, nxt)
            if progress and nxt % progress == 0:
                rate = (nxt - start_iter) / (time.time() - t_start)
                print(f"iter {nxt}/{schedule.iters_total} "
                      f"loss {loss_val:.5f} ({rate:.2f} it/s)", flush=True)
            last = {"iteration": it, "loss_total": loss_val,
                    "loss_rgb": float(parts["rgb"].data)}
    finally:
        log_f.close()

    save_training_checkpoint(final_path, fields, adam, cfg, schedule.iters_total)
    last["checkpoint"] = final_path
    last["fields"] = fields
    return last
