"""Loss terms and their stage-dependent assembly.

All terms are per-batch means so the weights stay comparable across batch
sizes. Stage "1" trains color + unmasked normals; stage "2a" adds the
mask-routed geometric consistency; stage "2b" adds photometric consistency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

STAGES = ("1", "2a", "2b")


@dataclass
class LossWeights:
    rgb: float = 1.0
    normal: float = 0.05
    gc: float = 0.1
    pc: float = 0.1
    eik: float = 0.1

    def validate(self):
        vals = [self.rgb, self.normal, self.gc, self.pc, self.eik]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and nonnegative: {self}")
        if self.rgb <= 0:
            raise ValueError("rgb weight must be positive")


def masked_mean(per_ray, mask):
    """Mean of a (B,) Value over mask bits; an empty mask contributes 0."""
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        return Value(0.0)
    return ad.mul(ad.vsum(ad.mul(per_ray, Value(m))), Value(1.0 / count))


def loss_rgb(color, target):
    """Mean per-ray L1 color error."""
    if color.data.shape[0] == 0:
        raise ValueError("loss_rgb: empty batch")
    per_ray = ad.vsum(ad.absval(ad.sub(color, Value(target))), axis=1)
    return ad.vmean(per_ray)


def loss_normal(normal, priors, mask):
    """Masked mean of L1 + angular normal error against unit priors.

    The rendered normal is normalized only inside the inner-product term;
    the L1 term sees it raw.
    """
    priors = np.atleast_2d(priors)
    l1 = ad.vsum(ad.absval(ad.sub(normal, Value(priors))), axis=1)
    unit = ad.div(normal, ad.l2norm(normal, axis=1, keepdims=True, eps=1e-12))
    dot = ad.vsum(ad.mul(unit, Value(priors)), axis=1)
    ang = ad.absval(ad.sub(Value(1.0), dot))
    return masked_mean(ad.add(l1, ang), mask)


def loss_eikonal(field, probes):
    """Mean (||ds/dx|| - 1)^2 over spatial probe points."""
    x = ad.leaf(np.atleast_2d(probes))
    _, _, n = field.eval_geometry(x)
    norm = ad.l2norm(n, axis=1, eps=1e-12)
    dev = ad.sub(norm, Value(1.0))
    return ad.vmean(ad.mul(dev, dev))


def total_loss(stage, weights: LossWeights, rgb, normal, gc=None, pc=None, eik=None):
    """Weighted stage objective. gc/pc must be omitted (None) in stage 1."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    total = ad.mul(Value(weights.rgb), rgb)
    total = ad.add(total, ad.mul(Value(weights.normal), normal))
    if eik is not None:
        total = ad.add(total, ad.mul(Value(weights.eik), eik))
    if stage in ("2a", "2b"):
        if gc is None:
            raise ValueError(f"stage {stage} requires the geometric term")
        total = ad.add(total, ad.mul(Value(weights.gc), gc))
    if stage == "2b":
        if pc is None:
            raise ValueError("stage 2b requires the photometric term")
        total = ad.add(total, ad.mul(Value(weights.pc), pc))
    return total
