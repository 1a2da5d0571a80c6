"""Per-ray-pair masks that route rays to their supervision constraints.

All masks mark valid rays with 1. A pair survives to a consistency loss
only if the virtual origin sits in free space (sample mask), neither ray
crosses the surface more than once (occlusion mask), and the adaptive
check splits survivors by rendered-normal agreement across the two views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MaskSet:
    m_s: np.ndarray
    m_o: np.ndarray
    m_a: np.ndarray
    m_v: np.ndarray
    m_r: np.ndarray

    def fractions(self):
        return {
            "frac_ms": float(np.mean(self.m_s)),
            "frac_mo": float(np.mean(self.m_o)),
            "frac_ma": float(np.mean(self.m_a)),
            "frac_mv": float(np.mean(self.m_v)),
            "frac_mr": float(np.mean(self.m_r)),
        }


def sample_mask(sdf_at_origin):
    """1 iff the SDF at the virtual origin is strictly positive."""
    return np.asarray(sdf_at_origin) > 0.0


def _single_crossing(s):
    # sgn(0) := +1 so grazing zeros do not count as transitions
    sgn = np.where(np.asarray(s) >= 0.0, 1.0, -1.0)
    return np.abs(np.diff(sgn, axis=-1)).sum(axis=-1) <= 2.0


def occlusion_mask(s_source, s_virtual):
    """1 iff both rays' SDF sample vectors change sign at most once."""
    return _single_crossing(s_source) & _single_crossing(s_virtual)


def adaptive_check_mask(n_source, n_virtual, eps):
    """(mask, defined): mask is 1 where rendered normals disagree.

    Cosine similarity of the two rendered normals, compared against eps;
    rays with a zero-norm normal are undefined and must be excluded from
    both integrated masks by the caller.
    """
    n_source = np.atleast_2d(n_source)
    n_virtual = np.atleast_2d(n_virtual)
    ns = np.linalg.norm(n_source, axis=-1)
    nv = np.linalg.norm(n_virtual, axis=-1)
    defined = (ns > 0.0) & (nv > 0.0)
    denom = np.where(defined, ns * nv, 1.0)
    cos = np.sum(n_source * n_virtual, axis=-1) / denom
    return defined & (cos < eps), defined


def integrate(m_s, m_o, m_a):
    """(M_v, M_r) per the AND combination of the three masks."""
    m_s = np.asarray(m_s, dtype=bool)
    m_o = np.asarray(m_o, dtype=bool)
    m_a = np.asarray(m_a, dtype=bool)
    base = m_s & m_o
    return base & m_a, base & ~m_a


def build_masks(sdf_at_origin, s_source, s_virtual, n_source, n_virtual,
                eps, extra_valid=None):
    """Full mask pipeline for one batch of ray pairs."""
    m_s = sample_mask(sdf_at_origin)
    m_o = occlusion_mask(s_source, s_virtual)
    m_a, defined = adaptive_check_mask(n_source, n_virtual, eps)
    m_v, m_r = integrate(m_s, m_o, m_a)
    m_v = m_v & defined
    m_r = m_r & defined
    if extra_valid is not None:
        m_v = m_v & extra_valid
        m_r = m_r & extra_valid
    return MaskSet(m_s=m_s, m_o=m_o, m_a=m_a, m_v=m_v, m_r=m_r)
