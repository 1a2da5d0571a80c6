import numpy as np
import pytest

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import Value


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class SphereField:
    """Analytic sphere SDF with constant colors; renderer-compatible stub."""

    def __init__(self, radius=0.5, beta=0.01, albedo=(0.8, 0.3, 0.2)):
        self.radius = radius
        self._beta = beta
        self.albedo = np.asarray(albedo, dtype=np.float64)

    def sdf_np(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.linalg.norm(x, axis=-1) - self.radius

    @property
    def beta_np(self):
        return self._beta

    def beta(self):
        return Value(self._beta)

    def eval_geometry(self, x):
        s = ad.sub(ad.l2norm(x, axis=1), Value(self.radius))
        z = Value(np.zeros((x.data.shape[0], 1)))
        n = ad.grad(s.sum(), x, create_graph=True)
        return s, z, n

    def eval_color(self, x, n, v, z):
        c_vi = Value(np.tile(self.albedo, (x.data.shape[0], 1)))
        c_vd = Value(np.zeros_like(c_vi.data))
        return c_vd, c_vi, ad.add(c_vd, c_vi)


class ConstantDensityField(SphereField):
    """SDF constant far from zero: near-zero uniform density everywhere."""

    def __init__(self, sdf_value=10.0, beta=0.1):
        super().__init__(radius=0.0, beta=beta)
        self.sdf_value = sdf_value

    def sdf_np(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.full(x.shape[:-1], self.sdf_value)

    def eval_geometry(self, x):
        s = ad.add(ad.mul(ad.vsum(x, axis=1), Value(0.0)), Value(self.sdf_value))
        z = Value(np.zeros((x.data.shape[0], 1)))
        n = ad.grad(s.sum(), x, create_graph=True)
        return s, z, n


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
