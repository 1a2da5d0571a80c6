import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import Tape, Value
from sdfrecon.renderer import (
    RayBatch, composite, laplace_density_np, render_rays, sample_pdf,
    sample_rays, sdf_to_density, sphere_exit_depth, stratified_samples,
)

from conftest import ConstantDensityField, SphereField


# ------------------------------------------------------------- density law

def test_density_continuous_at_zero():
    assert laplace_density_np(0.0, 0.1) == pytest.approx(5.0, abs=1e-15)


def test_density_interior_limit():
    assert laplace_density_np(-100.0, 0.1) == pytest.approx(10.0, abs=1e-12)


def test_density_exterior_value():
    assert laplace_density_np(0.1, 0.1) == pytest.approx(5.0 * np.exp(-1.0), rel=1e-12)


def _density_reference(s, beta):
    # direct two-branch evaluation
    if s > 0:
        return (1.0 / (2.0 * beta)) * np.exp(-s / beta)
    return (1.0 / beta) * (1.0 - 0.5 * np.exp(s / beta))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-5.0, 5.0, allow_nan=False),
    st.floats(1e-3, 2.0, allow_nan=False),
)
def test_density_matches_direct_evaluation(s, beta):
    got = laplace_density_np(s, beta)
    ref = _density_reference(s, beta)
    assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_density_graph_matches_np_and_rejects_bad_beta(rng):
    s = rng.normal(size=(4, 7))
    with Tape():
        out = sdf_to_density(Value(s), Value(0.2))
    assert np.array_equal(out.data, laplace_density_np(s, 0.2))
    with pytest.raises(ValueError, match="beta"):
        sdf_to_density(Value(s), Value(-1.0))


def test_density_gradient_flows_to_beta(rng):
    s = rng.normal(size=5)
    with Tape():
        log_beta = ad.leaf(np.array(np.log(0.1)))
        sigma = sdf_to_density(Value(s), ad.exp(log_beta))
        ad.backward(sigma.sum())
    h = 1e-6
    ref = (laplace_density_np(s, np.exp(np.log(0.1) + h)).sum()
           - laplace_density_np(s, np.exp(np.log(0.1) - h)).sum()) / (2 * h)
    assert log_beta.grad == pytest.approx(ref, rel=1e-5)


# --------------------------------------------------------------- sampling

def test_ray_batch_validation():
    with pytest.raises(ValueError, match="unit"):
        RayBatch(o=[[0, 0, 0]], v=[[0, 0, 2.0]], near=[0.1], far=[1.0])
    with pytest.raises(ValueError, match="near < far"):
        RayBatch(o=[[0, 0, 0]], v=[[0, 0, 1.0]], near=[1.0], far=[1.0])


def test_stratified_one_sample_per_bin(rng):
    rays = RayBatch(o=np.zeros((3, 3)), v=np.tile([0, 0, 1.0], (3, 1)),
                    near=np.full(3, 0.5), far=np.full(3, 2.5))
    t = sample_rays(SphereField(), rays, n_coarse=8, n_fine=0, rng=rng)
    assert t.shape == (3, 8)
    edges = np.linspace(0.5, 2.5, 9)
    for b in range(3):
        counts, _ = np.histogram(t[b], bins=edges)
        assert np.all(counts == 1)


def test_sample_pdf_concentrates_on_peak(rng):
    edges = np.linspace(0.0, 4.0, 33)[None, :]
    centers = 0.5 * (edges[:, 1:] + edges[:, :-1])
    weights = np.exp(-0.5 * ((centers - 2.0) / 0.05) ** 2)
    samples = sample_pdf(edges, weights, 2000, rng)
    frac = np.mean(np.abs(samples - 2.0) <= 0.2)
    assert frac >= 0.70


def test_importance_samples_concentrate_near_surface(rng):
    field = SphereField(radius=0.5, beta=0.02)
    rays = RayBatch(o=[[0, 0, -0.9]], v=[[0, 0, 1.0]], near=[1e-3],
                    far=sphere_exit_depth([[0, 0, -0.9]], [[0, 0, 1.0]]))
    t = sample_rays(field, rays, n_coarse=32, n_fine=64, rng=rng)
    fine_frac = np.mean(np.abs(t[0] - 0.4) < 0.15)
    assert fine_frac > 0.5  # surface at depth 0.4


def test_constant_density_fine_samples_uniform(rng):
    field = ConstantDensityField(sdf_value=10.0, beta=0.1)
    B = 40
    rays = RayBatch(o=np.zeros((B, 3)), v=np.tile([0, 0, 1.0], (B, 1)),
                    near=np.zeros(B) + 1e-4, far=np.full(B, 2.0))
    t = sample_rays(field, rays, n_coarse=32, n_fine=100, rng=rng)
    # pool fine+coarse samples; under constant density they are ~uniform
    pooled = t.reshape(-1)
    lo, hi = 0.1, 1.9
    pooled = pooled[(pooled > lo) & (pooled < hi)]
    counts, _ = np.histogram(pooled, bins=12, range=(lo, hi))
    p = stats.chisquare(counts).pvalue
    assert p > 0.01


def test_sample_rays_rejects_degenerate_range(rng):
    with pytest.raises(ValueError):
        RayBatch(o=[[0, 0, 0]], v=[[0, 0, 1.0]], near=[1.0], far=[1.0])


# -------------------------------------------------------------- composite

def _composite_const(t, far, sigma_np, colors):
    B, n = np.asarray(t).shape
    c = Value(np.asarray(colors, dtype=np.float64))
    zero = Value(np.zeros((B, n, 3)))
    return composite(np.asarray(t, float), far, Value(np.asarray(sigma_np, float)),
                     c, c, zero)


def test_composite_all_zero_sigma():
    t = np.linspace(0.1, 1.0, 8)[None, :]
    out = _composite_const(t, np.array([1.2]), np.zeros((1, 8)),
                           np.ones((1, 8, 3)))
    assert np.allclose(out["opacity"].data, 0.0)
    assert np.allclose(out["color"].data, 0.0)
    assert np.allclose(out["depth"].data, 0.0)


def test_composite_first_sample_opaque():
    t = np.array([[0.5, 1.0, 1.5]])
    sigma = np.array([[1e4, 1.0, 1.0]])
    colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    out = _composite_const(t, np.array([2.0]), sigma, colors)
    assert np.allclose(out["color"].data, [[1.0, 0.0, 0.0]])
    assert np.allclose(out["depth"].data, [0.5])
    assert np.allclose(out["weights"].data[0, 1:], 0.0)


def test_composite_half_alphas():
    # alpha = 0.5 per sample via sigma * delta = ln 2
    t = np.array([[1.0, 2.0]])
    far = np.array([3.0])
    delta = np.array([[1.0, 1.0]])
    sigma = np.log(2.0) / delta
    colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    out = _composite_const(t, far, sigma, colors)
    assert np.allclose(out["alpha"].data, 0.5)
    assert np.allclose(out["color"].data, [[0.5, 0.25, 0.0]])
    assert np.allclose(out["opacity"].data, [0.75])


def test_weight_normalization_identity(rng):
    B, n = 1000, 24
    t = np.sort(rng.uniform(0.01, 2.0, size=(B, n)), axis=-1)
    t += np.arange(n) * 1e-9  # guard exact ties
    sigma = rng.uniform(0.0, 30.0, size=(B, n))
    out = _composite_const(t, np.full(B, 2.5), sigma, rng.uniform(size=(B, n, 3)))
    lhs = out["weights"].data.sum(axis=-1)
    rhs = 1.0 - np.prod(1.0 - out["alpha"].data, axis=-1)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_transmittance_monotone(rng):
    B, n = 64, 32
    t = np.sort(rng.uniform(0.01, 2.0, size=(B, n)), axis=-1)
    t += np.arange(n) * 1e-9
    sigma = rng.uniform(0.0, 50.0, size=(B, n))
    out = _composite_const(t, np.full(B, 2.5), sigma, rng.uniform(size=(B, n, 3)))
    T = out["trans"].data
    assert np.all(np.diff(T, axis=-1) <= 1e-15)
    assert np.all((out["alpha"].data >= 0) & (out["alpha"].data <= 1))
    assert np.all((out["opacity"].data >= 0) & (out["opacity"].data <= 1 + 1e-12))


def test_composite_requires_sorted_depths():
    t = np.array([[1.0, 0.5]])
    with pytest.raises(ValueError, match="increasing"):
        _composite_const(t, np.array([2.0]), np.ones((1, 2)), np.ones((1, 2, 3)))


def test_render_depth_matches_analytic_sphere(rng):
    field = SphereField(radius=0.5, beta=0.005)
    origins = np.tile([0.0, 0.0, -0.9], (6, 1))
    dirs = np.tile([0.0, 0.0, 1.0], (6, 1))
    far = sphere_exit_depth(origins, dirs)
    rays = RayBatch(o=origins, v=dirs, near=np.full(6, 1e-3), far=far)
    t = sample_rays(field, rays, 64, 64, rng)
    with Tape():
        out = render_rays(field, rays, t)
    expected = 0.4  # closed-form ray/sphere hit from z=-0.9
    assert np.all(np.abs(out.depth.data - expected) < 2.0 * out.delta.mean())
    assert np.allclose(out.opacity.data, 1.0, atol=1e-6)
    assert np.allclose(out.color.data, field.albedo, atol=1e-6)
    # rendered normal points back toward the camera
    assert np.all(out.normal.data[:, 2] < -0.9)
