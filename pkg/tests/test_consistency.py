import numpy as np
import pytest

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import Tape, Value
from sdfrecon.consistency import (
    back_project, gen_virtual_views, geometric_residual, photometric_residual,
    target_distance, virtual_ray_batch,
)
from sdfrecon.fields import FieldConfig, build_fields
from sdfrecon.losses import masked_mean
from sdfrecon.renderer import RayBatch, render_rays, sample_rays, sphere_exit_depth

from conftest import SphereField


def test_back_project_axis():
    with Tape():
        d = ad.leaf(np.array([2.0]))
        x_t, valid = back_project(np.array([[0.0, 0.0, 0.0]]),
                                  np.array([[0.0, 0.0, 1.0]]), d)
    assert np.allclose(x_t.data, [[0.0, 0.0, 2.0]])
    assert valid[0]


def test_back_project_general_and_invalid():
    with Tape():
        d = ad.leaf(np.array([0.5, -0.1]))
        x_t, valid = back_project(np.array([[1.0, 1.0, 1.0]] * 2),
                                  np.array([[0.0, -1.0, 0.0]] * 2), d)
    assert np.allclose(x_t.data[0], [1.0, 0.5, 1.0])
    assert valid.tolist() == [True, False]


def test_back_project_gradient_is_direction():
    v = np.array([[0.6, 0.8, 0.0]])
    a = np.array([1.0, 2.0, 3.0])
    with Tape():
        d = ad.leaf(np.array([1.5]))
        x_t, _ = back_project(np.zeros((1, 3)), v, d)
        ad.backward(ad.vsum(ad.mul(x_t, Value(a[None, :]))))
    # d(x_t . a)/dD = v . a, matches finite differences of the linear map
    assert d.grad[0] == pytest.approx(float(v[0] @ a), rel=1e-12)


def test_gen_virtual_degenerate_radius(rng):
    o = np.array([[0.1, 0.0, 0.0]])
    x_t = np.array([[0.1, 0.0, 0.9]])
    vr = gen_virtual_views(o, x_t, rho=0.0, rng=rng)
    assert vr.valid[0]
    assert np.allclose(vr.origins, o)
    assert np.allclose(vr.dirs, [[0.0, 0.0, 1.0]])


def test_gen_virtual_ball_constraint(rng):
    o = np.tile([0.2, -0.1, 0.3], (500, 1))
    x_t = np.tile([0.0, 0.0, -0.5], (500, 1))
    vr = gen_virtual_views(o, x_t, rho=0.25, rng=rng)
    assert vr.valid.all()
    assert np.all(np.linalg.norm(vr.origins - o, axis=1) <= 0.25 + 1e-12)
    norms = np.linalg.norm(vr.dirs, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_gen_virtual_mean_is_center(rng):
    n = 100_000
    rho = 0.25
    o = np.zeros((n, 3))
    x_t = np.tile([0.0, 0.0, -0.7], (n, 1))
    vr = gen_virtual_views(o, x_t, rho=rho, rng=rng)
    mean = vr.origins.mean(axis=0)
    sigma = rho * np.sqrt(1.0 / 5.0) / np.sqrt(n)  # per-axis sd of uniform ball
    assert np.all(np.abs(mean) < 3.5 * sigma)


def test_gen_virtual_drops_on_target_collision(rng):
    o = np.array([[0.1, 0.2, 0.3]])
    vr = gen_virtual_views(o, o.copy(), rho=0.0, rng=rng)
    assert not vr.valid[0]


def test_residual_trivials():
    with Tape():
        r = geometric_residual(Value(np.array([1.2])), Value(np.array([1.0])))
    assert r.data[0] == pytest.approx(0.02, abs=1e-15)
    with Tape():
        r = geometric_residual(Value(np.array([1.0])), Value(np.array([1.0])))
    assert r.data[0] == 0.0
    with Tape():
        p = photometric_residual(Value(np.array([[0.2, 0.2, 0.2]])),
                                 Value(np.array([[0.2, 0.3, 0.2]])))
    assert p.data[0] == pytest.approx(0.1, abs=1e-15)


def test_target_distance_rotation_invariance():
    x_t = np.array([[0.0, 0.0, 0.5]])
    base = np.array([0.3, 0.0, 0.5])
    ang = np.linspace(0, 2 * np.pi, 7)
    vals = []
    for a in ang:
        rot = np.array([
            [np.cos(a), -np.sin(a), 0.0],
            [np.sin(a), np.cos(a), 0.0],
            [0.0, 0.0, 1.0],
        ])
        o_v = (rot @ (base - x_t[0])) + x_t[0]
        with Tape():
            d = target_distance(Value(x_t), o_v[None, :], live_grad=True)
        vals.append(float(d.data[0]))
    assert np.allclose(vals, vals[0], atol=1e-12)


def test_degenerate_closure_exact_zero(rng):
    """rho = 0 pairs the ray with itself: both residuals exactly zero."""
    field = SphereField(radius=0.5, beta=0.01)
    o = np.array([[0.0, 0.0, -0.9]])
    v = np.array([[0.0, 0.0, 1.0]])
    rays = RayBatch(o=o, v=v, near=[1e-3], far=sphere_exit_depth(o, v))
    t = sample_rays(field, rays, 32, 32, np.random.default_rng(5))
    with Tape():
        src = render_rays(field, rays, t)
        x_t, _ = back_project(o, v, src.depth)
        vr = gen_virtual_views(o, x_t.data, rho=0.0, rng=rng)
        assert np.allclose(vr.origins, o) and np.allclose(vr.dirs, v)
        virt = render_rays(field, rays, t)  # identical ray, identical samples
        g = geometric_residual(virt.depth, Value(np.linalg.norm(x_t.data - o, axis=1)))
        p = photometric_residual(src.color_vi, virt.color_vi)
    assert float(p.data[0]) == 0.0
    # geometric residual compares the render against its own back-projection
    assert float(g.data[0]) == 0.0


def test_gc_gradient_path_live_vs_stopped(rng):
    """The live x_t path must change the parameter gradient of the loss."""
    fields = build_fields(FieldConfig(geo_depth=2, geo_width=16, feature_width=4,
                                      color_width=8, color_depth=1), seed=3)
    o = np.array([[0.0, 0.0, -0.8]])
    v = np.array([[0.0, 0.0, 1.0]])
    rays = RayBatch(o=o, v=v, near=[1e-3], far=sphere_exit_depth(o, v))
    t = sample_rays(fields, rays, 16, 16, np.random.default_rng(2))

    grads = {}
    for live in (True, False):
        with Tape():
            src = render_rays(fields, rays, t)
            x_t, _ = back_project(o, v, src.depth)
            vr = gen_virtual_views(o, x_t.data, rho=0.2, rng=np.random.default_rng(7))
            vrays = virtual_ray_batch(vr)
            tv = sample_rays(fields, vrays, 16, 16, np.random.default_rng(3))
            virt = render_rays(fields, vrays, tv)
            d_bar = target_distance(x_t, vr.origins, live_grad=live)
            loss = masked_mean(geometric_residual(virt.depth, d_bar), vr.valid)
            ad.backward(loss)
        g = np.concatenate([p.grad.reshape(-1)
                            for p in fields.geometry.params().values()])
        grads[live] = g
        for p in fields.params().values():
            p.grad = None
    assert not np.allclose(grads[True], grads[False])
