import numpy as np
import pytest

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import Tape, Value
from sdfrecon.fields import FieldConfig, build_fields
from sdfrecon.losses import (
    LossWeights, loss_eikonal, loss_normal, loss_rgb, masked_mean, total_loss,
)

from conftest import SphereField


class LinearField(SphereField):
    """s(x) = 2 * x_3, for eikonal checks."""

    def eval_geometry(self, x):
        s = ad.mul(ad.vsum(ad.mul(x, Value(np.array([0.0, 0.0, 2.0]))), axis=1),
                   Value(1.0))
        z = Value(np.zeros((x.data.shape[0], 1)))
        n = ad.grad(s.sum(), x, create_graph=True)
        return s, z, n


def test_loss_rgb_perfect_zero():
    with Tape():
        out = loss_rgb(Value(np.array([[0.2, 0.4, 0.6]])),
                       np.array([[0.2, 0.4, 0.6]]))
    assert out.data == 0.0


def test_loss_rgb_single_ray_sum_of_channels():
    with Tape():
        out = loss_rgb(Value(np.zeros((1, 3))), np.ones((1, 3)))
    assert out.data == pytest.approx(3.0)


def test_loss_rgb_matches_naive_recomputation(rng):
    pred = rng.uniform(size=(17, 3))
    gt = rng.uniform(size=(17, 3))
    with Tape():
        out = loss_rgb(Value(pred), gt)
    naive = np.mean([np.abs(p - g).sum() for p, g in zip(pred, gt)])
    assert out.data == pytest.approx(naive, abs=1e-14)


def test_loss_rgb_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        loss_rgb(Value(np.zeros((0, 3))), np.zeros((0, 3)))


def test_loss_normal_perfect():
    n = np.array([[0.0, 0.0, 1.0]])
    with Tape():
        out = loss_normal(Value(n), n, np.array([True]))
    assert out.data == pytest.approx(0.0, abs=1e-12)


def test_loss_normal_opposed():
    n = np.array([[0.0, 0.0, 1.0]])
    with Tape():
        out = loss_normal(Value(-n), n, np.array([True]))
    # L1 term 2*||n||_1 = 2, angular term |1-(-1)| = 2
    assert out.data == pytest.approx(4.0, rel=1e-9)


def test_loss_normal_empty_mask_contributes_zero(rng):
    with Tape():
        out = loss_normal(Value(rng.normal(size=(5, 3))),
                          rng.normal(size=(5, 3)), np.zeros(5, dtype=bool))
    assert out.data == 0.0


def test_masked_mean_selects(rng):
    per_ray = rng.normal(size=6)
    mask = np.array([1, 0, 1, 0, 0, 1], dtype=bool)
    with Tape():
        out = masked_mean(Value(per_ray), mask)
    assert out.data == pytest.approx(per_ray[mask].mean())


def test_eikonal_exact_sdf_zero(rng):
    field = SphereField(radius=0.5)
    probes = rng.normal(size=(64, 3)) * 0.5 + np.array([0.6, 0, 0])
    with Tape():
        out = loss_eikonal(field, probes)
    assert out.data == pytest.approx(0.0, abs=1e-12)


def test_eikonal_scaled_linear_field(rng):
    field = LinearField()
    with Tape():
        out = loss_eikonal(field, rng.normal(size=(32, 3)))
    assert out.data == pytest.approx(1.0, abs=1e-12)


def test_eikonal_untrained_net_positive(rng):
    fs = build_fields(FieldConfig(geo_width=32, geo_depth=2, feature_width=4,
                                  color_width=8, color_depth=1), seed=0)
    with Tape():
        out = loss_eikonal(fs, rng.normal(size=(32, 3)) * 0.5)
    assert np.isfinite(out.data) and out.data > 0


def test_total_loss_zero_components():
    w = LossWeights()
    zero = Value(0.0)
    with Tape():
        out = total_loss("2b", w, zero, zero, gc=zero, pc=zero, eik=zero)
    assert out.data == 0.0


def test_total_loss_stage_requirements():
    w = LossWeights()
    one = Value(1.0)
    with pytest.raises(ValueError, match="geometric"):
        total_loss("2a", w, one, one, gc=None, eik=one)
    with pytest.raises(ValueError, match="photometric"):
        total_loss("2b", w, one, one, gc=one, pc=None, eik=one)
    with pytest.raises(ValueError, match="stage"):
        total_loss("7", w, one, one)


def test_total_loss_linear_in_weights(rng):
    vals = {k: float(rng.uniform(0.1, 1.0)) for k in ("rgb", "normal", "gc", "pc", "eik")}

    def assemble(scale_key, scale):
        kw = dict(rgb=1.0, normal=0.05, gc=0.1, pc=0.1, eik=0.1)
        kw[scale_key] = kw[scale_key] * scale
        w = LossWeights(**kw)
        with Tape():
            out = total_loss("2b", w, Value(vals["rgb"]), Value(vals["normal"]),
                             gc=Value(vals["gc"]), pc=Value(vals["pc"]),
                             eik=Value(vals["eik"]))
        return float(out.data)

    base = assemble("rgb", 1.0)
    for key, weight in (("rgb", 1.0), ("normal", 0.05), ("gc", 0.1),
                        ("pc", 0.1), ("eik", 0.1)):
        doubled = assemble(key, 2.0)
        assert doubled - base == pytest.approx(weight * vals[key], rel=1e-9)


def test_total_loss_decomposition_identity(rng):
    w = LossWeights(rgb=0.7, normal=0.2, gc=0.3, pc=0.15, eik=0.05)
    parts = {k: float(rng.uniform()) for k in ("rgb", "normal", "gc", "pc", "eik")}
    with Tape():
        out = total_loss("2b", w, Value(parts["rgb"]), Value(parts["normal"]),
                         gc=Value(parts["gc"]), pc=Value(parts["pc"]),
                         eik=Value(parts["eik"]))
    expect = (w.rgb * parts["rgb"] + w.normal * parts["normal"]
              + w.gc * parts["gc"] + w.pc * parts["pc"] + w.eik * parts["eik"])
    assert abs(float(out.data) - expect) < 1e-12


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="rgb"):
        LossWeights(rgb=0.0).validate()
    with pytest.raises(ValueError, match="finite"):
        LossWeights(gc=-1.0).validate()
    LossWeights().validate()
