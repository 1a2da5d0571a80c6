import numpy as np
import pytest

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import Tape, Value
from sdfrecon.fields import (
    FieldConfig, FieldSet, build_fields, encode_width, load_checkpoint,
    positional_encode, positional_encode_np, save_checkpoint,
)

DESK = FieldConfig()


def test_encode_identity_at_zero_levels():
    x = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(positional_encode_np(x, 0), x)


def test_encode_level_one_pattern():
    x = np.zeros((1, 3))
    enc = positional_encode_np(x, 1)
    assert enc.shape == (1, 9)
    assert np.array_equal(enc[0], [0, 0, 0, 0, 0, 0, 1, 1, 1])


def test_encode_width_six_levels(rng):
    x = rng.normal(size=(4, 3))
    enc = positional_encode_np(x, 6)
    assert enc.shape == (4, 39)
    assert encode_width(6) == 39
    with Tape():
        enc_g = positional_encode(Value(x), 6)
    assert np.array_equal(enc_g.data, enc)


def test_sphere_initialization_probes():
    fs = build_fields(DESK, seed=0)
    s0 = fs.sdf_np(np.zeros((1, 3)))[0]
    assert abs(s0 - (-DESK.r_init)) < 0.1
    d = np.random.default_rng(3).normal(size=(2048, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s1 = fs.sdf_np(d).mean()
    assert abs(s1 - (1.0 - DESK.r_init)) < 0.1


def test_sphere_initialization_sign_band():
    fs = build_fields(DESK, seed=1)
    rng = np.random.default_rng(11)
    p = rng.normal(size=(20000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p *= rng.uniform(0, 1, size=(20000, 1)) ** (1 / 3)
    r = np.linalg.norm(p, axis=1)
    sel = np.abs(r - DESK.r_init) > 0.1
    s = fs.sdf_np(p[sel])
    frac = (np.sign(s) == np.sign(r[sel] - DESK.r_init)).mean()
    assert frac >= 0.99


def _hand_set_linear_probe(fs: FieldSet):
    """Overwrite geometry weights so s(x) = x_3 exactly.

    Uses swish(u) - swish(-u) = u: a +/- unit pair per stage carries the
    coordinate through every activation unchanged.
    """
    layers = fs.geometry.layers
    skip = fs.geometry.skip
    n_layers = len(layers)
    for l, lin in enumerate(layers):
        lin.w.data = np.zeros_like(lin.w.data)
        lin.b.data = np.zeros_like(lin.b.data)
    layers[0].w.data[2, 0] = 1.0
    layers[0].w.data[2, 1] = -1.0
    for l in range(1, n_layers - 1):
        gain = np.sqrt(2.0) if l == skip else 1.0
        w = layers[l].w.data
        w[0, 0], w[1, 0] = gain, -gain
        w[0, 1], w[1, 1] = -gain, gain
    layers[-1].w.data[0, 0] = 1.0
    layers[-1].w.data[1, 0] = -1.0


def test_linear_probe_network_normal(rng):
    fs = build_fields(DESK, seed=0)
    _hand_set_linear_probe(fs)
    pts = rng.normal(size=(16, 3))
    assert np.allclose(fs.sdf_np(pts), pts[:, 2], atol=1e-12)
    with Tape():
        x = ad.leaf(pts)
        s, z, n = fs.eval_geometry(x)
    assert np.allclose(n.data, np.tile([0.0, 0.0, 1.0], (16, 1)), atol=1e-9)


def test_overfit_sphere_normals_near_unit(rng):
    cfg = FieldConfig(geo_width=64, geo_depth=4, feature_width=8,
                      color_width=8, color_depth=1)
    fs = build_fields(cfg, seed=2)
    params = list(fs.geometry.params().values())
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    for it in range(600):
        pts = rng.normal(size=(512, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.05, 1.0, size=(512, 1))
        target = np.linalg.norm(pts, axis=1) - 0.5
        with Tape():
            s, _ = fs.geometry.forward(Value(pts))
            err = ad.sub(s, Value(target))
            ad.backward(ad.vmean(ad.mul(err, err)))
        for i, p in enumerate(params):
            g = p.grad
            p.grad = None
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mh = m[i] / (1 - 0.9 ** (it + 1))
            vh = v[i] / (1 - 0.999 ** (it + 1))
            p.data = p.data - 2e-3 * mh / (np.sqrt(vh) + 1e-8)
    dirs = rng.normal(size=(128, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    surf = 0.5 * dirs
    assert np.abs(fs.sdf_np(surf)).mean() < 0.02
    with Tape():
        x = ad.leaf(surf)
        _, _, n = fs.eval_geometry(x)
    norms = np.linalg.norm(n.data, axis=1)
    assert np.all((norms > 0.9) & (norms < 1.1))


def test_view_independent_head_ignores_direction(rng):
    fs = build_fields(DESK, seed=0)
    pts = rng.normal(size=(5, 3)) * 0.3
    with Tape():
        x = ad.leaf(pts)
        s, z, n = fs.eval_geometry(x)
        v1 = rng.normal(size=(5, 3))
        v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
        v2 = rng.normal(size=(5, 3))
        v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
        cvd1, cvi1, c1 = fs.eval_color(x, n, Value(v1), z)
        cvd2, cvi2, c2 = fs.eval_color(x, n, Value(v2), z)
    assert np.array_equal(cvi1.data, cvi2.data)  # bitwise
    assert not np.array_equal(cvd1.data, cvd2.data)


def test_zeroed_vd_head_gives_vi_color(rng):
    fs = build_fields(DESK, seed=0)
    fs.color_vd.layers[-1].b.data[:] = -1e4  # sigmoid underflows to exactly 0
    pts = rng.normal(size=(4, 3)) * 0.3
    with Tape():
        x = ad.leaf(pts)
        s, z, n = fs.eval_geometry(x)
        v = np.tile([0.0, 0.0, 1.0], (4, 1))
        c_vd, c_vi, c = fs.eval_color(x, n, Value(v), z)
    assert np.all(c_vd.data == 0.0)
    assert np.array_equal(c.data, c_vi.data)


def test_color_range_random_init(rng):
    fs = build_fields(DESK, seed=4)
    pts = rng.normal(size=(64, 3)) * 0.4
    with Tape():
        x = ad.leaf(pts)
        s, z, n = fs.eval_geometry(x)
        v = rng.normal(size=(64, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        c_vd, c_vi, c = fs.eval_color(x, n, Value(v), z)
    for out in (c_vd, c_vi):
        assert np.all(np.isfinite(out.data))
        assert np.all((out.data >= 0.0) & (out.data <= 1.0))
    assert np.all((c.data >= 0.0) & (c.data <= 2.0))


def test_raw_and_graph_forward_agree(rng):
    fs = build_fields(DESK, seed=5)
    pts = rng.normal(size=(32, 3)) * 0.5
    with Tape():
        s, _ = fs.geometry.forward(Value(pts))
    assert np.array_equal(s.data, fs.sdf_np(pts))


def test_eval_geometry_rejects_nonfinite():
    fs = build_fields(DESK, seed=0)
    bad = np.array([[np.nan, 0.0, 0.0]])
    with Tape():
        with pytest.raises(ValueError, match="non-finite"):
            fs.eval_geometry(ad.leaf(bad))


def test_checkpoint_roundtrip(tmp_path):
    fs = build_fields(DESK, seed=6)
    path = tmp_path / "state.ckpt"
    meta = {"field_config": vars(DESK), "iteration": 17}
    save_checkpoint(path, fs.state_tensors(), meta)
    tensors, meta2 = load_checkpoint(path)
    assert meta2["iteration"] == 17
    for name, arr in fs.state_tensors().items():
        assert np.array_equal(tensors[name], arr)
    fs2 = build_fields(DESK, seed=7)
    fs2.load_state_tensors(tensors)
    for name, arr in fs.state_tensors().items():
        assert np.array_equal(fs2.state_tensors()[name], arr)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_shape_guard(tmp_path):
    fs = build_fields(DESK, seed=6)
    tensors = fs.state_tensors()
    tensors["log_beta"] = np.zeros(3)
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {"field_config": vars(DESK)})
    loaded, _ = load_checkpoint(path)
    with pytest.raises(ValueError, match="shape"):
        fs.load_state_tensors(loaded)
