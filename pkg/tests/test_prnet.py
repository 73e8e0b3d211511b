import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oneshotseg import nn
from oneshotseg.prnet import (
    _sample_batch,
    PRNet,
    PRNetConfig,
    PRNetOutput,
    PRNetTrainConfig,
    build_prnet_spec,
    default_offset_bound,
    gt_offset,
    pred_offset,
    prnet_forward,
    ssl_loss,
    ssl_loss_and_grads,
    train_prnet,
)
from oneshotseg.volgrid import PhantomConfig, Volume3, generate_phantom, normalize_intensity

SMALL = PRNetConfig(patch_size=(16, 16, 16), enc_channels=(2, 3, 4, 4), dec_channels=(4, 3, 2, 2))
finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def test_gt_offset_examples():
    assert np.array_equal(gt_offset((10, 20, 30), (13, 24, 35), (3, 1, 1)), [9, 4, 5])
    assert np.array_equal(gt_offset((4, 5, 6), (4, 5, 6), (3, 1, 1)), [0, 0, 0])
    assert np.array_equal(gt_offset((2, 2, 0), (0, 2, 7), (1, 1, 1)), [-2, 0, 7])


def test_pred_offset_examples():
    assert np.array_equal(pred_offset([1, 2, 3], [1, 2, 3], 5.0), [0, 0, 0])
    assert np.allclose(pred_offset([50, 50, 50], [0, 0, 0], 100.0), 100.0, atol=1e-10)
    with pytest.raises(ValueError):
        pred_offset([0, 0, 0], [1, 1, 1], 0.0)


@given(vec3, vec3, st.floats(1e-3, 1e3))
def test_pred_offset_antisymmetric_and_bounded(p0, p1, r):
    a, b = pred_offset(p0, p1, r), pred_offset(p1, p0, r)
    assert np.array_equal(a, -b)
    assert np.all(np.abs(a) < r)


def test_pred_offset_strict_at_saturation():
    d = pred_offset([100.0, -100.0, 0.0], [0.0, 0.0, 0.0], 5.0)
    assert np.all(np.abs(d[:2]) < 5.0) and d[2] == 0.0
    assert d[0] == pytest.approx(5.0, rel=1e-15)


def _out(p, recon):
    return PRNetOutput(np.asarray(p, float), np.asarray(recon, float), np.ones(2), np.ones(2))


def test_ssl_loss_examples():
    r = 10.0
    x = np.full((1, 1, 1), 0.5)
    perfect = ssl_loss(_out([0.3, 0, 0], x), _out([0, 0, 0], x), x, x, pred_offset([0.3, 0, 0], [0, 0, 0], r), r)
    assert perfect == (0.0, 0.0, 0.0)
    z = np.zeros((1, 1, 1))
    l_ssl, l_dis, l_rec = ssl_loss(_out([0, 0, 0], z), _out([0, 0, 0], z), x, x, [3.0, 0, 0], r)
    assert (l_ssl, l_dis, l_rec) == pytest.approx((3.5, 3.0, 0.5))
    l2 = ssl_loss(_out([0, 0, 0], z), _out([0, 0, 0], z), x, x, [6.0, 0, 0], r)[1]
    assert l2 == pytest.approx(4 * l_dis)


@given(vec3, vec3, vec3, st.floats(0.1, 100))
def test_ssl_loss_nonnegative(p0, p1, d, r):
    x = np.zeros((2, 2, 2))
    l = ssl_loss(_out(p0, x + 0.1), _out(p1, x), x, x, d, r)
    assert all(v >= 0 for v in l)
    assert l[0] == pytest.approx(l[1] + l[2])


def test_batched_loss_matches_pairwise():
    rng = np.random.default_rng(0)
    nb, shape = 3, (1, 2, 2, 2)
    coord = rng.normal(size=(2 * nb, 3))
    recon = rng.normal(size=(2 * nb,) + shape)
    patches = rng.normal(size=(2 * nb,) + shape)
    d10 = rng.normal(scale=5, size=(nb, 3))
    total = ssl_loss_and_grads(coord, recon, patches, d10, 7.0)[0]
    each = [
        ssl_loss(_out(coord[i], recon[i, 0]), _out(coord[nb + i], recon[nb + i, 0]), patches[i, 0], patches[nb + i, 0], d10[i], 7.0)[0]
        for i in range(nb)
    ]
    assert total == pytest.approx(np.mean(each), rel=1e-12)


def test_batched_loss_gradient_numeric():
    rng = np.random.default_rng(1)
    nb, shape = 2, (1, 2, 1, 2)
    coord = rng.normal(size=(2 * nb, 3))
    recon = rng.normal(size=(2 * nb,) + shape)
    patches = rng.normal(size=(2 * nb,) + shape)
    d10 = rng.normal(scale=3, size=(nb, 3))
    _, _, _, gc, gr = ssl_loss_and_grads(coord, recon, patches, d10, 4.0)
    h = 1e-6
    for arr, g in ((coord, gc), (recon, gr)):
        for idx in list(np.ndindex(arr.shape))[::3]:
            a, b = arr.copy(), arr.copy()
            a[idx] += h
            b[idx] -= h
            args_a = (a, recon) if arr is coord else (coord, a)
            args_b = (b, recon) if arr is coord else (coord, b)
            num = (ssl_loss_and_grads(*args_a, patches, d10, 4.0)[0] - ssl_loss_and_grads(*args_b, patches, d10, 4.0)[0]) / (2 * h)
            assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        PRNetConfig(patch_size=(16, 24, 32))
    with pytest.raises(ValueError):
        PRNetConfig(r=0.0)
    with pytest.raises(ValueError):
        PRNetConfig(enc_channels=(2, 2, 2))
    with pytest.raises(ValueError):
        PRNetTrainConfig(sample_margin=0.5)


def test_sample_margin_keeps_pairs_central():
    v = Volume3(np.random.default_rng(0).random((20, 40, 40)), (2.0, 1.0, 1.0))
    rng = np.random.default_rng(1)
    _, d = _sample_batch([v], (16, 16, 16), 200, rng, margin=0.25)
    # both centres lie in [n/4, 3n/4), so every offset is below half the extent
    assert np.all(np.abs(d) <= np.array([9 * 2.0, 19.0, 19.0]))
    _, d_all = _sample_batch([v], (16, 16, 16), 200, np.random.default_rng(1))
    assert np.abs(d_all).max(axis=0)[1] > 19.0


def test_forward_contract():
    model = PRNet.initialize(SMALL, 0, r=50.0)
    patch = np.random.default_rng(0).random(SMALL.patch_size)
    out = model(patch)
    assert out.p.shape == (3,)
    assert out.recon.shape == patch.shape
    assert out.f2.shape == (SMALL.dec_channels[1],) and out.f4.shape == (SMALL.dec_channels[3],)
    assert all(np.all(np.isfinite(a)) for a in (out.p, out.recon, out.f2, out.f4))
    again = prnet_forward(model.params, SMALL, patch)
    assert np.array_equal(again.p, out.p) and np.array_equal(again.f4, out.f4)
    with pytest.raises(nn.ShapeError):
        model(np.zeros((16, 16, 8)))


def test_centre_feature_is_floor_centre():
    model = PRNet.initialize(SMALL, 1, r=50.0)
    patch = np.random.default_rng(2).random(SMALL.patch_size)
    _, taps, _ = model.run(patch[None])
    out = model(patch)
    assert np.array_equal(out.f2, taps["m2"][0, :, 2, 2, 2])
    assert np.array_equal(out.f4, taps["m4"][0, :, 8, 8, 8])


def test_spec_layout():
    spec = build_prnet_spec(PRNetConfig())
    kinds = [l.kind for l in spec.layers]
    assert kinds.count("downsample2") == 4 and kinds.count("upsample2") == 4
    assert spec.outputs == ("coord", "recon") and spec.taps == ("m2", "m4")


@pytest.fixture(scope="module")
def small_volumes():
    cfg = PhantomConfig(shape=(16, 32, 32), spacing=(6.0, 2.0, 2.0))
    return [normalize_intensity(generate_phantom(cfg, s)[0]) for s in range(2)]


def test_offset_bound_is_diagonal(small_volumes):
    assert default_offset_bound(small_volumes) == pytest.approx(np.sqrt((15 * 6) ** 2 + 2 * (31 * 2) ** 2))


def test_initial_l_dis_within_envelope(small_volumes):
    from oneshotseg.prnet import _sample_batch

    r = default_offset_bound(small_volumes)
    model = PRNet.initialize(SMALL, 0, r)
    patches, d10 = _sample_batch(small_volumes, SMALL.patch_size, 6, np.random.default_rng(0))
    outs, _, _ = model.run(patches)
    u = outs["coord"][:6] - outs["coord"][6:]
    for i in range(6):
        l_dis = float(np.sum((d10[i] - r * np.tanh(u[i])) ** 2)) / 3
        assert l_dis <= (np.linalg.norm(d10[i]) + np.sqrt(3) * r) ** 2 / 3


def test_training_reduces_loss_and_is_reproducible(small_volumes):
    cfg = PRNetConfig(patch_size=(16, 16, 16), enc_channels=(4, 4, 8, 8), dec_channels=(8, 4, 4, 4))
    tc = PRNetTrainConfig(batch=8, epochs=2, steps_per_epoch=10, lr=1e-2, seed=3)
    m1, h1 = train_prnet(small_volumes, cfg, tc)
    m2, h2 = train_prnet(small_volumes, cfg, tc)
    assert h1[1]["L_ssl"] < h1[0]["L_ssl"]
    assert h1 == h2
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params.tensors)
    assert set(h1[0]) == {"epoch", "L_dis", "L_rec", "L_ssl"}


def test_training_single_volume(small_volumes):
    model, hist = train_prnet(small_volumes[:1], SMALL, PRNetTrainConfig(batch=2, epochs=1, steps_per_epoch=2))
    assert np.isfinite(hist[0]["L_ssl"]) and model.r > 0


def test_training_rejects_non_finite():
    v = Volume3(np.full((16, 16, 16), np.nan, dtype=np.float32), (1, 1, 1))
    with pytest.raises(FloatingPointError):
        train_prnet([v], SMALL, PRNetTrainConfig(batch=1, epochs=1, steps_per_epoch=1))
    with pytest.raises(ValueError):
        train_prnet([], SMALL)
