import numpy as np
import pytest

from refsr import losses
from refsr.gradcheck import directional_check
from refsr.numerics import ShapeError, bicubic_resize
from refsr.pipeline.data import real_dataset


def identity_embedding(c=3):
    """Centre-tap identity conv; ReLU is inert on non-negative images."""
    w = np.zeros((c, c, 3, 3))
    w[np.arange(c), np.arange(c), 1, 1] = 1.0
    return losses.PixelEmbedding(w, np.zeros(c))


@pytest.fixture
def embed(rng):
    return losses.PixelEmbedding(rng.standard_normal((6, 3, 3, 3)) * 0.5, rng.standard_normal(6) * 0.1)


def test_contextual_identity_and_permutation(rng):
    x = rng.standard_normal((1, 5, 6, 7))
    delta, mean, _ = losses.contextual_distance(x, x)
    assert np.abs(delta).max() < 1e-12 and abs(mean) < 1e-12
    perm = rng.permutation(42)
    y = x.reshape(1, 5, -1)[:, :, perm].reshape(x.shape)
    assert abs(losses.contextual_distance(x, y)[1]) < 1e-12


def test_contextual_two_pixel_toy():
    x = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    y = np.array([[0.0, 1.0], [1.0, 1.0]]).T.reshape(1, 2, 1, 2)
    delta, mean, assign = losses.contextual_distance(x, y)
    assert mean == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    assert assign[0, 0] == 1


def test_contextual_mean_permutation_invariant_in_second_argument(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    y = rng.standard_normal((2, 4, 6, 6))
    perm = rng.permutation(36)
    yp = y.reshape(2, 4, -1)[:, :, perm].reshape(y.shape)
    assert losses.contextual_distance(x, y)[1] == pytest.approx(losses.contextual_distance(x, yp)[1],
                                                                abs=1e-12)


def test_contextual_channel_mismatch():
    with pytest.raises(ShapeError):
        losses.contextual_distance(np.zeros((1, 3, 4, 4)), np.zeros((1, 4, 4, 4)))


def test_contextual_gradient(rng):
    x = rng.standard_normal((1, 4, 5, 5))
    y = rng.standard_normal((1, 4, 6, 6))
    _, _, a = losses.contextual_distance(x, y)
    w = rng.random((1, 5, 5))
    g = losses.contextual_distance_backward(w, x, y, a)

    def f(d):
        return float((losses.contextual_distance(d["x"], y, a)[0] * w).sum())
    assert directional_check(f, {"x": x}, {"x": g}, rng) < 1e-6


def test_reconstruction_identity_and_constant_shift(rng, embed):
    hr = rng.random((1, 3, 12, 12))
    assert losses.reconstruction_loss(hr, hr, embed).value == pytest.approx(0.0, abs=1e-12)
    lv = losses.reconstruction_loss(hr + 0.1, hr, embed)
    assert lv.terms["blur"] == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ShapeError):
        losses.reconstruction_loss(hr, hr[..., :-1], embed)


def test_reconstruction_gradient(rng, embed):
    sr, hr = rng.random((2, 3, 10, 10)), rng.random((2, 3, 10, 10))
    lv = losses.reconstruction_loss(sr, hr, embed)

    def f(d):
        return losses.reconstruction_loss(d["sr"], hr, embed, lv.assignments["rec"]).value
    assert directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng) < 1e-3


def test_fidelity_identity_and_zero_confidence(rng, embed):
    sr = rng.random((1, 3, 12, 12))
    conf = rng.random((6, 6))
    assert losses.fidelity_loss(sr, sr, conf, embed).value == pytest.approx(0.0, abs=1e-12)
    lv = losses.fidelity_loss(sr, rng.random((1, 3, 8, 8)), np.zeros((6, 6)), embed)
    assert lv.value == 0.0 and not lv.grad.any()


def test_fidelity_weights_select_pixels():
    emb = identity_embedding()
    sr = np.array([[0.9, 0.2], [0.3, 0.7]])[None, None].repeat(3, 1)
    sr[:, 1] *= 0.5
    ref = np.random.default_rng(3).random((1, 3, 2, 2))
    conf = np.array([[1.0, 0.0], [0.0, 0.0]])
    delta = losses.contextual_distance(sr, ref)[0]
    assert losses.fidelity_loss(sr, ref, conf, emb).value == pytest.approx(delta[0, 0, 0], abs=1e-12)


def test_fidelity_scale_invariant_and_clamped(rng, embed):
    sr, ref = rng.random((1, 3, 10, 10)), rng.random((1, 3, 10, 10))
    conf = rng.random((5, 5)) * 0.5
    base = losses.fidelity_loss(sr, ref, conf, embed).value
    assert losses.fidelity_loss(sr, ref, 1.7 * conf, embed).value == pytest.approx(base, rel=1e-12)
    neg = conf - 0.6
    clamped = losses.fidelity_loss(sr, ref, np.clip(neg, 0, None), embed).value
    assert losses.fidelity_loss(sr, ref, neg, embed).value == pytest.approx(clamped, rel=1e-12)


def test_fidelity_gradient(rng, embed):
    sr, ref = rng.random((2, 3, 10, 10)), rng.random((2, 3, 8, 8))
    conf = rng.random((2, 5, 5))
    lv = losses.fidelity_loss(sr, ref, conf, embed)

    def f(d):
        return losses.fidelity_loss(d["sr"], ref, conf, embed, lv.assignments["fid"]).value
    assert directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng) < 1e-3


def test_sra_round_trip_and_lambda_zero(rng, embed):
    # down-then-up is far from identity on white noise, so use natural-like content
    pair = real_dataset(0, 1, 32)[0]
    wide = np.moveaxis(pair.wide, -1, 0)[None]
    tele = np.moveaxis(pair.tele, -1, 0)[None]
    sr = bicubic_resize(wide, "up")
    conf = rng.random((16, 16))
    lv = losses.sra_loss(sr, wide, tele, conf, embed, lam=0.0)
    assert lv.value < 1e-2
    noisy = sr + 0.05 * rng.standard_normal(sr.shape)
    lv0 = losses.sra_loss(noisy, wide, tele, conf, embed, lam=0.0)
    assert lv0.value == lv0.terms["consistency"]
    lv1 = losses.sra_loss(noisy, wide, tele, conf, embed, lam=0.1)
    assert lv1.value == pytest.approx(lv1.terms["consistency"] + 0.1 * lv1.terms["fid"], rel=1e-12)


def test_sra_errors(rng, embed):
    wide = rng.random((1, 3, 8, 8))
    with pytest.raises(ShapeError):
        losses.sra_loss(rng.random((1, 3, 14, 16)), wide, wide, np.ones((8, 8)), embed)
    with pytest.raises(ValueError):
        losses.sra_loss(rng.random((1, 3, 16, 16)), wide, wide, np.ones((8, 8)), embed, lam=-1)


def test_sra_gradient(rng, embed):
    wide, tele = rng.random((1, 3, 8, 8)), rng.random((1, 3, 12, 12))
    sr = rng.random((1, 3, 16, 16))
    conf = rng.random((8, 8))
    lv = losses.sra_loss(sr, wide, tele, conf, embed, lam=0.3)

    def f(d):
        return losses.sra_loss(d["sr"], wide, tele, conf, embed, 0.3, lv.assignments["fid"]).value
    assert directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng) < 1e-3


def test_l1(rng):
    hr = rng.random((2, 3, 6, 6))
    assert losses.l1_loss(hr, hr).value == 0.0
    assert losses.l1_loss(hr + 0.2, hr).value == pytest.approx(0.2, abs=1e-12)
    sr = rng.random(hr.shape)
    naive = sum(abs(a - b) for a, b in zip(sr.ravel(), hr.ravel())) / sr.size
    assert abs(losses.l1_loss(sr, hr).value - naive) < 1e-7
    with pytest.raises(ShapeError):
        losses.l1_loss(sr, hr[:1])


def test_losses_non_negative(rng, embed):
    sr, hr = rng.random((1, 3, 10, 10)), rng.random((1, 3, 10, 10))
    conf = rng.random((5, 5))
    for lv in (losses.l1_loss(sr, hr), losses.reconstruction_loss(sr, hr, embed),
               losses.fidelity_loss(sr, hr, conf, embed)):
        assert lv.value >= 0 and np.isfinite(lv.grad).all()
