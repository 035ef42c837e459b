import numpy as np
import pytest

from refsr import model
from refsr.gradcheck import TOY_CONFIG
from refsr.numerics import ShapeError


def close_gates(params):
    p = params.copy()
    for name in p.tensors:
        if name.endswith("g.2.b") or name == "gr.2.b":
            p.tensors[name] = np.full_like(p.tensors[name], -1e4)
    return p


@pytest.fixture(scope="module")
def params():
    return model.init_params(0, TOY_CONFIG)


def test_init_deterministic_and_specified():
    a, b = model.init_params(42), model.init_params(42)
    assert a.checksum() == b.checksum()
    assert model.init_params(43).checksum() != a.checksum()
    assert not a["t.3.w"].any() and not a["t.3.b"].any()
    assert all(not a[n].any() for n in a.tensors if n.endswith(".b"))
    # phi.1 has 16 input channels and a 3x3 kernel
    w = a["phi.1.w"]
    assert w.shape[1] * 9 == 144
    assert np.abs(w).max() <= 1 / np.sqrt(144)
    assert np.abs(w).max() > 0.9 / np.sqrt(144)


def test_layer_shapes_match_architecture():
    s = model.layer_shapes(model.ModelConfig())
    assert s["phi.0.w"] == (16, 3, 3, 3) and s["phi.2.w"] == (16, 16, 3, 3)
    assert [s[f"t.{i}.w"][:2] for i in range(4)] == [(32, 6), (32, 32), (32, 32), (6, 32)]
    assert sum(n.startswith("rb") and n.endswith(".0.w") for n in s) == 4
    assert s["head.w"][0] == 64


def test_forward_shapes_and_determinism(params, rng):
    lr = rng.random((1, 3, 16, 20)).astype(np.float32)
    ref = rng.random((1, 3, 24, 18)).astype(np.float32)
    a = model.forward(params, lr, ref)
    b = model.forward(params, lr, ref)
    assert a.sr.shape == (1, 3, 32, 40)
    assert a.sr.tobytes() == b.sr.tobytes()
    assert a.field.residual.shape[-2:] == (16, 20)
    assert [x.shape[1] for x in a.aligned] == list(TOY_CONFIG.psi_channels[::-1])
    assert a.hf_aligned.shape == a.sr.shape
    tiled = model.forward(params, lr, ref, search="tiled")
    assert tiled.sr.shape == a.sr.shape


def test_forward_accepts_hwc_images(params, rng):
    lr, ref = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    tr = model.forward(params, lr, ref)
    assert model.to_image(tr.sr).shape == (32, 32, 3)


def test_forward_rejects_small_or_odd_extents(params, rng):
    with pytest.raises(ShapeError):
        model.forward(params, rng.random((1, 3, 8, 16)), rng.random((1, 3, 16, 16)))
    with pytest.raises(ShapeError):
        model.forward(params, rng.random((1, 3, 16, 16)), rng.random((1, 3, 17, 16)))
    with pytest.raises(ValueError):
        model.forward(params, rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16)), search="grid")


def test_closed_gates_reduce_to_decoder_only(params, rng):
    p = close_gates(params.astype(np.float64))
    lr, ref = rng.random((1, 3, 16, 16)), rng.random((1, 3, 20, 24))
    tr = model.forward(p, lr, ref)
    assert np.array_equal(tr.sr, model.decoder_only(p, lr))
    assert tr.gate_means == {"image": 0.0, "level0": 0.0, "level1": 0.0}


def test_prepare_independent_of_trainable_weights(rng):
    lr, ref = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    a = model.init_params(0, TOY_CONFIG)
    b = model.init_params(1, TOY_CONFIG)
    b.tensors.update({k: v for k, v in a.tensors.items() if not model.trainable(k)})
    pa, pb = model.prepare(a, lr, ref), model.prepare(b, lr, ref)
    assert np.array_equal(pa.ref_matched, pb.ref_matched)
    assert np.array_equal(pa.conf_lr, pb.conf_lr)


def test_backward_covers_trainable_parameters(params, rng):
    lr, ref = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    tr = model.forward(params.astype(np.float64), lr, ref)
    grads = model.backward(params, tr, rng.standard_normal(tr.sr.shape))
    assert set(grads) == {n for n in params.tensors if model.trainable(n)}
    assert not any(n.startswith("phi.") for n in grads)
    assert all(np.isfinite(g).all() for g in grads.values())


def test_checkpoint_round_trip(params, tmp_path):
    path = model.save_checkpoint(params, tmp_path / "m.ckpt")
    back = model.load_checkpoint(path)
    assert back.checksum() == params.checksum()
    assert back.config == params.config and back.seed == params.seed
    assert list(back.tensors) == list(params.tensors)
    # manifest line is structured text
    with open(path, "rb") as fh:
        assert fh.readline() == model.CKPT_MAGIC
        assert fh.readline().startswith(b"{")


def test_checkpoint_truncated_names_tensor(params, tmp_path):
    path = model.save_checkpoint(params, tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    last = list(params.tensors)[-1]
    with pytest.raises(model.CheckpointError, match=last.replace(".", r"\.")):
        model.load_checkpoint(path)


def test_checkpoint_fingerprint_mismatch(params, tmp_path):
    path = model.save_checkpoint(params, tmp_path / "m.ckpt")
    other = model.ModelConfig()
    with pytest.raises(model.CheckpointError) as err:
        model.load_checkpoint(path, other)
    assert params.config.fingerprint() in str(err.value)
    assert other.fingerprint() in str(err.value)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"hello\n")
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(path)


def test_fingerprint_ignores_fusion_mode():
    a = model.ModelConfig()
    assert a.fingerprint() == model.ModelConfig(fusion_mode="sum").fingerprint()
    assert a.fingerprint() != model.ModelConfig(n_resblocks=2).fingerprint()
    with pytest.raises(ValueError):
        model.ModelConfig.from_dict({"depth": 3})
