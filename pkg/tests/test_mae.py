import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from citadel import mae

from oracles import mae_gradient_errors


def test_init_is_deterministic_with_zero_biases():
    a, b = mae.init_mae(8, 16, 3), mae.init_mae(8, 16, 3)
    for name in mae.PARAM_ORDER:
        assert a.params[name].tobytes() == b.params[name].tobytes()
        if name.endswith(".b"):
            assert not a.params[name].any()


def test_bottleneck_size():
    model = mae.init_mae(8, 16)
    assert model.bottleneck_size == 16 * 2 * 2 == 64
    assert model.params["enc_fc.w"].shape == (16, 64)


def test_glorot_bounds():
    model = mae.init_mae(8, 16, 0)
    w = model.params["enc_fc.w"]
    assert np.abs(w).max() <= np.sqrt(6.0 / (64 + 16))


def test_mask_sample_examples():
    img = np.arange(64, dtype=float).reshape(8, 8) + 1
    masked, mask = mae.mask_sample(img, 0.75, np.random.default_rng(0))
    assert mask.sum() == 48
    assert (masked[mask] == 0).all() and (masked[~mask] == img[~mask]).all()
    same, none = mae.mask_sample(img, 0.0, np.random.default_rng(0))
    assert not none.any() and np.array_equal(same, img)
    _, again = mae.mask_sample(img, 0.75, np.random.default_rng(0))
    assert np.array_equal(mask, again)


@given(st.floats(0, 0.99), st.integers(4, 12), st.integers(0, 2**32 - 1))
def test_mask_popcount_exact(ratio, side, seed):
    rng = np.random.default_rng(seed)
    _, mask = mae.mask_sample(np.ones((side, side)), ratio, rng)
    assert mask.sum() == int(np.floor(ratio * side * side + 1e-9))
    masks = mae.sample_masks(3, side * side, ratio, rng)
    assert (masks.sum(axis=1) == mask.sum()).all()


def test_masked_mse_examples():
    x = np.zeros((2, 2))
    m = np.array([[True, False], [False, False]])
    assert mae.masked_mse(x, x, m) == 0.0
    r = x.copy()
    r[0, 0] = 0.5
    assert mae.masked_mse(r, x, m) == 0.25
    r = x.copy()
    r[1, 1] = 0.9
    assert mae.masked_mse(r, x, m) == 0.0


def test_gradient_check():
    errors = mae_gradient_errors(seed=11)
    assert max(errors.values()) < 1e-4, errors


def test_constant_zero_images_are_learnt():
    images = np.zeros((16, 8, 8), dtype=np.uint8)
    _, history = mae.train(mae.init_mae(8, 16, 0), images, mae.TrainConfig(epochs=20, batch_size=8, lr=1e-2, seed=0))
    assert history[-1] <= 1e-4


def _structured_images(n, seed):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, size=(3, 64))
    coef = rng.dirichlet(np.ones(3), size=n)
    return np.rint(255 * coef @ base).reshape(n, 8, 8).astype(np.uint8)


def test_training_reduces_loss():
    model = mae.init_mae(8, 16, 7)
    cfg = mae.TrainConfig(epochs=10, batch_size=32, lr=1e-3, seed=7)
    trained, history = mae.train(model, _structured_images(200, 7), cfg)
    assert len(history) == 10 and np.isfinite(history).all()
    assert history[-1] < history[0]
    assert model.params["enc1.w"].tobytes() != trained.params["enc1.w"].tobytes()


def test_training_is_deterministic():
    images = _structured_images(40, 1)
    cfg = mae.TrainConfig(epochs=2, seed=3)
    a, ha = mae.train(mae.init_mae(8, 8, 0), images, cfg)
    b, hb = mae.train(mae.init_mae(8, 8, 0), images, cfg)
    assert ha == hb
    assert a.to_bytes() == b.to_bytes()


def test_divergence_raises():
    model = mae.init_mae(8, 4, 0)
    model.params["dec2.b"][:] = np.nan
    with pytest.raises(mae.TrainingDivergence):
        mae.train(model, _structured_images(4, 0), mae.TrainConfig(epochs=1))


def test_encode_contract():
    model = mae.init_mae(8, 16, 2)
    zero = np.zeros((8, 8))
    z = mae.encode(model, zero)
    assert z.shape == (16,)
    # zero input with zero biases: every activation is ELU(0) = 0, so the latent is exactly 0
    assert np.array_equal(z, np.zeros(16))
    img = _structured_images(1, 4)[0]
    assert np.array_equal(mae.encode(model, img), mae.encode(model, img))
    batch = mae.encode_batch(model, _structured_images(5, 4))
    assert batch.shape == (5, 16)
    assert np.allclose(batch[0], mae.encode(model, _structured_images(5, 4)[0]))


def test_reconstruct_shape():
    assert mae.reconstruct(mae.init_mae(8, 4), _structured_images(3, 0)).shape == (3, 8, 8)


def test_snapshot_round_trip(tmp_path):
    model = mae.init_mae(8, 16, 9)
    model.save(tmp_path / "m.bin")
    back = mae.MaeModel.load(tmp_path / "m.bin")
    assert back.to_bytes() == model.to_bytes()
    assert (tmp_path / "m.bin").read_bytes()[:4] == b"CTDL"
    with pytest.raises(ValueError, match="magic"):
        mae.MaeModel.from_bytes(b"XXXX" + model.to_bytes()[4:])


def test_train_validation():
    model = mae.init_mae(8, 4)
    with pytest.raises(ValueError):
        mae.train(model, np.zeros((2, 4, 4)), mae.TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        mae.TrainConfig(mask_ratio=1.0)
    with pytest.raises(ValueError):
        mae.init_mae(2, 4)
