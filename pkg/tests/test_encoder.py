import numpy as np
import pytest

from lbmtrack import tensor as T
from lbmtrack.encoder import encode, init_encoder


def test_shape_contract():
    rng = np.random.default_rng(0)
    params = init_encoder(rng, channels=8, dim=32)
    for h, w in [(48, 64), (16, 16), (32, 80)]:
        img = T.Tensor(rng.random((3, h, w)).astype(np.float32))
        fm = encode(img, params)
        assert fm.o.shape == (32, h // 4, w // 4)
        assert fm.stride == 4


def test_bad_dims_rejected():
    rng = np.random.default_rng(0)
    params = init_encoder(rng, channels=8, dim=32)
    with pytest.raises(T.ShapeError):
        encode(T.Tensor(np.zeros((3, 20, 64), np.float32)), params)


def test_zero_image_zero_features():
    # biases init to zero, so an all-zero image maps to all-zero features
    rng = np.random.default_rng(1)
    params = init_encoder(rng, channels=8, dim=32)
    fm = encode(T.Tensor(np.zeros((3, 16, 16), np.float32)), params)
    assert np.all(fm.o.data == 0.0)


def test_deterministic_bit_exact():
    rng = np.random.default_rng(2)
    params = init_encoder(rng, channels=8, dim=32)
    img = T.Tensor(rng.random((3, 32, 32)).astype(np.float32))
    a = encode(img, params).o.data
    b = encode(img, params).o.data
    assert np.array_equal(a, b)


def test_gradients_reach_every_parameter():
    rng = np.random.default_rng(3)
    params = init_encoder(rng, channels=8, dim=32)
    img = T.Tensor(rng.random((3, 16, 16)).astype(np.float32))
    with T.Tape() as tape:
        fm = encode(img, params)
        readout = T.Tensor(rng.normal(size=fm.o.shape).astype(np.float32))
        T.backward(T.tsum(T.mul(fm.o, readout)), tape)
    for name, t in T.iter_named_tensors(params):
        assert t.grad is not None, f"no grad for {name}"
        assert np.linalg.norm(t.grad) > 1e-12, f"zero grad norm for {name}"
