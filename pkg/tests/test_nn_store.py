import numpy as np
import pytest

from gentrimil import store
from gentrimil.nn import (
    Adam, ConvBackbone, conv3x3_s2_backward, conv3x3_s2_forward, max_relative_error,
    numeric_gradients, sigmoid, softmax,
)


def naive_conv(x, w, b):
    n, h, wd, c = x.shape
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    k = w.reshape(3, 3, c, -1)
    out = np.zeros((n, ho, wo, w.shape[1]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            out[:, i, j, :] = np.einsum("nabc,abco->no", patch, k) + b
    return out


@pytest.mark.parametrize("side", [7, 8])
def test_conv_matches_loop_oracle(rng, side):
    x = rng.normal(size=(2, side, side, 3))
    w = rng.normal(size=(27, 4))
    b = rng.normal(size=4)
    out, _ = conv3x3_s2_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-12)


def test_conv_backward_matches_finite_differences(rng):
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(18, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(1, 3, 3, 3))
    params = {"x": x, "w": w, "b": b}
    loss = lambda: float(np.sum(conv3x3_s2_forward(params["x"], params["w"], params["b"])[0] * g))
    _, cache = conv3x3_s2_forward(x, w, b)
    dx, dw, db = conv3x3_s2_backward(g, cache)
    num = numeric_gradients(loss, params)
    assert max_relative_error({"x": dx, "w": dw, "b": db}, num) < 1e-7


def test_backbone_gradients(rng):
    bb = ConvBackbone(d=3, depth=2, base_channels=2, image_side=8, seed=1)
    # nonzero biases keep pre-activations off the ReLU kink at exactly 0
    for k in ("conv0.b", "conv1.b"):
        bb.params[k][:] = rng.uniform(0.05, 0.2, bb.params[k].shape)
    x = rng.random((2, 8, 8, 3))
    g = rng.normal(size=(2, 3))
    loss = lambda: float(np.sum(bb.forward(x)[0] * g))
    out, cache = bb.forward(x)
    assert max_relative_error(bb.backward(g, cache), numeric_gradients(loss, bb.params)) < 1e-6


def test_sigmoid_and_softmax_are_stable():
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    np.testing.assert_allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])


def test_adam_first_step_moves_by_lr():
    p = {"x": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step({"x": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["x"], [0.9, -1.9], atol=1e-7)


def test_relative_error_floor():
    assert max_relative_error({"a": np.zeros(3)}, {"a": np.zeros(3)}) == 0.0
    assert max_relative_error({"a": np.array([1.0])}, {"a": np.array([1.1])}) == pytest.approx(0.1 / 1.1)


def test_store_round_trip_and_stable_bytes(tmp_path, rng):
    arrays = {"b": rng.normal(size=(2, 3)), "a": np.arange(4, dtype=np.int64)}
    h1 = store.save(tmp_path / "x.bin", arrays, {"k": 1})
    h2 = store.save(tmp_path / "y.bin", dict(reversed(arrays.items())), {"k": 1})
    assert h1 == h2 and (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()
    back, meta = store.load(tmp_path / "x.bin")
    assert meta["k"] == 1 and meta["content_hash"] == h1
    np.testing.assert_array_equal(back["b"], arrays["b"])
    assert (tmp_path / "x.bin.json").exists()
    with pytest.raises(store.StoreError):
        store.decode_arrays(b"garbage" * 4)
