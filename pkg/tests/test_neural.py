"""Network tests.

The gradient oracle is central finite differences in double precision; the
parameter counts below were frozen by summing kernel and bias sizes of the
architecture by hand (encoder pairs, bottom pair, per-scale up + two convs,
1x1 head):

    3 scales, base 16: 160 + 2320 + 4640 + 9248 + 18496 + 36928 + 8224
                       + 18464 + 9248 + 2064 + 4624 + 2320 + 17 = 116753
    3 scales, base 2:  20 + 38 + 76 + 148 + 296 + 584 + 132 + 292 + 148
                       + 34 + 74 + 38 + 3 = 1883
"""

import numpy as np
import pytest

from panvis.core import PixelImage, write_container
from panvis.dataset import DatasetManifest
from panvis.neural import (
    NetworkConfig,
    TrainConfig,
    backward,
    fit,
    forward,
    infer,
    init_weights,
    load_weights,
    lr_at,
    mse_loss,
    save_weights,
    train,
)
from panvis.neural import (
    _conv3_backward,
    _conv3_forward,
    _pool_backward,
    _pool_forward,
    _up_backward,
    _up_forward,
)

TINY = NetworkConfig(n_scales=3, base_channels=2)


def tiny_weights(seed=0):
    return init_weights(TINY, seed=seed)


# ---------------------------------------------------------------------------
# configuration and sizes
# ---------------------------------------------------------------------------

def test_config_validation():
    for bad in (1, 2, 6):
        with pytest.raises(ValueError):
            NetworkConfig(n_scales=bad)
    with pytest.raises(ValueError):
        NetworkConfig(base_channels=0)
    assert NetworkConfig().divisor == 4
    assert NetworkConfig(n_scales=5).divisor == 16


def test_param_count_frozen():
    assert init_weights(NetworkConfig()).param_count == 116753
    assert tiny_weights().param_count == 1883


def test_forward_preserves_shape():
    w = tiny_weights()
    for side in (16, 64):
        out = forward(w, np.random.default_rng(1).normal(size=(side, side)))
        assert out.shape == (side, side)
    out = forward(w, np.zeros((32, 48)))
    assert out.shape == (32, 48)


def test_forward_rejects_indivisible_sizes():
    w = tiny_weights()
    with pytest.raises(ValueError, match="4"):
        forward(w, np.zeros((18, 18)))
    w5 = init_weights(NetworkConfig(n_scales=5, base_channels=2), seed=0)
    with pytest.raises(ValueError, match="16"):
        forward(w5, np.zeros((24, 32)))


def test_zero_head_means_zero_output():
    w = tiny_weights(seed=2)
    w.tensors["head.w"][:] = 0.0
    w.tensors["head.b"][:] = 0.0
    out = forward(w, np.random.default_rng(0).normal(size=(16, 16)))
    assert np.all(out == 0.0)


def test_zero_input_gives_bias_field():
    w = tiny_weights(seed=3)
    w.tensors["head.b"][:] = 0.7
    out = forward(w, np.zeros((16, 16)))
    assert np.allclose(out, 0.7)


# ---------------------------------------------------------------------------
# loss and schedule arithmetic
# ---------------------------------------------------------------------------

def test_mse_basics():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    assert mse_loss(a, b) == pytest.approx(mse_loss(b, a))
    assert mse_loss(a, a) == 0.0
    assert mse_loss(a, b) == pytest.approx(np.mean((a - b) ** 2))


def test_identical_prediction_zeroes_gradients():
    w = tiny_weights(seed=5)
    x = np.random.default_rng(6).normal(size=(2, 16, 16))
    y = np.stack([forward(w, xi) for xi in x])
    grads, loss = backward(w, x, y)
    assert loss == 0.0
    for g in grads.values():
        assert np.all(g == 0.0)


def test_backward_shape_mismatch():
    w = tiny_weights()
    with pytest.raises(ValueError, match="shape"):
        backward(w, np.zeros((2, 16, 16)), np.zeros((2, 8, 8)))


def test_cosine_schedule():
    cfg = TrainConfig(iterations=5000, lr0=0.001)
    assert lr_at(0, cfg) == pytest.approx(0.001)
    assert lr_at(2500, cfg) == pytest.approx(0.0005)
    assert lr_at(5000, cfg) == pytest.approx(0.0)
    # closed form at an off-center point
    assert lr_at(1250, cfg) == pytest.approx(
        0.5 * 0.001 * (1 + np.cos(np.pi * 0.25)))
    for t in (-1, 5001):
        with pytest.raises(ValueError, match="iteration"):
            lr_at(t, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")


# ---------------------------------------------------------------------------
# gradient oracle: central finite differences, double precision
# ---------------------------------------------------------------------------

def fd_check(f, x, dx_analytic, h=1e-6, tol=1e-4, n_probe=12, seed=0):
    """Compare analytic input-gradient of scalar f against central FD."""
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    picks = rng.choice(flat.size, size=min(n_probe, flat.size),
                       replace=False)
    for i in picks:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        ana = dx_analytic.reshape(-1)[i]
        denom = max(abs(num), abs(ana), 1e-8)
        assert abs(num - ana) / denom < tol, (num, ana)


def test_gradcheck_conv3():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    r = rng.normal(size=(2, 4, 6, 6))  # fixed cotangent

    def loss_x(x_):
        y, _ = _conv3_forward(x_, w, b)
        return float(np.sum(y * r))

    y, ctx = _conv3_forward(x, w, b)
    dx, dw, db = _conv3_backward(r, ctx, w)
    fd_check(loss_x, x, dx)

    def loss_w(w_):
        y, _ = _conv3_forward(x, w_, b)
        return float(np.sum(y * r))

    fd_check(loss_w, w, dw)

    def loss_b(b_):
        y, _ = _conv3_forward(x, w, b_)
        return float(np.sum(y * r))

    fd_check(loss_b, b, db, n_probe=4)


def test_gradcheck_transposed_conv():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(4, 3, 2, 2))
    b = rng.normal(size=(3,))
    r = rng.normal(size=(2, 3, 10, 10))

    y, ctx = _up_forward(x, w, b)
    assert y.shape == (2, 3, 10, 10)
    dx, dw, db = _up_backward(r, ctx, w)

    def loss_x(x_):
        return float(np.sum(_up_forward(x_, w, b)[0] * r))

    def loss_w(w_):
        return float(np.sum(_up_forward(x, w_, b)[0] * r))

    fd_check(loss_x, x, dx)
    fd_check(loss_w, w, dw)
    assert np.allclose(db, r.sum(axis=(0, 2, 3)))


def test_gradcheck_pool_tie_free():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 8, 8))  # continuous draw: ties have measure 0
    r = rng.normal(size=(2, 3, 4, 4))
    y, ctx = _pool_forward(x)
    dx = _pool_backward(r, ctx)

    def loss_x(x_):
        return float(np.sum(_pool_forward(x_)[0] * r))

    fd_check(loss_x, x, dx, n_probe=20)


def test_pool_tie_breaks_to_first_row_major():
    x = np.ones((1, 1, 2, 2))
    y, ctx = _pool_forward(x)
    assert y[0, 0, 0, 0] == 1.0
    dx = _pool_backward(np.full((1, 1, 1, 1), 5.0), ctx)
    assert dx[0, 0, 0, 0] == 5.0
    assert np.all(dx.reshape(-1)[1:] == 0.0)

    # tie between (0,1) and (1,0): row-major first wins
    x = np.array([[[[0.0, 2.0], [2.0, 1.0]]]])
    _, ctx = _pool_forward(x)
    dx = _pool_backward(np.ones((1, 1, 1, 1)), ctx)
    assert dx[0, 0, 0, 1] == 1.0 and dx[0, 0, 1, 0] == 0.0


def test_gradcheck_whole_network():
    w = tiny_weights(seed=10)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 16, 16))
    t = rng.normal(size=(2, 16, 16))
    grads, _ = backward(w, x, t)
    h = 1e-6
    for name, tensor in w.tensors.items():
        flat = tensor.reshape(-1)
        picks = rng.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            _, fp = backward(w, x, t)
            flat[i] = orig - h
            _, fm = backward(w, x, t)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-8)
            assert abs(num - ana) / denom < 1e-4, (name, i, num, ana)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def synth_pair(side, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    target = np.exp(-((xx - 0.55) ** 2 + (yy - 0.4) ** 2) / 0.02)
    clutter = np.exp(-((xx - 0.25) ** 2 + (yy - 0.7) ** 2) / 0.01)
    noisy = target + 0.8 * clutter + 0.05 * rng.normal(size=(side, side))
    return noisy, target


def test_overfit_single_pair():
    x, y = synth_pair(32, seed=12)
    cfg = TrainConfig(iterations=500, batch_size=1, lr0=3e-3, seed=1,
                      precision="float64")
    w, hist = fit([(x, y)], [(x, y)], NetworkConfig(), cfg)
    losses = hist["train_loss"]
    assert len(losses) == 500
    assert losses[-1] < 1e-4 * losses[0]
    assert all(np.isfinite(v) for v in losses)


def test_fit_deterministic_bitwise():
    rng = np.random.default_rng(13)
    pairs = [(rng.normal(size=(16, 16)), rng.normal(size=(16, 16)))
             for _ in range(4)]
    val = [(rng.normal(size=(16, 16)), rng.normal(size=(16, 16)))]
    cfg = TrainConfig(iterations=30, batch_size=2, lr0=1e-3, seed=7,
                      val_every=25, precision="float32")
    w1, h1 = fit(pairs, val, TINY, cfg)
    w2, h2 = fit(pairs, val, TINY, cfg)
    for name in w1.tensors:
        assert np.array_equal(w1.tensors[name], w2.tensors[name]), name
    assert h1["train_loss"] == h2["train_loss"]
    assert len(h1["train_loss"]) == 30
    # validation at iterations 25, 30 (end of run)
    assert [t for t, _ in h1["val_loss"]] == [25, 30]


def manifest_with(tmp_path, splits):
    entries = []
    rng = np.random.default_rng(20)
    for i, split in enumerate(splits):
        img = np.abs(rng.normal(size=(40, 40)))
        gt = np.zeros((40, 40))
        gt[10:14, 8:30] = 1.0
        rel_img, rel_gt = f"img_{i}.padf", f"gt_{i}.padf"
        write_container(tmp_path / rel_img, img, role="recon_image")
        write_container(tmp_path / rel_gt, gt, role="ground_truth")
        entries.append({"index": i, "image": rel_img, "truth": rel_gt,
                        "split": split})
    return DatasetManifest(seed=0, config_hash="0" * 64, entries=entries,
                           base_dir=str(tmp_path))


def test_train_from_manifest(tmp_path):
    man = manifest_with(tmp_path, ["train"] * 5 + ["val", "test"])
    cfg = TrainConfig(iterations=8, batch_size=2, lr0=1e-3, seed=3,
                      val_every=4, input_size=16)
    w, hist = train(man, TINY, cfg)
    assert len(hist["train_loss"]) == 8
    assert all(np.isfinite(v) for v in hist["train_loss"])
    assert w.param_count == 1883


def test_train_rejects_empty_split(tmp_path):
    man = manifest_with(tmp_path, ["train"] * 4)
    cfg = TrainConfig(iterations=2, input_size=16)
    with pytest.raises(ValueError, match="val"):
        train(man, TINY, cfg)
    man = manifest_with(tmp_path, ["val"] * 4)
    with pytest.raises(ValueError, match="train"):
        train(man, TINY, cfg)


# ---------------------------------------------------------------------------
# inference and serialization
# ---------------------------------------------------------------------------

def test_infer_contract():
    w = tiny_weights(seed=14)
    rng = np.random.default_rng(15)
    img = PixelImage(np.abs(rng.normal(size=(512, 512))), pixel_size=70e-6)
    out = infer(w, img)
    assert out.values.shape == (256, 256)
    assert out.values.min() >= 0.0
    assert out.pixel_size == pytest.approx(140e-6)
    again = infer(w, img)
    assert np.array_equal(out.values, again.values)
    # degenerate all-zero input must not crash
    blank = infer(w, PixelImage(np.zeros((128, 128))))
    assert np.all(np.isfinite(blank.values))


def test_weights_roundtrip(tmp_path):
    w = init_weights(NetworkConfig(n_scales=4, base_channels=4), seed=16)
    path = tmp_path / "weights.padf"
    save_weights(path, w)
    loaded = load_weights(path)
    assert loaded.config == w.config
    assert loaded.param_count == w.param_count
    for name, t in w.tensors.items():
        want = t.astype(np.float32).astype(np.float64)
        assert np.array_equal(loaded.tensors[name], want), name


def test_load_weights_rejects_mismatched_architecture(tmp_path):
    w = tiny_weights()
    path = tmp_path / "w.padf"
    save_weights(path, w)
    import json
    import struct
    blob = path.read_bytes()
    hlen = struct.unpack("<I", blob[5:9])[0]
    hdr = json.loads(blob[9:9 + hlen].decode())
    hdr["extra"]["arch_hash"] = "f" * 64
    enc = json.dumps(hdr, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(blob[:5] + struct.pack("<I", len(enc)) + enc
                     + blob[9 + hlen:])
    with pytest.raises(ValueError, match="architecture"):
        load_weights(path)
