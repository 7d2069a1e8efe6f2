"""Container format, geometry types and the bicubic resampler."""

import numpy as np
import pytest

from panvis.core import (
    BadMagicError,
    Grid2D,
    HeaderMismatchError,
    PixelImage,
    RfFrame,
    ScalarField,
    TransducerArray,
    TruncatedPayloadError,
    read_container,
    resize_bicubic,
    save_pgm,
    write_container,
)


# ---------------------------------------------------------------------------
# geometry types
# ---------------------------------------------------------------------------

def test_default_array_geometry():
    arr = TransducerArray()
    assert arr.n_elements == 128
    assert arr.pitch == pytest.approx(0.3e-3)
    assert arr.aperture == pytest.approx(38.4e-3)
    # 1024 samples at 40 MHz and 1540 m/s sweep 39.424 mm of depth
    assert arr.depth_range == pytest.approx(39.424e-3)
    xs = arr.element_x(0.0)
    assert xs[0] == pytest.approx(-19.05e-3)
    assert xs[-1] == pytest.approx(19.05e-3)
    assert np.allclose(np.diff(xs), 0.3e-3)


def test_default_grid_covers_4cm():
    g = Grid2D()
    assert (g.nx, g.nz) == (400, 400)
    assert g.extent_x == pytest.approx(40.0e-3)
    assert g.extent_z == pytest.approx(40.0e-3)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid2D(nx=1, nz=10, dx=1e-4)
    with pytest.raises(ValueError):
        Grid2D(nx=10, nz=10, dx=0.0)


def test_rf_frame_shape_checked():
    arr = TransducerArray()
    RfFrame(np.zeros((1024, 128)), arr)
    with pytest.raises(ValueError):
        RfFrame(np.zeros((128, 1024)), arr)


def test_scalar_field_roles():
    g = Grid2D(nx=8, nz=6, dx=1e-4)
    ScalarField(g, np.zeros((6, 8)), role="fluence")
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros((8, 6)), role="fluence")
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros((6, 8)), role="banana")
    with pytest.raises(ValueError):
        ScalarField(g, np.full((6, 8), -1.0), role="initial_pressure")
    # reconstructed images may go negative before envelope detection
    ScalarField(g, np.full((6, 8), -1.0), role="recon_image")


def test_pixel_image():
    img = PixelImage(np.zeros((512, 512)))
    assert img.pixel_size == pytest.approx(70e-6)
    with pytest.raises(ValueError):
        PixelImage(np.zeros(16))


# ---------------------------------------------------------------------------
# container round trip and error paths
# ---------------------------------------------------------------------------

def test_container_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.standard_normal((41, 23)).astype(np.float32)
    p = tmp_path / "field.padf"
    write_container(p, data, "fluence", pixel_size_m=1e-4,
                    extra={"seed": 7})
    header, back = read_container(p)
    assert header["role"] == "fluence"
    assert (header["rows"], header["cols"]) == (41, 23)
    assert header["pixel_size_m"] == pytest.approx(1e-4)
    assert header["extra"]["seed"] == 7
    assert back.dtype == np.float32
    assert np.array_equal(back, data)


def test_container_rf_header(tmp_path):
    p = tmp_path / "rf.padf"
    write_container(p, np.zeros((1024, 128), np.float32), "rf",
                    sample_rate_hz=40e6)
    header, back = read_container(p)
    assert header["sample_rate_hz"] == pytest.approx(40e6)
    assert back.shape == (1024, 128)


def test_container_bad_magic(tmp_path):
    p = tmp_path / "bad.padf"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(BadMagicError):
        read_container(p)


def test_container_truncated_payload(tmp_path):
    p = tmp_path / "trunc.padf"
    write_container(p, np.ones((10, 10), np.float32), "fluence")
    blob = p.read_bytes()
    p.write_bytes(blob[:-17])
    with pytest.raises(TruncatedPayloadError):
        read_container(p)


def test_container_dim_mismatch(tmp_path):
    p = tmp_path / "grown.padf"
    write_container(p, np.ones((10, 10), np.float32), "fluence")
    blob = p.read_bytes()
    p.write_bytes(blob + b"\x00\x00\x00\x00")  # one extra float
    with pytest.raises(HeaderMismatchError):
        read_container(p)


def test_container_header_garbage(tmp_path):
    p = tmp_path / "hdr.padf"
    write_container(p, np.ones((4, 4), np.float32), "fluence")
    blob = bytearray(p.read_bytes())
    blob[9] = 0xFF  # corrupt first header byte
    p.write_bytes(bytes(blob))
    with pytest.raises(HeaderMismatchError):
        read_container(p)


# ---------------------------------------------------------------------------
# bicubic resize
# ---------------------------------------------------------------------------

def test_resize_identity():
    rng = np.random.default_rng(3)
    img = rng.standard_normal((17, 24))
    out = resize_bicubic(img, (17, 24))
    assert np.allclose(out, img, atol=1e-12)


def test_resize_constant_preserved():
    img = np.full((32, 32), 3.25)
    for shape in ((8, 8), (64, 64), (12, 40)):
        out = resize_bicubic(img, shape)
        assert np.allclose(out, 3.25, atol=1e-12)


def test_resize_linear_ramp_preserved():
    # Catmull-Rom reproduces affine functions; check interior pixels on both
    # up and downsampling. Output pixel k maps to source (k+0.5)*scale-0.5.
    h, w = 64, 48
    img = (np.arange(h)[:, None] * 0.5 + np.arange(w)[None, :] * 1.25)
    for out_h, out_w in ((32, 24), (128, 96), (20, 36)):
        out = resize_bicubic(img, (out_h, out_w))
        sy, sx = h / out_h, w / out_w
        yy = (np.arange(out_h) + 0.5) * sy - 0.5
        xx = (np.arange(out_w) + 0.5) * sx - 0.5
        expect = yy[:, None] * 0.5 + xx[None, :] * 1.25
        # edge-clamped taps bend the ramp where the 4-tap stencil leaves the
        # source; keep only outputs whose stencil is fully interior
        oy = (np.floor(yy) >= 1) & (np.floor(yy) + 2 <= h - 1)
        ox = (np.floor(xx) >= 1) & (np.floor(xx) + 2 <= w - 1)
        assert np.allclose(out[np.ix_(oy, ox)], expect[np.ix_(oy, ox)],
                           atol=1e-9)


def test_resize_is_linear_operator():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((40, 40))
    b = rng.standard_normal((40, 40))
    ra = resize_bicubic(a, (25, 31))
    rb = resize_bicubic(b, (25, 31))
    rab = resize_bicubic(2.0 * a - 3.0 * b, (25, 31))
    assert np.allclose(rab, 2.0 * ra - 3.0 * rb, rtol=1e-6, atol=1e-9)


def test_resize_rejects_tiny_targets():
    with pytest.raises(ValueError):
        resize_bicubic(np.zeros((16, 16)), (3, 16))
    with pytest.raises(ValueError):
        resize_bicubic(np.zeros((16, 16)), (16, 2))


def test_pgm_export(tmp_path):
    p = tmp_path / "img.pgm"
    save_pgm(p, np.linspace(0, 1, 64).reshape(8, 8))
    blob = p.read_bytes()
    assert blob.startswith(b"P5\n8 8\n255\n")
    assert len(blob) == len(b"P5\n8 8\n255\n") + 64
