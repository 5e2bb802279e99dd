import numpy as np
import pytest

from sparsevote.errors import LoadError
from sparsevote.feat2d import (
    Extractor2DConfig,
    avg_pool2,
    conv2d_same,
    extract_2d,
    normalize_depth,
    pyramid_forward,
    pyramid_weights,
    read_vgf,
    write_vgf,
)
from sparsevote.multiview import DepthImage


def depth_image(depth):
    depth = np.asarray(depth, dtype=float)
    return DepthImage(depth, np.where(np.isfinite(depth), 0, -1))


def test_empty_image_gives_zero_field():
    out = extract_2d(depth_image(np.full((32, 32), np.inf)), Extractor2DConfig(channels=8))
    assert out.shape == (4, 4, 8) and not out.any()


def test_deterministic():
    img = depth_image(np.random.default_rng(0).uniform(1, 2, (32, 32)))
    cfg = Extractor2DConfig(channels=16, seed=5)
    assert np.array_equal(extract_2d(img, cfg), extract_2d(img, cfg))


def test_default_output_stride():
    img = depth_image(np.random.default_rng(1).uniform(1, 2, (224, 224)))
    assert extract_2d(img, Extractor2DConfig()).shape == (28, 28, 64)


def direct_conv(x, k):
    h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        s += x[ii, jj] * k[a, b]
            out[i, j] = s
    return out


def test_single_stage_matches_direct_convolution():
    ramp = np.arange(16, dtype=float).reshape(4, 4) / 15.0
    k = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0], [2.0, 1.0, -0.5]])
    got = pyramid_forward(ramp, [k[:, :, None, None]])
    ref = avg_pool2(np.maximum(direct_conv(ramp, k), 0)[:, :, None])
    np.testing.assert_allclose(got, ref, atol=1e-12)
    np.testing.assert_allclose(conv2d_same(ramp[:, :, None], k[:, :, None, None])[:, :, 0], direct_conv(ramp, k), atol=1e-12)


@pytest.mark.parametrize("alpha", [0.3, 2.0, 7.5])
def test_positive_homogeneity(alpha):
    x = normalize_depth(depth_image(np.random.default_rng(2).uniform(0, 1, (32, 32))))
    w = pyramid_weights(8, 3, 0)
    np.testing.assert_allclose(pyramid_forward(alpha * x, w), alpha * pyramid_forward(x, w), rtol=1e-12, atol=1e-12)


def test_weights_bit_stable():
    a = pyramid_weights(4, 2, 11)
    b = pyramid_weights(4, 2, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_vgf_roundtrip_and_layout(tmp_path):
    fields = np.random.default_rng(3).normal(size=(2, 4, 4, 3)).astype(np.float32)
    write_vgf(tmp_path / "s.vgf", fields)
    raw = (tmp_path / "s.vgf").read_bytes()
    assert raw[:4] == b"VGF1"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [2, 4, 4, 3]
    assert raw[20:24] == fields[0, 0, 0, 0].astype("<f4").tobytes()
    np.testing.assert_array_equal(read_vgf(tmp_path / "s.vgf"), fields)
    cfg = Extractor2DConfig(kind="external-file", path=str(tmp_path))
    out = extract_2d(depth_image(np.ones((8, 8))), cfg, sample_id="s", view=1)
    np.testing.assert_array_equal(out, fields[1])


def test_vgf_errors(tmp_path):
    cfg = Extractor2DConfig(kind="external-file", path=str(tmp_path))
    with pytest.raises(LoadError):
        extract_2d(depth_image(np.ones((8, 8))), cfg, sample_id="missing")
    write_vgf(tmp_path / "s.vgf", np.zeros((1, 3, 3, 2)))
    with pytest.raises(LoadError):
        extract_2d(depth_image(np.ones((8, 8))), cfg, sample_id="s")
    (tmp_path / "bad.vgf").write_bytes(b"VGF1" + b"\x01\x00\x00\x00" * 4)
    with pytest.raises(LoadError):
        read_vgf(tmp_path / "bad.vgf")
