import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from shrimpxnet.explain import (METHODS, Heatmap, cam_from_arrays, colormap, compute_cam, feature_gradients,
                                overlay, overlay_name, render_overlay, save_heatmap_text, upsample_bilinear)
from shrimpxnet.model import init_params

from conftest import TINY_SPEC
from oracles import gradcam_scalar, gradcampp_scalar, xgradcam_scalar

SCALAR = {"gradcam": gradcam_scalar, "gradcampp": gradcampp_scalar, "xgradcam": xgradcam_scalar}


class TestWeights:
    @pytest.mark.parametrize("method", METHODS)
    def test_zero_gradient_zero_map(self, method, rng):
        A = rng.uniform(size=(3, 4, 4))
        assert not cam_from_arrays(A, np.zeros_like(A), method).any()

    @pytest.mark.parametrize("method", METHODS)
    def test_single_channel_constant_gradient(self, method, rng):
        A = np.maximum(rng.normal(size=(1, 5, 5)), 0)
        expected = A[0] / A[0].max()
        np.testing.assert_allclose(cam_from_arrays(A, np.full_like(A, 0.3), method), expected, atol=1e-12)

    def test_gradcam_hand_case(self):
        A = np.array([[[1.0, 0.0], [2.0, 1.0]], [[0.0, 3.0], [1.0, 1.0]]])
        G = np.array([[[1.0, 1.0], [1.0, 1.0]], [[-1.0, 0.0], [-1.0, 0.0]]])
        # weights 1 and -0.5; sum = [[1, -1.5], [1.5, 0.5]] -> relu, / 1.5
        np.testing.assert_allclose(cam_from_arrays(A, G, "gradcam"), [[2 / 3, 0.0], [1.0, 1 / 3]], atol=1e-12)

    def test_xgradcam_constant_equals_gradcam(self):
        A = np.full((2, 3, 3), 0.7)
        A[1] = 0.2
        G = np.stack([np.full((3, 3), 0.5), np.full((3, 3), -0.1)])
        np.testing.assert_allclose(cam_from_arrays(A, G, "xgradcam"), cam_from_arrays(A, G, "gradcam"), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(METHODS))
    def test_matches_scalar_reference(self, seed, method):
        rng = np.random.default_rng(seed)
        A = np.maximum(rng.normal(size=(2, 3, 4)), 0)
        G = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(cam_from_arrays(A, G, method), SCALAR[method](A, G), atol=1e-6)

    def test_gradcampp_singular_pixel(self):
        A = np.zeros((1, 2, 2))
        G = np.zeros((1, 2, 2))
        G[0, 0, 0] = 1.0
        A[0, 0, 0] = 1.0
        out = cam_from_arrays(A, G, "gradcampp")
        assert out[0, 0] == 1.0 and np.isfinite(out).all()

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown CAM"):
            cam_from_arrays(np.ones((1, 2, 2)), np.ones((1, 2, 2)), "scorecam")


class TestOnModel:
    def test_shapes_and_range(self, rng):
        params = init_params(TINY_SPEC, 0)
        x = rng.uniform(size=(3, 16, 16)).astype(np.float32)
        for method in METHODS:
            h = compute_cam(TINY_SPEC, params, x, 1, method)
            assert h.values.shape == (8, 8) and h.feature_shape == (8, 8, 8)
            assert h.values.min() >= 0 and (h.values.max() == 1 or not h.values.any())

    def test_feature_gradients_match_finite_differences(self, rng):
        params = {k: v.astype(np.float64) for k, v in init_params(TINY_SPEC, 1, np.float64).items()}
        x = rng.uniform(size=(1, 3, 16, 16))
        A, G, probs = feature_gradients(TINY_SPEC, params, x, 2)
        # logit is linear in the pooled features above the last conv; check the bias direction
        eps = 1e-6
        bumped = dict(params)
        from shrimpxnet.model import forward
        base = forward(TINY_SPEC, params, x).logits.data[0, 2]
        bumped["block1.bias"] = params["block1.bias"].copy()
        bumped["block1.bias"][3] += eps
        moved = forward(TINY_SPEC, bumped, x).logits.data[0, 2]
        active = A[3] > 0
        assert (moved - base) / eps == pytest.approx(G[3][active].sum(), rel=1e-4, abs=1e-8)
        np.testing.assert_allclose(probs.sum(), 1.0)

    def test_bad_class(self):
        with pytest.raises(ValueError):
            compute_cam(TINY_SPEC, init_params(TINY_SPEC, 0), np.zeros((3, 16, 16)), 4)

    def test_logit_scaling_invariance(self, rng):
        params = init_params(TINY_SPEC, 2, np.float64)
        x = rng.uniform(size=(3, 16, 16))
        scaled = dict(params)
        scaled["head.w2"] = params["head.w2"].copy()
        scaled["head.b2"] = params["head.b2"].copy()
        scaled["head.w2"][:, 0] *= 3.7
        scaled["head.b2"][0] *= 3.7
        for method in ("gradcam", "xgradcam"):
            a = compute_cam(TINY_SPEC, params, x, 0, method).values
            b = compute_cam(TINY_SPEC, scaled, x, 0, method).values
            np.testing.assert_allclose(a, b, atol=1e-9)


class TestRender:
    def test_upsample_shape_and_constant(self):
        up = upsample_bilinear(np.full((4, 4), 0.3), (16, 12))
        assert up.shape == (16, 12)
        np.testing.assert_allclose(up, 0.3)

    def test_upsample_identity(self, rng):
        v = rng.uniform(size=(5, 7))
        np.testing.assert_allclose(upsample_bilinear(v, (5, 7)), v)

    def test_colormap_ends(self):
        np.testing.assert_array_equal(colormap(np.array(0.0)), [0, 0, 1])
        np.testing.assert_array_equal(colormap(np.array(1.0)), [1, 0, 0])

    def test_zero_heatmap_overlay(self, rng):
        img = rng.uniform(size=(3, 16, 16))
        rgb, up = overlay(Heatmap(np.zeros((4, 4)), 0, "gradcam", (1, 4, 4)), img)
        expected = 0.6 * img + 0.4 * np.array([0, 0, 1.0])[:, None, None]
        np.testing.assert_allclose(rgb, expected)
        assert up.shape == (16, 16)

    def test_hottest_pixel_is_argmax(self, rng):
        values = rng.uniform(size=(4, 4))
        values /= values.max()
        rgb, up = overlay(Heatmap(values, 0, "gradcam", (1, 4, 4)), np.full((3, 32, 32), 0.5))
        heat = rgb[0] - rgb[2]
        assert np.unravel_index(heat.argmax(), heat.shape) == np.unravel_index(up.argmax(), up.shape)

    def test_png_written(self, tmp_path):
        h = Heatmap(np.eye(4), 1, "gradcampp", (1, 4, 4))
        path = tmp_path / "out" / overlay_name("WSSV/img_01", "gradcampp", "WSSV")
        render_overlay(h, np.zeros((3, 20, 24)), path)
        assert path.name == "WSSV_img_01_gradcampp_WSSV.png"
        with Image.open(path) as im:
            assert im.size == (24, 20) and im.mode == "RGB"

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError, match="cannot write"):
            render_overlay(Heatmap(np.eye(2), 0, "gradcam", (1, 2, 2)), np.zeros((3, 4, 4)),
                           tmp_path / "file" / "sub.png")

    def test_text_dump(self, tmp_path):
        h = Heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), 0, "gradcam", (1, 2, 2))
        save_heatmap_text(h, tmp_path / "h.txt")
        np.testing.assert_allclose(np.loadtxt(tmp_path / "h.txt"), h.values)
