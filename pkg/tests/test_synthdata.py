import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfuse import synthdata as sd
from hyperfuse.errors import IndivisibleShape, ShapeMismatch

ENC = sd.make_encoder(8, 4, seed=0)


class TestSceneSpec:
    def test_presets_valid(self):
        assert {"screw", "nut", "gasket"} <= set(sd.SCENES)

    @pytest.mark.parametrize("kwargs", [
        dict(primitive="cone", color=(0, 0, 0), size=0.5),
        dict(primitive="disk", color=(0, 0, 2), size=0.5),
        dict(primitive="disk", color=(0, 0, 0), size=0.0),
        dict(primitive="disk", color=(0, 0, 0), size=1.5),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            sd.SceneSpec(category_label="x", **kwargs)


class TestRender:
    def test_background_exactly_white(self):
        nut = sd.SCENES["nut"]
        for view, img in zip(sd.VIEWS, sd.render_views(nut, sd.VIEWS, 64)):
            bg = ~sd.coverage(nut, view, 64)
            assert bg.any()
            assert np.all(img[bg] == 1.0)

    def test_disk_area(self):
        disk = sd.SceneSpec("disk", (0.2, 0.2, 0.9), 0.5, "plain")
        (img,) = sd.render_views(disk, ["up"], 64)
        active = np.count_nonzero(np.any(img != 1.0, axis=2))
        assert abs(active - np.pi * 16**2) / (np.pi * 16**2) < 0.05

    def test_deterministic(self):
        a = sd.render_views(sd.SCENES["screw"], resolution=32, seed=4, jitter=2.0)
        b = sd.render_views(sd.SCENES["screw"], resolution=32, seed=4, jitter=2.0)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_views_differ(self):
        front, up = sd.render_views(sd.SCENES["screw"], ["front", "up"], 64)
        assert not np.array_equal(front, up)

    def test_screw_has_slot(self):
        plain = sd.SceneSpec("disk", (0.15, 0.35, 0.85), 0.5, "plain")
        assert sd.coverage(sd.SCENES["screw"], "up", 64).sum() < sd.coverage(plain, "up", 64).sum()

    def test_unknown_view(self):
        with pytest.raises(ValueError):
            sd.render_views(sd.SCENES["screw"], ["side"])


class TestEncoder:
    def test_shape_full_res(self):
        assert sd.toy_encode(np.ones((512, 512, 3)), ENC).shape == (64, 64, 4)

    def test_zero_image(self):
        assert np.all(sd.toy_encode(np.zeros((16, 16, 3)), ENC) == 0.0)

    def test_additive(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((16, 24, 3)), rng.random((16, 24, 3))
        np.testing.assert_allclose(sd.toy_encode(a, ENC) + sd.toy_encode(b, ENC), sd.toy_encode(a + b, ENC), atol=1e-12)

    def test_homogeneous(self):
        a = np.random.default_rng(1).random((8, 8, 3))
        np.testing.assert_allclose(sd.toy_encode(3.5 * a, ENC), 3.5 * sd.toy_encode(a, ENC), atol=1e-12)

    def test_seeded(self):
        assert np.array_equal(sd.make_encoder(8, 4, 3).projection, sd.make_encoder(8, 4, 3).projection)
        assert not np.array_equal(sd.make_encoder(8, 4, 3).projection, ENC.projection)

    def test_indivisible(self):
        with pytest.raises(IndivisibleShape):
            sd.toy_encode(np.ones((60, 64, 3)), ENC)

    def test_needs_rgb(self):
        with pytest.raises(ShapeMismatch):
            sd.toy_encode(np.ones((8, 8)), ENC)


class TestDecode:
    def test_right_inverse(self):
        z = np.random.default_rng(2).standard_normal((4, 5, 4))
        np.testing.assert_allclose(sd.toy_encode(sd.toy_decode(z, ENC), ENC), z, atol=1e-9)

    def test_zero(self):
        assert np.all(sd.toy_decode(np.zeros((2, 2, 4)), ENC) == 0.0)

    def test_flat_colour_patches_survive(self):
        # flat-coloured 8x8 blocks lie in the encoder's row space
        for name in ("screw", "nut"):
            img = sd.render_views(sd.SCENES[name], ["up"], 64)[0]
            flat = img.reshape(8, 8, 8, 8, 3).mean(axis=(1, 3))
            blocky = np.repeat(np.repeat(flat, 8, axis=0), 8, axis=1)
            assert sd.psnr(sd.toy_decode(sd.toy_encode(blocky, ENC), ENC), blocky) > 200

    def test_psnr_identical(self):
        assert sd.psnr(np.ones(3), np.ones(3)) == float("inf")

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sd.toy_decode(np.zeros((2, 2, 3)), ENC)


class TestPerturb:
    z = np.random.default_rng(5).standard_normal((2, 64, 64, 4))

    @pytest.mark.parametrize("kind", ["gaussian", "single-view-shift", "channel-scale"])
    def test_zero_magnitude_bit_exact(self, kind):
        assert sd.perturb(self.z, kind, 0.0).tobytes() == self.z.tobytes()

    def test_gaussian_rms(self):
        d = sd.perturb(self.z, "gaussian", 0.3, seed=1) - self.z
        assert abs(np.sqrt(np.mean(d * d)) - 0.3) / 0.3 < 0.1

    def test_single_view_shift_touches_one_view(self):
        d = sd.perturb(self.z, "single-view-shift", 0.5, seed=2) - self.z
        touched = [np.any(d[i] != 0) for i in range(2)]
        assert sum(touched) == 1

    def test_channel_scale(self):
        out = sd.perturb(self.z, "channel-scale", 0.1, seed=3)
        ratio = out / self.z
        np.testing.assert_allclose(ratio, np.broadcast_to(ratio[0, 0, 0], ratio.shape), rtol=1e-10)

    def test_unknown(self):
        with pytest.raises(ValueError):
            sd.perturb(self.z, "blur", 0.1)

    def test_negative(self):
        with pytest.raises(ValueError):
            sd.perturb(self.z, "gaussian", -1.0)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([8, 16, 32]), st.integers(0, 1000), st.floats(-3, 3))
def test_encode_linear_property(res, seed, alpha):
    rng = np.random.default_rng(seed)
    a, b = rng.random((res, res, 3)), rng.random((res, res, 3))
    lhs = sd.toy_encode(alpha * a + b, ENC)
    rhs = alpha * sd.toy_encode(a, ENC) + sd.toy_encode(b, ENC)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
