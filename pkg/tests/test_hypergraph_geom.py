import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfuse import diffusion_toy as dt
from hyperfuse import hypergraph_geom as hg
from hyperfuse import synthdata as sd
from hyperfuse.errors import DivergenceDetected, EmptyMask, IndivisibleShape, ShapeMismatch
from hyperfuse.tensor_core import finite_diff_grad, relative_error

from .oracles import (
    block_any_oracle,
    brute_force_hyperedges,
    dense_hgnn_layer,
    hsv_mask_oracle,
    random_hypergraph,
)

SCHED = dt.make_schedule(1000)


def random_branches(seed, shape=(2, 4, 4, 2), scale=0.3):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    return z, z + scale * rng.standard_normal(shape)


class TestNodeFeatures:
    def test_paper_scale_shape(self):
        assert hg.build_node_features(np.zeros((4, 64, 64, 4))).shape == (16384, 4)

    def test_single_view_scanline(self):
        v = np.arange(12.0).reshape(1, 2, 2, 3)
        np.testing.assert_array_equal(hg.build_node_features(v), np.arange(12.0).reshape(4, 3))

    def test_index_oracle(self):
        z = np.random.default_rng(0).standard_normal((2, 3, 3, 2))
        f = hg.build_node_features(z)
        for i in range(2):
            for h in range(3):
                for w in range(3):
                    assert np.array_equal(f[i * 9 + h * 3 + w], z[i, h, w])

    def test_multiview_type(self):
        mv = hg.MultiViewLatents(np.zeros((2, 3, 3, 4)), ("front", "up"))
        assert hg.build_node_features(mv).shape == (18, 4)

    def test_multiview_validates(self):
        with pytest.raises(ShapeMismatch):
            hg.MultiViewLatents(np.zeros((3, 3, 4)), ("front",))
        with pytest.raises(ShapeMismatch):
            hg.MultiViewLatents(np.zeros((2, 3, 3, 4)), ("front",))


class TestBuildHypergraph:
    def test_k1_distinct_rows(self):
        f = np.random.default_rng(1).standard_normal((12, 3))
        assert hg.build_hypergraph(f, 1).hyperedges == [frozenset({i}) for i in range(12)]

    def test_identical_rows_tie_break(self):
        h = hg.build_hypergraph(np.ones((5, 3)), 2)
        assert all(e == frozenset({0, 1}) for e in h.hyperedges)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        f = np.random.default_rng(seed).standard_normal((50, 4))
        assert hg.build_hypergraph(f, 8).hyperedges == brute_force_hyperedges(f, 8)

    def test_blocked_equals_unblocked(self):
        f = np.random.default_rng(9).standard_normal((70, 3))
        assert np.array_equal(hg.build_hypergraph(f, 5, block=7).members, hg.build_hypergraph(f, 5).members)

    def test_sizes_and_self_inclusion(self):
        f = np.random.default_rng(4).standard_normal((20, 4))
        h = hg.build_hypergraph(f, 6)
        assert len(h.hyperedges) == 20
        for i, e in enumerate(h.hyperedges):
            assert len(e) == 6 and i in e
            assert all(0 <= v < 20 for v in e)

    def test_k_exceeds_n(self):
        h = hg.build_hypergraph(np.random.default_rng(0).standard_normal((3, 2)), 8)
        assert all(e == frozenset({0, 1, 2}) for e in h.hyperedges)

    def test_rank_checked(self):
        with pytest.raises(ShapeMismatch):
            hg.build_hypergraph(np.ones(4), 2)


class TestHgnnLayer:
    def test_fixed_point(self):
        h = hg.Hypergraph.from_hyperedges(1, [{0}])
        x = np.array([[3.0, -1.0]])
        np.testing.assert_array_equal(hg.hgnn_layer(h, x, np.eye(2), "identity"), x)

    def test_three_node_example(self):
        h = hg.Hypergraph.from_hyperedges(3, [{0, 1}, {0, 1}, {2}])
        out = hg.hgnn_layer(h, [[0.0], [2.0], [5.0]], np.eye(1), "identity")
        np.testing.assert_allclose(out, [[1.0], [1.0], [5.0]])

    @pytest.mark.parametrize("act", ["relu", "identity"])
    def test_zero_weights(self, act):
        h = hg.build_hypergraph(np.random.default_rng(0).standard_normal((6, 3)), 2)
        assert np.all(hg.hgnn_layer(h, np.ones((6, 3)), np.zeros((3, 4)), act) == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, edges = random_hypergraph(rng)
        x, w = rng.standard_normal((n, 3)), rng.standard_normal((3, 2))
        h = hg.Hypergraph.from_hyperedges(n, edges)
        for act in ("relu", "identity"):
            np.testing.assert_allclose(hg.hgnn_layer(h, x, w, act), dense_hgnn_layer(n, edges, x, w, act),
                                       rtol=0, atol=1e-10)

    def test_isolated_node_gets_zero(self):
        h = hg.Hypergraph.from_hyperedges(3, [{0, 1}])
        out = hg.hgnn_layer(h, [[1.0], [3.0], [7.0]], np.eye(1), "identity")
        np.testing.assert_allclose(out, [[2.0], [2.0], [0.0]])

    def test_shape_checks(self):
        h = hg.Hypergraph.from_hyperedges(2, [{0, 1}])
        with pytest.raises(ShapeMismatch):
            hg.hgnn_layer(h, np.ones((3, 2)), np.eye(2))
        with pytest.raises(ShapeMismatch):
            hg.hgnn_layer(h, np.ones((2, 2)), np.eye(3))


class TestHgnnForward:
    def test_zero_layers_identity(self):
        h = hg.build_hypergraph(np.random.default_rng(0).standard_normal((5, 2)), 2)
        x = np.random.default_rng(1).standard_normal((5, 2))
        assert np.array_equal(hg.hgnn_forward(h, x, hg.HgnnParams(())), x)

    def test_one_layer(self):
        f = np.random.default_rng(2).standard_normal((7, 3))
        h = hg.build_hypergraph(f, 3)
        p = hg.make_hgnn_params(3, 1, seed=4)
        np.testing.assert_array_equal(hg.hgnn_forward(h, f, p), hg.hgnn_layer(h, f, p.layers[0], p.activation))

    def test_two_layer_dense_oracle(self):
        f = np.random.default_rng(3).standard_normal((5, 3))
        h = hg.build_hypergraph(f, 2)
        p = hg.make_hgnn_params(3, 2, hidden=4, seed=1)
        edges = brute_force_hyperedges(f, 2)
        ref = dense_hgnn_layer(5, edges, dense_hgnn_layer(5, edges, f, p.layers[0], "relu"), p.layers[1], "relu")
        np.testing.assert_allclose(hg.hgnn_forward(h, f, p), ref, atol=1e-12)

    def test_params_chain(self):
        with pytest.raises(ShapeMismatch):
            hg.HgnnParams((np.ones((2, 3)), np.ones((2, 2))))
        assert hg.make_hgnn_params(4, 3, hidden=6).dims == [4, 6, 6, 6]


class TestMasks:
    def test_white_is_background(self):
        assert np.all(hg.hsv_mask(np.ones((4, 4, 3))) == 0)

    def test_black_is_foreground(self):
        assert np.all(hg.hsv_mask(np.zeros((4, 4, 3))) == 1)

    def test_red_disk(self):
        disk = sd.SceneSpec("disk", (1.0, 0.0, 0.0), 0.5, "plain")
        img = sd.render_views(disk, ["up"], 32)[0]
        np.testing.assert_array_equal(hg.hsv_mask(img), sd.coverage(disk, "up", 32).astype(float))

    def test_colorsys_oracle(self):
        img = np.random.default_rng(0).random((12, 9, 3))
        np.testing.assert_array_equal(hg.hsv_mask(img, 0.3, 0.6), hsv_mask_oracle(img, 0.3, 0.6))

    def test_downsample_all_active(self):
        assert np.all(hg.downsample_mask(np.ones((16, 16)), (4, 4)) == 1)

    def test_downsample_single_pixel(self):
        m = np.zeros((16, 16))
        m[9, 2] = 1
        out = hg.downsample_mask(m, (4, 4))
        assert out.sum() == 1 and out[2, 0] == 1

    def test_downsample_block_scan(self):
        m = (np.random.default_rng(1).random((512, 512)) < 0.0005).astype(float)
        np.testing.assert_array_equal(hg.downsample_mask(m, (64, 64)), block_any_oracle(m, 64, 64))

    def test_downsample_indivisible(self):
        with pytest.raises(IndivisibleShape):
            hg.downsample_mask(np.ones((10, 10)), (4, 4))


class TestMvhgLoss:
    p = hg.make_hgnn_params(2, 2, activation="identity", seed=0)

    def test_identity_zero(self):
        z, _ = random_branches(0)
        m = np.ones(z.shape[:3])
        loss, grad = hg.mvhg_loss(z, z, m, m, self.p, 3)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_gradient_small_case(self):
        z, zp = random_branches(1)
        m = np.ones(z.shape[:3])
        st_ = hg.build_structures(z, zp, 3)
        _, grad = hg.mvhg_loss(z, zp, m, m, self.p, 3, st_)
        fd = finite_diff_grad(lambda x: hg.mvhg_loss(z, x, m, m, self.p, 3, st_)[0], zp, 1e-6)
        assert relative_error(grad, fd) < 1e-4

    def test_monotone_perturbation(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((2, 8, 8, 4))
        d = rng.standard_normal(z.shape)
        p = hg.make_hgnn_params(4, 2, seed=0)
        m = np.ones(z.shape[:3])
        st_ = hg.build_structures(z, z, 8)
        l1, _ = hg.mvhg_loss(z, z + 1e-3 * d, m, m, p, 8, st_)
        l2, _ = hg.mvhg_loss(z, z + 2e-3 * d, m, m, p, 8, st_)
        assert 0 < l1 < l2

    def test_union_mask_count(self):
        z = np.ones((1, 1, 2, 1))
        zp = np.ones((1, 1, 2, 1))
        p = hg.HgnnParams(())
        # node 0 active only in the reference, node 1 in neither
        loss, _ = hg.mvhg_loss(z, zp, np.array([[[1, 0]]]), np.array([[[0, 0]]]), p, 1)
        assert loss == pytest.approx(1.0)

    def test_empty_masks(self):
        z, zp = random_branches(3)
        zero = np.zeros(z.shape[:3])
        with pytest.raises(EmptyMask):
            hg.mvhg_loss(z, zp, zero, zero, self.p, 3)

    def test_branch_shapes(self):
        z, _ = random_branches(3)
        with pytest.raises(ShapeMismatch):
            hg.mvhg_loss(z, z[:1], np.ones(z.shape[:3]), np.ones((1, 4, 4)), self.p, 3)

    def test_view_order_invariant(self):
        z, zp = random_branches(4, (3, 4, 4, 2))
        m = (np.random.default_rng(4).random(z.shape[:3]) < 0.8).astype(float)
        perm = [2, 0, 1]
        a, _ = hg.mvhg_loss(z, zp, m, m, self.p, 4)
        b, _ = hg.mvhg_loss(z[perm], zp[perm], m[perm], m[perm], self.p, 4)
        assert abs(a - b) < 1e-10


class TestTotalLoss:
    def test_pure_ism(self):
        assert hg.total_loss(2.5, 7.0, 1.0, 0.0) == 2.5

    def test_unit_weights(self):
        assert hg.total_loss(2.0, 3.0, 1.0, 1.0) == 5.0

    def test_defaults(self):
        assert hg.total_loss(1.0, 1.0) == pytest.approx(1.1)

    def test_negative(self):
        with pytest.raises(ValueError):
            hg.total_loss(1.0, 1.0, -1.0)


class TestPipeline:
    enc = sd.make_encoder(8, 4, 0)
    images = sd.render_views(sd.SCENES["screw"], sd.VIEWS, 64)

    def _den(self, images):
        return dt.GaussianOracle(sd.encode_views(images, self.enc), SCHED)

    def test_small_t_recovers_latents(self):
        p = hg.make_hgnn_params(4, 2)
        loss, diag = hg.mvhg_pipeline(self.images, "screw", self._den(self.images), SCHED, self.enc, p, t=5,
                                      mode="scaled")
        assert diag["noise_residual"] < 1e-10
        assert diag["reconstruction_gap"] < 1e-10
        assert loss < 1e-20

    def test_literal_gap_reported(self):
        p = hg.make_hgnn_params(4, 2)
        _, diag = hg.mvhg_pipeline(self.images, "screw", self._den(self.images), SCHED, self.enc, p, t=10)
        assert diag["mode"] == "literal"
        assert diag["noise_residual"] < 1e-10
        _, scaled = hg.mvhg_pipeline(self.images, "screw", self._den(self.images), SCHED, self.enc, p, t=10,
                                     mode="scaled")
        assert scaled["reconstruction_gap"] < 1e-10
        assert diag["reconstruction_gap"] > 1e-3

    def test_duplicate_views(self):
        p = hg.make_hgnn_params(4, 2)
        # textured image: flat backgrounds would create similarity ties
        img = np.random.default_rng(5).random((32, 32, 3))
        one, two = [img], [img, img]
        eps1 = np.random.default_rng(0).standard_normal((1, 4, 4, 4))
        l1, _ = hg.mvhg_pipeline(one, "c", self._den(one), SCHED, self.enc, p, k=4, eps=eps1)
        l2, _ = hg.mvhg_pipeline(two, "c", self._den(two), SCHED, self.enc, p, k=8,
                                 eps=np.concatenate([eps1, eps1]))
        # each node gains its twin in every hyperedge, so k doubles to keep edges equivalent
        assert l2 == pytest.approx(l1, rel=1e-10)

    def test_deterministic(self):
        p = hg.make_hgnn_params(4, 2)
        a, _ = hg.mvhg_pipeline(self.images, "c", self._den(self.images), SCHED, self.enc, p, seed=3)
        b, _ = hg.mvhg_pipeline(self.images, "c", self._den(self.images), SCHED, self.enc, p, seed=3)
        assert a == b


class TestOptimize:
    mu = sd.encode_views(sd.render_views(sd.SCENES["nut"], sd.VIEWS, 32), sd.make_encoder(8, 4, 0))
    p = hg.make_hgnn_params(4, 2)

    def _run(self, **kw):
        den = dt.GaussianOracle(self.mu, SCHED)
        init = sd.perturb(self.mu, "gaussian", 0.5, seed=1)
        return hg.optimize_latents(init, den, SCHED, self.p, **kw), init

    def test_ism_only_converges(self):
        res, init = self._run(steps=40, lambda_mvhg=0.0)
        assert np.linalg.norm(res.latents - self.mu) < np.linalg.norm(init - self.mu)
        assert res.trajectory[-1].l_ism < res.trajectory[0].l_ism

    def test_one_step(self):
        res, _ = self._run(steps=1)
        assert len(res.trajectory) == 1

    def test_zero_steps_forbidden(self):
        with pytest.raises(ValueError):
            self._run(steps=0)

    def test_deterministic(self):
        a, _ = self._run(steps=15, seed=2)
        b, _ = self._run(steps=15, seed=2)
        assert a.trajectory == b.trajectory

    def test_divergence(self):
        with pytest.raises(DivergenceDetected) as info:
            self._run(steps=50, lr=500.0)
        assert len(info.value.trajectory) >= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["relu", "identity"]), st.integers(1, 6))
def test_mvhg_nonnegative_and_self_zero(seed, act, k):
    z, zp = random_branches(seed, (2, 3, 3, 2))
    p = hg.make_hgnn_params(2, 2, activation=act, seed=seed)
    m = (np.random.default_rng(seed).random(z.shape[:3]) < 0.6).astype(float)
    m[0, 0, 0] = 1
    loss, _ = hg.mvhg_loss(z, zp, m, m, p, k)
    assert loss >= 0
    assert hg.mvhg_loss(zp, zp, m, m, p, k)[0] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_hgnn_layer_matches_dense_property(seed):
    rng = np.random.default_rng(seed)
    n, edges = random_hypergraph(rng, 8)
    x, w = rng.standard_normal((n, 2)), rng.standard_normal((2, 3))
    h = hg.Hypergraph.from_hyperedges(n, edges)
    np.testing.assert_allclose(hg.hgnn_layer(h, x, w, "relu"), dense_hgnn_layer(n, edges, x, w, "relu"), atol=1e-10)
