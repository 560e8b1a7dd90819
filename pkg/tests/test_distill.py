"""Moment pooling, affinity graphs, and distillation losses.

Expected values come from hand computation or the per-position loop oracle
in conftest; every backward pass is checked against central finite
differences.
"""

import numpy as np
import pytest

from regiondistill.distill import (
    AffinityGraph,
    MomentSet,
    affinity_distill,
    affinity_graph_backward,
    affinity_loss,
    attention_distill,
    attention_loss,
    attention_map,
    attention_map_backward,
    build_affinity_graph,
    edges_to_pgm_values,
    export_graph,
    import_graph,
    kd_probability_loss,
    moment_pool,
    moment_pool_backward,
    total_loss,
)
from regiondistill.errors import ConfigError, ContractError, FormatError, ShapeError
from regiondistill.ops import fd_check

from conftest import aoi_from_feature_masks, moments_loops, random_feature_masks


def single_mask_aoi(h, w, coords, n=1, k=0):
    masks = np.zeros((h, w, n))
    for i, j in coords:
        masks[i, j, k] = 1.0
    return aoi_from_feature_masks(masks)


class TestMomentPool:
    def test_hand_values_two_pixels(self):
        features = np.zeros((2, 2, 1))
        features[0, 0, 0] = 1.0
        features[1, 1, 0] = 3.0
        aoi = single_mask_aoi(2, 2, [(0, 0), (1, 1)])
        ms = moment_pool(features, aoi)
        assert ms.mu1[0, 0] == pytest.approx(2.0, abs=1e-15)
        assert ms.mu2[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert ms.mu3[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_constant_region(self):
        features = np.full((3, 3, 2), 4.0)
        aoi = single_mask_aoi(3, 3, [(0, 0), (0, 1), (2, 2)])
        ms = moment_pool(features, aoi)
        np.testing.assert_array_equal(ms.mu1[0], [4.0, 4.0])
        np.testing.assert_array_equal(ms.mu2[0], [0.0, 0.0])
        np.testing.assert_array_equal(ms.mu3[0], [0.0, 0.0])

    def test_scaling_of_two_pixel_example(self):
        features = np.zeros((2, 2, 1))
        features[0, 0, 0] = 2.0
        features[1, 1, 0] = 6.0
        aoi = single_mask_aoi(2, 2, [(0, 0), (1, 1)])
        ms = moment_pool(features, aoi)
        assert ms.mu1[0, 0] == pytest.approx(4.0, abs=1e-15)
        assert ms.mu2[0, 0] == pytest.approx(4.0, abs=1e-15)
        assert ms.mu3[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_absent_class_zero_vectors(self, rng):
        features = rng.uniform(-1, 1, size=(4, 4, 3))
        masks = np.zeros((4, 4, 2))
        masks[1, 1, 0] = 1.0
        ms = moment_pool(features, aoi_from_feature_masks(masks))
        assert not ms.present[1]
        assert not ms.mu1[1].any() and not ms.mu2[1].any() and not ms.mu3[1].any()

    def test_mu2_nonnegative(self, rng):
        features = rng.uniform(-5, 5, size=(8, 8, 4))
        masks = random_feature_masks(rng, 8, 8, 3)
        ms = moment_pool(features, aoi_from_feature_masks(masks))
        assert (ms.mu2 >= 0).all()

    def test_matches_loop_oracle(self, rng):
        for _ in range(200):
            h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
            c = int(rng.integers(1, 9))
            n = int(rng.integers(1, 7))
            features = rng.uniform(-3, 3, size=(h, w, c))
            masks = random_feature_masks(rng, h, w, n, min_region=0)
            ms = moment_pool(features, aoi_from_feature_masks(masks))
            for k in range(n):
                mu1, mu2, mu3 = moments_loops(features, masks[:, :, k] > 0)
                np.testing.assert_allclose(ms.mu1[k], mu1, rtol=0, atol=1e-12)
                np.testing.assert_allclose(ms.mu2[k], mu2, rtol=0, atol=1e-12)
                np.testing.assert_allclose(ms.mu3[k], mu3, rtol=0, atol=1e-12)

    def test_spatial_permutation_invariance(self, rng):
        h = w = 5
        features = rng.uniform(-2, 2, size=(h, w, 3))
        masks = random_feature_masks(rng, h, w, 2)
        ms = moment_pool(features, aoi_from_feature_masks(masks))
        perm = rng.permutation(h * w)
        pf = features.reshape(h * w, 3)[perm].reshape(h, w, 3)
        pm = masks.reshape(h * w, 2)[perm].reshape(h, w, 2)
        ms_p = moment_pool(pf, aoi_from_feature_masks(pm))
        # summation order changes under the permutation, so allow fp noise
        np.testing.assert_allclose(ms_p.mu1, ms.mu1, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ms_p.mu2, ms.mu2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ms_p.mu3, ms.mu3, rtol=1e-12, atol=1e-12)

    def test_scaling_laws(self, rng):
        # mu1 -> a*mu1, mu2 -> a^2*mu2, mu3 -> mu3/a^3, needs mu2 >> eps
        features = rng.uniform(-300, 300, size=(6, 6, 2))
        masks = random_feature_masks(rng, 6, 6, 2, min_region=8)
        aoi = aoi_from_feature_masks(masks)
        base = moment_pool(features, aoi)
        assert (base.mu2[base.present] > 1e3).all()
        for a in (2.0, 3.0):
            scaled = moment_pool(a * features, aoi)
            np.testing.assert_allclose(scaled.mu1, a * base.mu1, rtol=1e-9)
            np.testing.assert_allclose(scaled.mu2, a * a * base.mu2, rtol=1e-9)
            np.testing.assert_allclose(scaled.mu3, base.mu3 / a**3, rtol=1e-9, atol=1e-15)

    def test_shape_mismatch(self, rng):
        features = rng.uniform(size=(4, 4, 2))
        aoi = single_mask_aoi(5, 5, [(0, 0)])
        with pytest.raises(ShapeError):
            moment_pool(features, aoi)


class TestMomentPoolBackward:
    def test_mean_gradient(self):
        features = np.arange(8.0).reshape(2, 2, 2)
        coords = [(0, 0), (0, 1), (1, 0)]
        aoi = single_mask_aoi(2, 2, coords)
        g = np.full((1, 2), 5.0)
        d = moment_pool_backward(features, aoi, g, np.zeros((1, 2)), np.zeros((1, 2)))
        for i, j in coords:
            np.testing.assert_allclose(d[i, j], 5.0 / 3.0, rtol=1e-15)
        assert not d[1, 1].any()

    def test_zero_upstream(self, rng):
        features = rng.uniform(size=(4, 4, 3))
        masks = random_feature_masks(rng, 4, 4, 2)
        aoi = aoi_from_feature_masks(masks)
        z = np.zeros((2, 3))
        d = moment_pool_backward(features, aoi, z, z, z)
        assert not d.any()

    def test_finite_differences(self, rng):
        # mu2 kept away from 0 via wide-spread features over decent regions
        for _ in range(5):
            features = rng.uniform(-1, 1, size=(6, 6, 3))
            masks = random_feature_masks(rng, 6, 6, 4, min_region=6)
            aoi = aoi_from_feature_masks(masks)
            ms = moment_pool(features, aoi)
            assert (ms.mu2[ms.present] > 1e-3).all()

            def value(inp):
                m = moment_pool(inp[0], aoi)
                return np.stack([m.mu1, m.mu2, m.mu3])

            def grad(inp, up):
                return (moment_pool_backward(inp[0], aoi, up[0], up[1], up[2]),)

            report = fd_check(value, grad, [features], rng=rng)
            assert report.passed, report


class TestAffinityGraph:
    def _moments(self, vectors, present=None):
        arr = np.asarray(vectors, dtype=np.float64)
        n, c = arr.shape
        present = np.ones(n, dtype=bool) if present is None else np.asarray(present)
        return MomentSet(n=n, c=c, mu1=arr, mu2=arr.copy(), mu3=arr.copy(), present=present)

    def test_orthogonal_vectors(self):
        g = build_affinity_graph(self._moments([[1.0, 0.0], [0.0, 1.0]]))
        assert g.edges[0, 1, 0] == pytest.approx(0.0, abs=1e-12)

    def test_hand_cosine(self):
        g = build_affinity_graph(self._moments([[1.0, 1.0], [1.0, 0.0]]))
        assert g.edges[0, 1, 0] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-9)

    def test_single_present_class(self):
        ms = self._moments([[1.0, 2.0], [3.0, 4.0]], present=[True, False])
        g = build_affinity_graph(ms)
        assert g.valid[0, 0] and not g.valid[0, 1] and not g.valid[1, 1]
        assert g.edges[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
        assert not g.edges[0, 1].any() and not g.edges[1, 1].any()

    def test_symmetry_bound_diagonal(self, rng):
        features = rng.uniform(-2, 2, size=(8, 8, 6))
        masks = random_feature_masks(rng, 8, 8, 4, min_region=4)
        g = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks)))
        np.testing.assert_array_equal(g.edges, np.transpose(g.edges, (1, 0, 2)))
        assert (np.abs(g.edges) <= 1.0 + 1e-9).all()
        for k in range(4):
            for r, mu in enumerate((g.nodes.mu1, g.nodes.mu2, g.nodes.mu3)):
                if g.nodes.present[k] and np.linalg.norm(mu[k]) > 0:
                    assert g.edges[k, k, r] == pytest.approx(1.0, abs=1e-9)

    def test_cosine_scale_invariance(self, rng):
        ms = self._moments(rng.standard_normal((4, 8)))
        g = build_affinity_graph(ms)
        scales = rng.uniform(0.5, 10.0, size=4)
        scaled = MomentSet(
            n=4,
            c=8,
            mu1=ms.mu1 * scales[:, None],
            mu2=ms.mu2 * scales[:, None],
            mu3=ms.mu3 * scales[:, None],
            present=ms.present,
        )
        g2 = build_affinity_graph(scaled)
        np.testing.assert_allclose(g2.edges, g.edges, rtol=0, atol=1e-9)


class TestAffinityLoss:
    def _graph_from_features(self, rng, seed_shift=0):
        features = rng.uniform(-2, 2, size=(6, 6, 4)) + seed_shift
        masks = random_feature_masks(rng, 6, 6, 3, min_region=5)
        return build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks))), masks

    def test_identical_graphs(self, rng):
        g, _ = self._graph_from_features(rng)
        loss, d = affinity_loss(g, g)
        assert loss == 0.0
        assert not d.any()

    def test_hand_value_single_mismatch(self):
        # n_p = 2; one symmetric off-diagonal pair differs by 1 in one order
        nodes = MomentSet(
            n=2, c=2,
            mu1=np.ones((2, 2)), mu2=np.ones((2, 2)), mu3=np.ones((2, 2)),
            present=np.array([True, True]),
        )
        valid = np.ones((2, 2), dtype=bool)
        edges_t = np.ones((2, 2, 3))
        edges_s = edges_t.copy()
        edges_s[0, 1, 0] = 0.0
        edges_s[1, 0, 0] = 0.0
        gs = AffinityGraph(n=2, edges=edges_s, nodes=nodes, valid=valid)
        gt = AffinityGraph(n=2, edges=edges_t, nodes=nodes, valid=valid)
        loss, d = affinity_loss(gs, gt)
        assert loss == pytest.approx(1.0 / 6.0, abs=1e-15)
        # gradient of the two mismatched entries: 2 * (1/12) * (-1)
        assert d[0, 1, 0] == pytest.approx(-1.0 / 6.0, abs=1e-15)
        assert d[1, 0, 0] == pytest.approx(-1.0 / 6.0, abs=1e-15)

    def test_upper_bound_value(self):
        nodes = MomentSet(
            n=2, c=1,
            mu1=np.ones((2, 1)), mu2=np.ones((2, 1)), mu3=np.ones((2, 1)),
            present=np.array([True, True]),
        )
        valid = np.ones((2, 2), dtype=bool)
        gs = AffinityGraph(n=2, edges=np.full((2, 2, 3), 1.0), nodes=nodes, valid=valid)
        gt = AffinityGraph(n=2, edges=np.full((2, 2, 3), -1.0), nodes=nodes, valid=valid)
        loss, _ = affinity_loss(gs, gt)
        assert loss == pytest.approx(4.0, abs=1e-15)

    def test_bounds_and_symmetry_in_value(self, rng):
        for _ in range(10):
            fa = rng.uniform(-2, 2, size=(6, 6, 4))
            fb = rng.uniform(-2, 2, size=(6, 6, 5))
            masks = random_feature_masks(rng, 6, 6, 3, min_region=5)
            aoi = aoi_from_feature_masks(masks)
            ga = build_affinity_graph(moment_pool(fa, aoi))
            gb = build_affinity_graph(moment_pool(fb, aoi))
            lab, _ = affinity_loss(ga, gb)
            lba, _ = affinity_loss(gb, ga)
            assert lab == pytest.approx(lba, rel=1e-15)
            assert 0.0 <= lab <= 4.0

    def test_mismatched_valid_masks(self, rng):
        features = rng.uniform(size=(4, 4, 2))
        masks_a = np.zeros((4, 4, 2))
        masks_a[0, 0, 0] = 1.0
        masks_b = masks_a.copy()
        masks_b[1, 1, 1] = 1.0
        ga = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks_a)))
        gb = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks_b)))
        with pytest.raises(ContractError):
            affinity_loss(ga, gb)

    def test_order_subset(self, rng):
        g1, _ = self._graph_from_features(rng)
        g2, _ = self._graph_from_features(rng, seed_shift=0.5)
        with pytest.raises(ConfigError):
            affinity_loss(g1, g1, orders=())
        loss_all, _ = affinity_loss(g1, g2, orders=(1, 2, 3))
        parts = [affinity_loss(g1, g2, orders=(r,))[0] for r in (1, 2, 3)]
        assert loss_all == pytest.approx(sum(parts) / 3.0, rel=1e-12)


class TestAttention:
    def test_zero_features(self):
        a = attention_map(np.zeros((3, 3, 4)))
        assert not a.any()

    def test_single_channel_hand_value(self):
        f = np.array([[[1.0], [0.0]], [[0.0], [0.0]]])
        a = attention_map(f)
        np.testing.assert_allclose(a, [[1.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_scale_invariance(self, rng):
        f = rng.uniform(-1, 1, size=(4, 5, 3))
        a = attention_map(f)
        a2 = attention_map(3.5 * f)
        np.testing.assert_allclose(a2, a, atol=1e-12)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)
        assert (a >= 0).all()

    def test_loss_identical(self, rng):
        f = rng.uniform(-1, 1, size=(4, 4, 2))
        a = attention_map(f)
        loss, d = attention_loss(a, a)
        assert loss == 0.0 and not d.any()

    def test_loss_zero_vs_unit_norm(self, rng):
        f = rng.uniform(0.5, 1.0, size=(3, 3, 2))
        a_t = attention_map(f)
        loss, _ = attention_loss(np.zeros((3, 3)), a_t)
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_loss_resizes_teacher(self, rng):
        a_s = attention_map(rng.uniform(size=(4, 4, 2)))
        a_t = attention_map(rng.uniform(size=(8, 8, 2)))
        loss, d = attention_loss(a_s, a_t)
        assert d.shape == (4, 4)
        assert loss >= 0.0

    def test_map_gradient_finite_differences(self, rng):
        f = rng.uniform(0.2, 1.0, size=(3, 4, 2))
        report = fd_check(
            lambda inp: attention_map(inp[0]),
            lambda inp, up: (attention_map_backward(inp[0], up),),
            [f],
            rng=rng,
        )
        assert report.passed, report

    def test_attention_distill_gradient(self, rng):
        f_s = rng.uniform(-1, 1, size=(4, 4, 2))
        f_t = rng.uniform(-1, 1, size=(4, 4, 3))
        report = fd_check(
            lambda inp: np.array(attention_distill(inp[0], f_t)[0]),
            lambda inp, up: (attention_distill(inp[0], f_t)[1] * up,),
            [f_s],
            rng=rng,
        )
        assert report.passed, report


class TestTotalLoss:
    def test_weighted_sum(self):
        rep = total_loss(1.0, [0.2], [0.3], 0.1, 0.1)
        assert rep.total == pytest.approx(1.05, abs=1e-15)
        assert rep.total == rep.seg + rep.alpha1 * rep.affinity + rep.alpha2 * rep.attention

    def test_disabled_distillation(self):
        rep = total_loss(0.7, [0.5, 0.5], [0.9], 0.0, 0.0)
        assert rep.total == 0.7

    def test_multiple_taps_summed(self):
        rep = total_loss(1.0, [0.1, 0.3], [0.2, 0.2], 0.1, 0.1)
        assert rep.affinity == pytest.approx(0.4)
        assert rep.attention == pytest.approx(0.4)
        assert rep.total == pytest.approx(1.0 + 0.04 + 0.04, abs=1e-12)

    def test_negative_component_rejected(self):
        with pytest.raises(ContractError):
            total_loss(-0.1, [], [], 0.1, 0.1)
        with pytest.raises(ContractError):
            total_loss(0.1, [-1.0], [], 0.1, 0.1)


class TestKdProbabilityLoss:
    def test_identical_logits(self, rng):
        logits = rng.uniform(-1, 1, size=(3, 3, 4))
        loss, d = kd_probability_loss(logits, logits, 2.0)
        assert loss == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(d, 0.0, atol=1e-15)

    def test_hand_value(self):
        teacher = np.zeros((1, 1, 2))
        student = np.zeros((1, 1, 2))
        student[0, 0, 0] = np.log(3.0)
        loss, _ = kd_probability_loss(student, teacher, 1.0)
        assert loss == pytest.approx(0.5 * np.log(4.0 / 3.0), abs=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            kd_probability_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 0.0)

    def test_finite_differences(self, rng):
        teacher = rng.uniform(-2, 2, size=(3, 4, 4))
        student = rng.uniform(-2, 2, size=(3, 4, 4))
        for temp in (1.0, 4.0):
            report = fd_check(
                lambda inp: np.array(kd_probability_loss(inp[0], teacher, temp)[0]),
                lambda inp, up: (kd_probability_loss(inp[0], teacher, temp)[1] * up,),
                [student],
                rng=rng,
            )
            assert report.passed, report


class TestFullChain:
    def test_self_distillation_fixed_point(self, rng):
        features = rng.uniform(-1, 1, size=(6, 6, 4))
        masks = random_feature_masks(rng, 6, 6, 3, min_region=5)
        aoi = aoi_from_feature_masks(masks)
        graph = build_affinity_graph(moment_pool(features, aoi))
        l_m, d_m, _ = affinity_distill(features, aoi, graph)
        assert l_m == 0.0 and not d_m.any()
        l_a, d_a = attention_distill(features, features)
        assert l_a == 0.0 and not d_a.any()

    def test_chain_finite_differences(self, rng):
        checked = 0
        while checked < 5:
            f_s = rng.uniform(-1, 1, size=(6, 6, 3))
            f_t = rng.uniform(-1, 1, size=(6, 6, 4))
            masks = random_feature_masks(rng, 6, 6, 3, min_region=6)
            aoi = aoi_from_feature_masks(masks)
            ms = moment_pool(f_s, aoi)
            if not (ms.mu2[ms.present] > 1e-3).all():
                continue
            graph_t = build_affinity_graph(moment_pool(f_t, aoi))
            report = fd_check(
                lambda inp: np.array(affinity_distill(inp[0], aoi, graph_t)[0]),
                lambda inp, up: (affinity_distill(inp[0], aoi, graph_t)[1] * up,),
                [f_s],
                rng=rng,
            )
            assert report.passed, report
            checked += 1

    def test_graph_backward_matches_fd(self, rng):
        # isolate the cosine-edge jacobian: moments in, edges out
        mu = rng.standard_normal((3, 4))
        present = np.array([True, True, True])

        def pack(m):
            return MomentSet(n=3, c=4, mu1=m[0], mu2=m[1], mu3=m[2], present=present)

        def value(inp):
            return build_affinity_graph(pack(inp[0])).edges

        def grad(inp, up):
            g = affinity_graph_backward(pack(inp[0]), up)
            return (np.stack(g),)

        stacked = np.stack([mu, mu * 2.0 + 1.0, mu - 0.5])
        report = fd_check(value, grad, [stacked], rng=rng)
        assert report.passed, report


class TestGraphSerialization:
    def test_roundtrip_random_graphs(self, rng):
        for _ in range(10):
            features = rng.uniform(-2, 2, size=(5, 5, 3))
            masks = random_feature_masks(rng, 5, 5, 4, min_region=0)
            g = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks)))
            g2 = import_graph(export_graph(g))
            assert g2.n == g.n
            np.testing.assert_array_equal(g2.edges, g.edges)
            np.testing.assert_array_equal(g2.valid, g.valid)
            np.testing.assert_array_equal(g2.nodes.mu1, g.nodes.mu1)
            np.testing.assert_array_equal(g2.nodes.mu2, g.nodes.mu2)
            np.testing.assert_array_equal(g2.nodes.mu3, g.nodes.mu3)

    def test_smallest_graph(self):
        masks = np.ones((2, 2, 1))
        features = np.arange(4.0).reshape(2, 2, 1)
        g = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks)))
        doc = export_graph(g)
        g2 = import_graph(doc)
        assert g2.n == 1
        assert g2.edges[0, 0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_malformed_document(self):
        with pytest.raises(FormatError):
            import_graph("not json at all {")
        with pytest.raises(FormatError):
            import_graph("{\"n\": 2}")

    def test_compression_versus_probability_map(self):
        n, h_f, w_f = 4, 16, 16
        masks = np.ones((h_f, w_f, n))
        features = np.random.default_rng(0).uniform(size=(h_f, w_f, 8))
        g = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks)))
        edge_scalars = g.edges.size
        assert edge_scalars == 3 * n * n
        assert edge_scalars < h_f * w_f * n

    def test_edges_heatmap_range(self, rng):
        features = rng.uniform(-2, 2, size=(5, 5, 3))
        masks = random_feature_masks(rng, 5, 5, 3, min_region=2)
        g = build_affinity_graph(moment_pool(features, aoi_from_feature_masks(masks)))
        img = edges_to_pgm_values(g, 1)
        assert img.shape == (3, 3)
        assert img.dtype == np.uint8
