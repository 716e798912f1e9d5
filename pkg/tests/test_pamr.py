"""Affinities, iterative refinement and pseudo ground truth."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import mislabeled, two_region_case
from oracles import affinity_oracle, refine_oracle, sigma_oracle
from singlestage.numerics import ParameterError, ShapeError, softmax_over_channels
from singlestage.pamr import (IGNORE, PamrConfig, PseudoLabels, affinity, extract_pseudo_gt, local_sigma,
                              neighbour_offsets, refine, refine_sparse, stack_affinities)

dilation_sets = st.lists(st.integers(1, 6), min_size=1, max_size=4, unique=True).map(sorted)


def random_mask(rng, c, h, w, scale=3.0):
    return softmax_over_channels(rng.normal(size=(c, h, w)) * scale)


def dense_alpha(aff):
    """Oracle-style dict view of an AffinityField."""
    h, w = aff.shape
    out = {}
    for i in range(h):
        for j in range(w):
            out[(i, j)] = {(i + dy, j + dx): aff.weights[n, i, j]
                           for n, (dy, dx) in enumerate(aff.offsets) if aff.valid[n, i, j]}
    return out


class TestConfig:
    def test_defaults(self):
        cfg = PamrConfig()
        assert cfg.dilations == (1, 2, 4, 8, 12, 24)
        assert cfg.iterations == 10
        assert (cfg.fg_threshold, cfg.bg_threshold) == (0.6, 0.7)
        assert cfg.threshold_base == "channel"

    @pytest.mark.parametrize("kw", [{"dilations": (2, 1)}, {"dilations": ()}, {"dilations": (0, 1)},
                                    {"dilations": (1, 1)}, {"iterations": -1}, {"sigma_floor": 0.0},
                                    {"fg_threshold": 1.5}, {"threshold_base": "pixel"}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            PamrConfig(**kw)

    def test_violations_listed_together(self):
        with pytest.raises(ParameterError) as e:
            PamrConfig(dilations=(3, 2), iterations=-2)
        assert "dilations" in str(e.value) and "iterations" in str(e.value)

    def test_offsets(self):
        off = neighbour_offsets((1, 4))
        assert off.shape == (16, 2)
        assert (0, 0) not in {tuple(o) for o in off}
        assert {tuple(o) for o in off[8:]} == {(4 * a, 4 * b) for a in (-1, 0, 1) for b in (-1, 0, 1)} - {(0, 0)}


class TestLocalSigma:
    def test_constant_image_floored(self):
        cfg = PamrConfig()
        np.testing.assert_array_equal(local_sigma(np.full((3, 5, 5), 0.4), cfg), cfg.sigma_floor)

    def test_three_pixel_example(self):
        img = np.array([[[0.0, 1.0, 0.0]]])
        sig = local_sigma(img, PamrConfig(dilations=(1,)))
        assert sig[0, 0, 1] == pytest.approx(math.sqrt(2) / 3, abs=1e-15)

    def test_homogeneous(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 7, 7))
        cfg = PamrConfig(dilations=(1, 2), sigma_floor=1e-12)
        np.testing.assert_allclose(local_sigma(2.5 * img, cfg), 2.5 * local_sigma(img, cfg), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_oracle(self, seed):
        img = np.random.default_rng(seed).random((3, 6, 7))
        dil = (1, 2, 4)
        np.testing.assert_allclose(local_sigma(img, PamrConfig(dilations=dil)), sigma_oracle(img, dil, 1e-3),
                                   rtol=0, atol=1e-12)

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            local_sigma(np.zeros((4, 4)))


class TestAffinity:
    def test_constant_image_uniform(self):
        aff = affinity(np.full((3, 6, 6), 0.3), PamrConfig(dilations=(1, 2)))
        n_in = aff.valid.sum(axis=0)
        expected = np.where(aff.valid, 1.0 / n_in, 0.0)
        np.testing.assert_allclose(aff.weights, expected, atol=1e-15)

    def test_similar_neighbour_preferred(self):
        img = np.zeros((3, 1, 3))
        img[:, 0, 2] = 1.0
        aff = affinity(img, PamrConfig(dilations=(1,)))
        off = [tuple(o) for o in aff.offsets]
        left, right = off.index((0, -1)), off.index((0, 1))
        assert aff.weights[left, 0, 1] > aff.weights[right, 0, 1]

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle(self, seed):
        img = np.random.default_rng(seed).random((3, 6, 6))
        dil = (1, 2, 4)
        got = dense_alpha(affinity(img, PamrConfig(dilations=dil)))
        ref = affinity_oracle(img, dil)
        for key, taps in ref.items():
            assert len(taps) == len(got[key])
            for pos, a in taps:
                assert got[key][pos] == pytest.approx(a, abs=1e-12)

    def test_out_of_bounds_zero(self):
        aff = affinity(np.random.default_rng(1).random((3, 5, 5)))
        assert np.all(aff.weights[~aff.valid] == 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), dilation_sets, st.integers(0, 2**31))
    def test_rows_convex(self, h, w, dil, seed):
        img = np.random.default_rng(seed).random((3, h, w))
        aff = affinity(img, PamrConfig(dilations=tuple(dil)))
        assert np.all(aff.weights >= 0)
        row = aff.weights.sum(axis=0)
        np.testing.assert_allclose(row[~aff.isolated], 1.0, atol=1e-9)
        assert np.all(row[aff.isolated] == 0.0)

    def test_isolated_pixels_kept(self):
        aff = affinity(np.random.default_rng(0).random((3, 3, 3)), PamrConfig(dilations=(4,)))
        assert aff.isolated.all()
        m = random_mask(np.random.default_rng(1), 2, 3, 3)
        np.testing.assert_array_equal(refine(m, aff, 5), m)
        np.testing.assert_array_equal(refine_sparse(m, aff.to_sparse(), 5), m)

    def test_contrast_changes_weights_but_not_flat_case(self):
        img = np.random.default_rng(2).random((3, 6, 6)) * 0.4
        a1, a2 = affinity(img), affinity(2 * img)
        assert not np.allclose(a1.weights, a2.weights)
        f1, f2 = affinity(np.full((3, 6, 6), 0.2)), affinity(np.full((3, 6, 6), 0.4))
        np.testing.assert_allclose(f1.weights, f2.weights, atol=1e-15)

    def test_sparse_rows_stochastic(self):
        aff = affinity(np.random.default_rng(3).random((3, 9, 7)), PamrConfig(dilations=(1, 3)))
        op = aff.to_sparse()
        assert op.shape == (63, 63)
        np.testing.assert_allclose(np.asarray(op.sum(axis=1)).ravel(), 1.0, atol=1e-12)


class TestRefine:
    def test_zero_iterations_identity(self):
        rng = np.random.default_rng(0)
        m = random_mask(rng, 3, 5, 5)
        np.testing.assert_array_equal(refine(m, affinity(rng.random((3, 5, 5))), 0), m)

    def test_uniform_spread(self):
        m = np.zeros((1, 5, 5))
        m[0, 2, 2] = 1.0
        aff = affinity(np.full((3, 5, 5), 0.5), PamrConfig(dilations=(1,)))
        out = refine(m, aff, 1)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0 / 8
        expected[2, 2] = 0.0
        np.testing.assert_allclose(out[0], expected, atol=1e-15)

    def test_negative_iterations(self):
        with pytest.raises(ParameterError):
            refine(np.ones((1, 2, 2)), affinity(np.zeros((3, 2, 2))), -1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            refine(np.ones((1, 3, 3)), affinity(np.zeros((3, 2, 2))), 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(2, 10), st.integers(2, 10), st.integers(0, 2**31))
    def test_simplex_preserved(self, c, h, w, seed):
        rng = np.random.default_rng(seed)
        out = refine(random_mask(rng, c, h, w), affinity(rng.random((3, h, w))), 10)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)

    def test_channel_permutation_commutes(self):
        rng = np.random.default_rng(4)
        m, aff = random_mask(rng, 4, 8, 8), affinity(rng.random((3, 8, 8)))
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_allclose(refine(m[perm], aff, 5), refine(m, aff, 5)[perm], atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        img, m = rng.random((3, 6, 6)), random_mask(rng, 3, 6, 6)
        dil = (1, 2, 4)
        got = refine(m, affinity(img, PamrConfig(dilations=dil)), 4)
        np.testing.assert_allclose(got, refine_oracle(img, m, dil, 4), rtol=0, atol=1e-12)

    def test_sparse_path_agrees(self):
        rng = np.random.default_rng(5)
        img, m = rng.random((3, 16, 12)), random_mask(rng, 3, 16, 12)
        aff = affinity(img)
        np.testing.assert_allclose(refine_sparse(m, aff.to_sparse(), 10), refine(m, aff, 10), atol=1e-14)

    def test_batched_field(self):
        rng = np.random.default_rng(6)
        imgs, ms = rng.random((2, 3, 7, 7)), np.stack([random_mask(rng, 2, 7, 7) for _ in range(2)])
        affs = [affinity(i) for i in imgs]
        out = refine(ms, stack_affinities(affs), 3)
        for b in range(2):
            np.testing.assert_allclose(out[b], refine(ms[b], affs[b], 3), atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_boundary_snap(self, seed):
        image, truth, mask = two_region_case(seed)
        out = refine(mask, affinity(image, PamrConfig(dilations=(1, 2, 4, 8))), 10)
        assert mislabeled(out, truth) < mislabeled(mask, truth)


class TestPseudoGt:
    def test_threshold_example(self):
        refined = np.array([[[0.2, 0.5, 0.9]], [[0.8, 0.5, 0.1]]])
        out = extract_pseudo_gt(refined, [1])
        np.testing.assert_array_equal(out.labels, [[1, 1, 0]])
        assert out.valid

    def test_conflict_ignored(self):
        refined = np.array([[[0.0, 0.0]], [[0.5, 0.5]], [[0.5, 0.5]]])
        out = extract_pseudo_gt(refined, [1, 1])
        assert np.all(out.labels == IGNORE)
        assert not out.valid

    def test_unconfident_ignored(self):
        refined = np.array([[[1.0, 0.5, 0.0]], [[0.0, 0.5, 1.0]]])
        out = extract_pseudo_gt(refined, [1])
        np.testing.assert_array_equal(out.labels, [[0, IGNORE, 1]])

    def test_present_class_with_empty_channel_invalid(self):
        refined = np.zeros((3, 2, 2))
        refined[0] = 0.4
        refined[1] = 0.6
        out = extract_pseudo_gt(refined, [1, 1])
        assert not out.valid

    def test_absent_class_zeroed(self):
        refined = np.array([[[0.1, 0.9]], [[0.9, 0.1]], [[0.95, 0.0]]])
        out = extract_pseudo_gt(refined, [1, 0])
        np.testing.assert_array_equal(out.labels, [[1, 0]])
        assert out.valid

    def test_global_threshold_base(self):
        refined = np.array([[[0.9, 0.7, 0.8]], [[0.1, 0.3, 0.2]]])
        per_channel = extract_pseudo_gt(refined, [1])
        global_ = extract_pseudo_gt(refined, [1], PamrConfig(threshold_base="global"))
        assert per_channel.labels[0, 1] == IGNORE
        assert global_.counts[1] == 0 and not global_.valid

    def test_label_vector_length(self):
        with pytest.raises(ShapeError):
            extract_pseudo_gt(np.full((3, 2, 2), 1 / 3), [1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**31))
    def test_counts_consistent(self, c, seed):
        rng = np.random.default_rng(seed)
        refined = random_mask(rng, c + 1, 6, 6)
        present = (rng.random(c) < 0.6).astype(float)
        out = extract_pseudo_gt(refined, present)
        for k in range(c + 1):
            assert out.counts[k] == np.count_nonzero(out.labels == k)
        assert out.total == np.count_nonzero(out.labels != IGNORE)
        # absent classes never appear
        for k in np.flatnonzero(present == 0):
            assert out.counts[k + 1] == 0
        assert out.valid == all(out.counts[k + 1] > 0 for k in np.flatnonzero(present))

    def test_pseudo_labels_counts(self):
        p = PseudoLabels(np.array([[0, 2, IGNORE], [2, 1, 2]]), True, 2)
        np.testing.assert_array_equal(p.counts, [1, 1, 3])
        assert p.total == 5
