"""Fusion contracts: alignment, softmax-free masks, convex combination."""

import math

import numpy as np
import pytest

from evdetr.errors import NoPriorFrameError
from evdetr.fusion import FrameFeatureCache, FusionModule, fuse, normalize_masks, weight_mask
from evdetr.tensor import ParamStore, RngStream, Tensor


def weight_mask_reference(x, mq, mk):
    """Explicit double loop over pixel pairs."""
    q = x @ mq
    k = x @ mk
    d = x.shape[1]
    out = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        for j in range(x.shape[0]):
            out[i] += q[i] @ k[j] / math.sqrt(d)
    return out


class TestAlign:
    def _cache(self, times):
        cache = FrameFeatureCache(capacity=4)
        for t in times:
            cache.push(t, Tensor(np.full((2, 2), float(t))))
        return cache

    def test_most_recent_prior_frame(self):
        cache = self._cache([0, 40_000])
        t, feat = cache.align(50_000)
        assert t == 40_000

    def test_exact_timestamp_is_eligible(self):
        cache = self._cache([0, 40_000])
        t, _ = cache.align(40_000)
        assert t == 40_000

    def test_before_first_frame_errors(self):
        cache = self._cache([40_000])
        with pytest.raises(NoPriorFrameError):
            cache.align(10_000)


class TestWeightMask:
    def test_zero_features_zero_mask(self):
        rng = RngStream(0)
        x = Tensor(np.zeros((6, 8)))
        out = weight_mask(x, Tensor(rng.normal(1.0, (8, 8))), Tensor(rng.normal(1.0, (8, 8))))
        assert np.allclose(out.data, 0.0)

    def test_single_pixel_hand_evaluation(self):
        rng = RngStream(1)
        x = rng.normal(1.0, (1, 8))
        mq = rng.normal(1.0, (8, 8))
        mk = rng.normal(1.0, (8, 8))
        got = weight_mask(Tensor(x), Tensor(mq), Tensor(mk)).data
        want = (x @ mq) @ (x @ mk).T / math.sqrt(8)
        assert got[0] == pytest.approx(want[0, 0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pixel_pair_double_loop(self, seed):
        rng = RngStream(seed + 10)
        x = rng.normal(1.0, (12, 8))
        mq = rng.normal(0.5, (8, 8))
        mk = rng.normal(0.5, (8, 8))
        got = weight_mask(Tensor(x), Tensor(mq), Tensor(mk)).data
        want = weight_mask_reference(x, mq, mk)
        assert np.abs(got - want).max() < 1e-10


class TestNormalizeMasks:
    def test_equal_masks_split_half(self):
        w = Tensor(RngStream(2).normal(1.0, (9,)))
        m_i, m_s = normalize_masks(w, w)
        assert np.allclose(m_i.data, 0.5, atol=1e-12)
        assert np.allclose(m_s.data, 0.5, atol=1e-12)

    def test_ln3_gap_gives_three_quarters(self):
        w_i = Tensor(np.array([1.0 + math.log(3.0)]))
        w_s = Tensor(np.array([1.0]))
        m_i, m_s = normalize_masks(w_i, w_s)
        assert m_i.data[0] == pytest.approx(0.75, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_sums_to_one(self, seed):
        rng = RngStream(seed + 20)
        m_i, m_s = normalize_masks(Tensor(rng.normal(10.0, (50,))), Tensor(rng.normal(10.0, (50,))))
        assert np.abs(m_i.data + m_s.data - 1.0).max() < 1e-12


class TestFuse:
    def test_forced_frame_mask_returns_frames(self):
        rng = RngStream(3)
        x_i = Tensor(rng.normal(1.0, (6, 4)))
        x_s = Tensor(rng.normal(1.0, (6, 4)))
        out = fuse(x_i, x_s, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.array_equal(out.data, x_i.data)

    def test_identical_inputs_invariant_to_masks(self):
        rng = RngStream(4)
        x = Tensor(rng.normal(1.0, (6, 4)))
        m = Tensor(rng.uniform(0.0, 1.0, (6,)))
        one_minus = Tensor(1.0 - m.data)
        out = fuse(x, x, m, one_minus)
        assert np.abs(out.data - x.data).max() < 1e-12

    def test_convex_combination_bounds(self):
        rng = RngStream(5)
        x_i = rng.normal(1.0, (20, 8))
        x_s = rng.normal(1.0, (20, 8))
        m = rng.uniform(0.0, 1.0, (20,))
        out = fuse(Tensor(x_i), Tensor(x_s), Tensor(m), Tensor(1.0 - m)).data
        lo = np.minimum(x_i, x_s) - 1e-12
        hi = np.maximum(x_i, x_s) + 1e-12
        assert ((out >= lo) & (out <= hi)).all()


class TestFusionModule:
    def test_symmetry_identical_branches(self):
        """Same features + same projections on both branches -> masks 0.5, output = input."""
        store = ParamStore()
        fm = FusionModule(store, "f", 8, RngStream(6))
        fm.mq_s.data = fm.mq_i.data.copy()
        fm.mk_s.data = fm.mk_i.data.copy()
        x = Tensor(RngStream(7).normal(1.0, (12, 8)))
        m_i, m_s = fm.masks(x, x)
        assert np.allclose(m_i.data, 0.5, atol=1e-15)
        out = fm(x, x)
        assert np.abs(out.data - x.data).max() < 1e-12

    def test_averaging_mode(self):
        store = ParamStore()
        fm = FusionModule(store, "f", 8, RngStream(8), mode="averaging")
        rng = RngStream(9)
        a, b = rng.normal(1.0, (6, 8)), rng.normal(1.0, (6, 8))
        assert np.allclose(fm(Tensor(a), Tensor(b)).data, (a + b) / 2)

    def test_concat_mode_shapes(self):
        store = ParamStore()
        fm = FusionModule(store, "f", 8, RngStream(10), mode="concat")
        rng = RngStream(11)
        out = fm(Tensor(rng.normal(1.0, (6, 8))), Tensor(rng.normal(1.0, (6, 8))))
        assert out.shape == (6, 8)

    def test_fuse_async_uses_aligned_frame(self):
        store = ParamStore()
        fm = FusionModule(store, "f", 4, RngStream(12))
        cache = FrameFeatureCache()
        rng = RngStream(13)
        f0, f1 = Tensor(rng.normal(1.0, (4, 4))), Tensor(rng.normal(1.0, (4, 4)))
        cache.push(0, f0)
        cache.push(40_000, f1)
        x_s = Tensor(rng.normal(1.0, (4, 4)))
        fused, t_frame = fm.fuse_async(x_s, 55_000, cache)
        assert t_frame == 40_000
        direct = fm(f1, x_s)
        assert np.array_equal(fused.data, direct.data)

    def test_cache_miss_propagates(self):
        store = ParamStore()
        fm = FusionModule(store, "f", 4, RngStream(14))
        with pytest.raises(NoPriorFrameError):
            fm.fuse_async(Tensor(np.zeros((4, 4))), 10, FrameFeatureCache())
