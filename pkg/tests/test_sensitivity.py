"""Window-sum oracle checks and location selection on constructed maps."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from quietpatch.imaging import PatchRegion
from quietpatch.sensitivity import (
    AttentionMap,
    SensitivityError,
    attention_overlay,
    compute_attention,
    select_location,
    window_sums,
)
from quietpatch.victims import gradients, predict
from tests.conftest import rand_image


def oracle_window_sums(values, h, w):
    H, W = values.shape
    out = np.zeros((H - h + 1, W - w + 1))
    for t in range(H - h + 1):
        for l in range(W - w + 1):
            out[t, l] = values[t : t + h, l : l + w].sum()
    return out


def oracle_best_window(values, h, w):
    # exhaustive row-major scan, first strict improvement wins
    best, where = -np.inf, None
    H, W = values.shape
    for t in range(H - h + 1):
        for l in range(W - w + 1):
            s = values[t : t + h, l : l + w].sum()
            if s > best:
                best, where = s, (t, l)
    return where


class TestWindowSums:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        vals = rng.random((13, 17))
        got = window_sums(vals, 4, 5)
        want = oracle_window_sums(vals, 4, 5)
        assert got.shape == want.shape == (10, 13)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_full_window_is_total(self):
        rng = np.random.default_rng(12)
        vals = rng.random((6, 6))
        got = window_sums(vals, 6, 6)
        assert got.shape == (1, 1)
        assert got[0, 0] == pytest.approx(vals.sum(), abs=1e-9)

    def test_unit_window_is_identity(self):
        rng = np.random.default_rng(13)
        vals = rng.random((5, 7))
        np.testing.assert_allclose(window_sums(vals, 1, 1), vals, atol=1e-12)

    @given(
        st.integers(0, 10_000),
        st.integers(1, 6),
        st.integers(1, 6),
    )
    @settings(max_examples=30, deadline=None)
    def test_property_against_oracle(self, seed, h, w):
        rng = np.random.default_rng(seed)
        H = int(rng.integers(h, h + 8))
        W = int(rng.integers(w, w + 8))
        vals = rng.random((H, W))
        np.testing.assert_allclose(
            window_sums(vals, h, w), oracle_window_sums(vals, h, w), atol=1e-9
        )


class TestSelectLocation:
    def _map(self, arr):
        t = torch.as_tensor(arr, dtype=torch.float32)
        peak = float(t.max())
        return AttentionMap(values=t / peak if peak > 0 else t, source_model="test")

    def test_single_hot_cell(self):
        vals = np.zeros((10, 10))
        vals[6, 3] = 1.0
        region = select_location(self._map(vals), 2, 2)
        # any 2x2 window covering (6,3) ties; row-major first is (5,2)
        assert (region.top, region.left) == (5, 2)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            vals = rng.random((12, 9))
            m = self._map(vals)
            region = select_location(m, 3, 4)
            want = oracle_best_window(m.values.numpy(), 3, 4)
            assert (region.top, region.left) == want
            assert (region.h, region.w) == (3, 4)

    def test_tie_breaks_row_major(self):
        vals = np.zeros((6, 6))
        vals[0, 4] = vals[3, 1] = 1.0  # equal 1x1 maxima
        region = select_location(self._map(vals), 1, 1)
        assert (region.top, region.left) == (0, 4)

    def test_uniform_map_picks_origin(self):
        vals = np.ones((8, 8))
        region = select_location(self._map(vals), 3, 3)
        assert (region.top, region.left) == (0, 0)

    def test_window_exceeds_map(self):
        with pytest.raises(SensitivityError):
            select_location(self._map(np.ones((4, 4))), 5, 2)

    def test_degenerate_window(self):
        with pytest.raises(SensitivityError):
            select_location(self._map(np.ones((4, 4))), 0, 2)

    def test_full_map_window(self):
        region = select_location(self._map(np.random.default_rng(15).random((5, 5))), 5, 5)
        assert region == PatchRegion(0, 0, 5, 5)


class TestComputeAttention:
    def test_shape_and_normalization(self, victim_a):
        x = rand_image(3, 32, 32, 16) * 0.8
        m = compute_attention(victim_a, x)
        assert m.values.shape == (32, 32)
        assert float(m.values.min()) >= 0.0
        assert float(m.values.max()) == pytest.approx(1.0, abs=1e-6)
        assert m.source_model == victim_a.identifier

    def test_is_abs_gradient_of_top_class(self, victim_a):
        x = rand_image(3, 32, 32, 17) * 0.8
        _, top = predict(victim_a, x)
        g = gradients(victim_a, x, top).abs().sum(dim=0)
        m = compute_attention(victim_a, x)
        ours = m.values * float(g.max())
        assert torch.allclose(ours, g, atol=1e-5)

    def test_deterministic(self, victim_a):
        x = rand_image(3, 32, 32, 18) * 0.8
        a = compute_attention(victim_a, x)
        b = compute_attention(victim_a, x)
        assert torch.equal(a.values, b.values)


class TestAttentionMap:
    def test_rejects_negative(self):
        with pytest.raises(SensitivityError):
            AttentionMap(values=torch.tensor([[-0.1, 1.0]]), source_model="m")

    def test_rejects_wrong_rank(self):
        with pytest.raises(SensitivityError):
            AttentionMap(values=torch.zeros(3, 4, 4), source_model="m")

    def test_rejects_unnormalized_when_flagged(self):
        with pytest.raises(SensitivityError):
            AttentionMap(values=torch.tensor([[0.5, 0.4]]), source_model="m")

    def test_allows_zero_map(self):
        AttentionMap(values=torch.zeros(4, 4), source_model="m")


class TestOverlay:
    def test_range_and_shape(self, victim_a):
        x = rand_image(3, 32, 32, 19) * 0.9
        m = compute_attention(victim_a, x)
        out = attention_overlay(x, m, PatchRegion(4, 4, 8, 8))
        assert out.shape == x.shape
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_frame_is_drawn(self):
        x = torch.zeros(3, 16, 16) - 1.0
        m = AttentionMap(values=torch.zeros(16, 16), source_model="m")
        out = attention_overlay(x, m, PatchRegion(2, 3, 4, 5))
        assert float(out[:, 2, 3:8].min()) == 1.0  # top edge
        assert float(out[:, 5, 3:8].min()) == 1.0  # bottom edge
        assert float(out[:, 2:6, 3].min()) == 1.0  # left edge
        assert float(out[:, 2:6, 7].min()) == 1.0  # right edge
