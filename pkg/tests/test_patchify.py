import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geomae.errors import InvalidArgumentError
from geomae.patchify import (
    ReflectanceBatch,
    embed,
    grid_dims,
    keep_count_for,
    patchify_pixels,
    random_masking,
    restore_order,
    unpatchify,
)


def brute_patchify(x, ph, pw):
    """Reference: explicit loops in (t, i, j) token order, (row, col, channel) cube order."""
    B, T, C, H, W = x.shape
    gh, gw = H // ph, W // pw
    out = np.zeros((B, T * gh * gw, ph * pw * C))
    for b in range(B):
        for t in range(T):
            for i in range(gh):
                for j in range(gw):
                    l = t * gh * gw + i * gw + j
                    k = 0
                    for r in range(ph):
                        for s in range(pw):
                            for c in range(C):
                                out[b, l, k] = x[b, t, c, i * ph + r, j * pw + s]
                                k += 1
    return out


class TestPatchify:
    def test_single_block(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
        assert patchify_pixels(x, (1, 2, 2)).tolist() == [[[1.0, 2.0, 3.0, 4.0]]]

    @pytest.mark.parametrize("patch,T,expected", [(16, 4, 784), (14, 1, 256)])
    def test_token_counts(self, patch, T, expected):
        T_, gh, gw = grid_dims((1, T, 6, 224, 224), (1, patch, patch))
        assert T_ * gh * gw == expected

    def test_matches_brute_force(self):
        x = torch.randn(2, 3, 2, 6, 4, dtype=torch.float64)
        np.testing.assert_array_equal(patchify_pixels(x, (1, 3, 2)).numpy(), brute_patchify(x.numpy(), 3, 2))

    def test_roundtrip_chip(self):
        x = torch.rand(1, 4, 6, 32, 32, dtype=torch.float64)
        tokens = patchify_pixels(x, (1, 16, 16))
        assert torch.equal(unpatchify(tokens, (4, 2, 2), (1, 16, 16)), x)

    def test_zero_tokens_zero_image(self):
        img = unpatchify(torch.zeros(1, 4, 2 * 2 * 3), (1, 2, 2), (1, 2, 2))
        assert img.shape == (1, 1, 3, 4, 4) and not img.any()

    @given(
        st.integers(1, 2),
        st.integers(1, 3),
        st.integers(1, 3),
        st.integers(1, 4),
        st.integers(1, 4),
        st.integers(1, 3),
        st.integers(1, 3),
    )
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, B, T, C, ph, pw, gh, gw):
        x = torch.randn(B, T, C, gh * ph, gw * pw, dtype=torch.float64)
        tokens = patchify_pixels(x, (1, ph, pw))
        assert tokens.shape == (B, T * gh * gw, ph * pw * C)
        assert torch.equal(unpatchify(tokens, (T, gh, gw), (1, ph, pw), channels=C), x)

    def test_non_divisible(self):
        with pytest.raises(InvalidArgumentError):
            patchify_pixels(torch.zeros(1, 1, 1, 30, 32), (1, 16, 16))

    def test_temporal_patch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            patchify_pixels(torch.zeros(1, 2, 1, 16, 16), (2, 16, 16))

    def test_unpatchify_inconsistent_dims(self):
        with pytest.raises(InvalidArgumentError):
            unpatchify(torch.zeros(1, 5, 4), (1, 2, 2), (1, 2, 2))
        with pytest.raises(InvalidArgumentError):
            unpatchify(torch.zeros(1, 4, 12), (1, 2, 2), (1, 2, 2), channels=2)


class TestEmbed:
    def test_identity_projection(self):
        x = torch.randn(2, 2, 3, 4, 4, dtype=torch.float64)
        P = 2 * 2 * 3
        grid = embed(x, torch.eye(P, dtype=torch.float64), torch.zeros(P, dtype=torch.float64), (1, 2, 2))
        assert torch.equal(grid.data, patchify_pixels(x, (1, 2, 2)))
        assert grid.dims == (2, 2, 2)

    def test_zero_weights(self):
        x = torch.randn(1, 1, 2, 4, 4)
        grid = embed(x, torch.zeros(5, 8), None, (1, 2, 2))
        assert not grid.data.any()

    def test_per_token_matvec(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(1, 1, 1, 2, 2, generator=g, dtype=torch.float64)
        W = torch.randn(3, 4, generator=g, dtype=torch.float64)
        b = torch.randn(3, generator=g, dtype=torch.float64)
        grid = embed(x, W, b, (1, 2, 2))
        cube = np.array([x[0, 0, 0, 0, 0], x[0, 0, 0, 0, 1], x[0, 0, 0, 1, 0], x[0, 0, 0, 1, 1]])
        expected = W.numpy() @ cube + b.numpy()
        np.testing.assert_allclose(grid.data[0, 0].numpy(), expected, rtol=1e-14)

    def test_equals_strided_conv3d(self):
        g = torch.Generator().manual_seed(7)
        B, T, C, ph, pw, D = 2, 3, 4, 2, 3, 5
        x = torch.randn(B, T, C, 2 * ph, 3 * pw, generator=g, dtype=torch.float64)
        W = torch.randn(D, ph * pw * C, generator=g, dtype=torch.float64)
        b = torch.randn(D, generator=g, dtype=torch.float64)
        kernel = W.reshape(D, ph, pw, C).permute(0, 3, 1, 2).unsqueeze(2)  # [D, C, 1, ph, pw]
        conv = torch.nn.functional.conv3d(x.permute(0, 2, 1, 3, 4), kernel, b, stride=(1, ph, pw))
        expected = conv.permute(0, 2, 3, 4, 1).reshape(B, -1, D)
        torch.testing.assert_close(embed(x, W, b, (1, ph, pw)).data, expected, rtol=1e-12, atol=1e-12)

    def test_linear_without_bias(self):
        x = torch.randn(1, 2, 2, 4, 4, dtype=torch.float64)
        W = torch.randn(6, 8, dtype=torch.float64)
        a = 3.7
        torch.testing.assert_close(embed(a * x, W, None, (1, 2, 2)).data, a * embed(x, W, None, (1, 2, 2)).data,
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            embed(torch.zeros(1, 1, 2, 4, 4), torch.zeros(3, 7), None, (1, 2, 2))


class TestMasking:
    def test_ratio_zero_keeps_all(self):
        x = torch.randn(2, 8, 3)
        visible, plan = random_masking(x, 0.0, 0)
        assert visible.shape == (2, 8, 3)
        assert not plan.mask.any()
        assert torch.equal(restore_order(visible, plan), x)

    def test_keep_count_784(self):
        assert keep_count_for(784, 0.75) == 196

    def test_ratio_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            random_masking(torch.zeros(1, 4, 2), 1.0, 0)

    def test_restore_with_placeholders(self):
        x = torch.arange(2 * 8, dtype=torch.float64).reshape(2, 8, 1)
        visible, plan = random_masking(x, 0.5, 42)
        assert plan.keep_count == 4
        assert (plan.mask.sum(dim=1) == 4).all()
        # masked slots get a sentinel; kept slots must land on their original index
        full = torch.cat([visible, torch.full((2, 4, 1), -1.0, dtype=torch.float64)], dim=1)
        restored = restore_order(full, plan)
        assert torch.equal(restored[~plan.mask], x[~plan.mask])
        assert (restored[plan.mask] == -1).all()
        assert torch.equal(plan.shuffle.gather(1, plan.restore), torch.arange(8).expand(2, 8))

    def test_seeded_reproducible(self):
        x = torch.randn(3, 16, 2)
        v1, p1 = random_masking(x, 0.75, 9)
        v2, p2 = random_masking(x, 0.75, 9)
        assert torch.equal(v1, v2) and torch.equal(p1.mask, p2.mask)

    def test_per_sample_independent(self):
        _, plan = random_masking(torch.zeros(8, 16, 1), 0.5, 3)
        assert len({tuple(row.tolist()) for row in plan.mask}) > 1

    def test_uniform_mask_probability(self):
        gen = torch.Generator().manual_seed(0)
        _, plan = random_masking(torch.zeros(10_000, 16, 1), 0.75, gen)
        per_token = plan.mask.double().mean(dim=0)
        assert torch.all((per_token - 0.75).abs() <= 0.02)


class TestReflectanceBatch:
    def test_rejects_nan(self):
        x = torch.zeros(1, 1, 1, 2, 2)
        x[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(InvalidArgumentError):
            ReflectanceBatch(x)

    def test_rejects_wrong_rank(self):
        with pytest.raises(InvalidArgumentError):
            ReflectanceBatch(torch.zeros(1, 2, 2, 2))

    def test_meta_length(self):
        with pytest.raises(InvalidArgumentError):
            ReflectanceBatch(torch.zeros(2, 1, 1, 2, 2), meta=[None])
