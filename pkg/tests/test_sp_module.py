import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sipmask.numerics import conv2d
from sipmask.sp_module import feature_align, gather_coefficients, offsets_from_regression, scatter_coefficients

from oracles import deformable_point_oracle


def test_footprint_box_gives_zero_offsets():
    stride = 8.0
    ltrb = torch.full((3, 4, 4), stride, dtype=torch.float64)
    assert torch.equal(offsets_from_regression(ltrb, stride), torch.zeros(3, 4, 9, 2, dtype=torch.float64))


def test_lattice_for_box_of_eight_at_stride_four():
    off = offsets_from_regression(torch.tensor([8.0, 8.0, 8.0, 8.0], dtype=torch.float64), 4.0)
    taps = torch.tensor([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=torch.float64)
    # the lattice spans -2, 0, +2 grid units on both axes
    torch.testing.assert_close(taps + off, 2 * taps)


@given(l=st.floats(0.5, 40), t=st.floats(0.5, 40), r=st.floats(0.5, 40), b=st.floats(0.5, 40),
       shift_x=st.integers(-3, 3), shift_y=st.integers(-3, 3), stride=st.sampled_from([4.0, 8.0, 16.0]))
def test_translation_equivariance(l, t, r, b, shift_x, shift_y, stride):
    # moving the box by (sx, sy) strides relative to a fixed point moves every lattice point by (sy, sx)
    base = offsets_from_regression(torch.tensor([l, t, r, b], dtype=torch.float64), stride)
    dx, dy = shift_x * stride, shift_y * stride
    moved = offsets_from_regression(torch.tensor([l - dx, t - dy, r + dx, b + dy], dtype=torch.float64), stride)
    want = base + torch.tensor([shift_y, shift_x], dtype=torch.float64)
    torch.testing.assert_close(moved, want, atol=1e-12, rtol=0)


@given(seed=st.integers(0, 2 ** 31))
def test_zero_offsets_reduce_to_conv(seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(5, 6, 3, generator=g, dtype=torch.float64)
    w = torch.randn(3, 3, 3, 2, generator=g, dtype=torch.float64)
    got = feature_align(feats, torch.zeros(5, 6, 9, 2, dtype=torch.float64), w)
    torch.testing.assert_close(got, conv2d(feats, w), atol=1e-6, rtol=0)


def test_constant_input_gives_constant_output():
    feats = torch.full((8, 8, 2), 1.5, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    w = torch.randn(3, 3, 2, 3, generator=g, dtype=torch.float64)
    ltrb = torch.rand(8, 8, 4, generator=g, dtype=torch.float64) * 4 + 2
    out = feature_align(feats, offsets_from_regression(ltrb, 4.0), w)
    # interior locations whose lattice stays on the grid see only the constant
    want = 1.5 * w.sum(dim=(0, 1, 2))
    torch.testing.assert_close(out[3:5, 3:5], want.expand(2, 2, 3), atol=1e-12, rtol=0)


def test_random_case_matches_per_tap_oracle():
    r = np.random.default_rng(5)
    feats = r.normal(size=(5, 5, 2))
    w = r.normal(size=(3, 3, 2, 1))
    ltrb = r.uniform(1, 12, size=(5, 5, 4))
    off = offsets_from_regression(torch.from_numpy(ltrb), 4.0)
    got = feature_align(torch.from_numpy(feats), off, torch.from_numpy(w))[..., 0].numpy()
    for i in range(5):
        for j in range(5):
            want = deformable_point_oracle(feats.tolist(), w[..., 0].tolist(), off[i, j].tolist(), (i, j))
            assert got[i, j] == pytest.approx(want, abs=1e-9)


def test_feature_align_shape_check():
    with pytest.raises(ValueError):
        feature_align(torch.zeros(4, 4, 2), torch.zeros(3, 4, 9, 2), torch.zeros(3, 3, 2, 2))


def test_gather_k1_is_single_vector():
    c = torch.arange(2 * 3 * 5, dtype=torch.float64).reshape(2, 3, 5)
    got = gather_coefficients(c, (1, 2), 1)
    assert got.shape == (1, 5)
    assert torch.equal(got[0], c[1, 2])


def test_gather_block_layout():
    m, k = 4, 2
    c = torch.zeros(3, 3, k * k * m)
    for i in range(k * k):
        c[..., i * m:(i + 1) * m] = i
    got = gather_coefficients(c, (2, 0), k)
    for i in range(k * k):
        assert torch.equal(got[i], torch.full((m,), float(i)))


@given(k=st.integers(1, 3), m=st.integers(1, 5), y=st.integers(0, 3), x=st.integers(0, 3), seed=st.integers(0, 999))
def test_gather_scatter_round_trip(k, m, y, x, seed):
    vecs = torch.randn(k * k, m, generator=torch.Generator().manual_seed(seed))
    grid = scatter_coefficients(vecs, (4, 4), (y, x))
    assert torch.equal(gather_coefficients(grid, (y, x), k), vecs)


def test_gather_errors():
    with pytest.raises(IndexError):
        gather_coefficients(torch.zeros(2, 2, 8), (2, 0), 2)
    with pytest.raises(ValueError):
        gather_coefficients(torch.zeros(2, 2, 6), (0, 0), 2)
