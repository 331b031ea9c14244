import math

import numpy as np
import pytest

from disclabel.targets import (
    HeatmapStack,
    LabeledCase,
    average_slices,
    load_case,
    make_target,
    normalize01,
    resize_bilinear,
    resize_case,
    save_case,
)


def make_case(h=32, w=32, positions=None, spacing=(1.0, 1.0)):
    positions = positions if positions is not None else [(8.0, 16.0), (16.0, 16.0), (24.0, 16.0)]
    return LabeledCase(image=np.zeros((h, w), dtype=np.float32), spacing_mm=spacing, disc_positions=positions)


# ---------------------------------------------------------------------------
# average_slices
# ---------------------------------------------------------------------------


def test_average_identical_slices():
    sl = np.random.default_rng(0).random((6, 4))
    vol = np.stack([sl] * 8)
    out = average_slices(vol, center_index=4)
    assert np.allclose(out, sl, atol=1e-7)


def test_average_two_slices():
    vol = np.stack([np.zeros((3, 3)), np.ones((3, 3))])
    out = average_slices(vol, center_index=0, count=2)
    assert np.allclose(out, 0.5)


def test_average_matches_loop_oracle():
    rng = np.random.default_rng(1)
    vol = rng.random((8, 5, 6)).astype(np.float32)
    out = average_slices(vol, center_index=4, count=6)
    # window centered at 4 covering 6 slices: indices 2..7
    expected = np.zeros((5, 6))
    for idx in range(2, 8):
        expected += vol[idx]
    expected /= 6
    assert np.abs(out - expected).max() < 1e-6


def test_average_clamps_at_borders():
    vol = np.arange(4, dtype=np.float32).reshape(4, 1, 1)
    out = average_slices(vol, center_index=0, count=6)
    # window would span [-2..3]; clamped to [0..3]
    assert out.item() == pytest.approx((0 + 1 + 2 + 3) / 4)


def test_average_empty_volume_errors():
    with pytest.raises(ValueError, match="D >= 1"):
        average_slices(np.zeros((0, 4, 4)), center_index=0)


# ---------------------------------------------------------------------------
# normalize01
# ---------------------------------------------------------------------------


def test_normalize_two_values():
    out = normalize01(np.array([[2.0, 4.0]]))
    assert np.array_equal(out, np.array([[0.0, 1.0]], dtype=np.float32))


def test_normalize_constant_maps_to_zeros():
    out = normalize01(np.full((3, 3), 7.0))
    assert np.array_equal(out, np.zeros((3, 3), dtype=np.float32))


def test_normalize_random_hits_bounds_exactly():
    img = np.random.default_rng(2).random((16, 16)) * 100 - 50
    out = normalize01(img)
    assert out.min() == 0.0
    assert out.max() == 1.0


# ---------------------------------------------------------------------------
# make_target
# ---------------------------------------------------------------------------


def test_target_peak_is_one_at_annotation():
    case = make_case(positions=[(5.0, 5.0)])
    stack = make_target(case)
    assert stack.maps[0, 5, 5] == 1.0
    assert stack.maps[0].argmax() == 5 * 32 + 5


def test_target_zero_beyond_radius():
    case = make_case(positions=[(16.0, 16.0)])
    stack = make_target(case, radius=10)
    assert stack.maps[0, 16, 27] == 0.0  # distance 11 > radius
    assert stack.maps[0, 16, 26] > 0.0  # distance 10 still inside


def test_target_matches_closed_form():
    radius, sigma = 10, 10 / 3.0
    case = make_case(positions=[(16.0, 16.0)])
    stack = make_target(case, radius=radius, sigma=sigma)
    for dr, dc in [(0, 1), (2, 3), (5, 5), (0, 7)]:
        d2 = dr * dr + dc * dc
        expected = math.exp(-d2 / (2 * sigma * sigma)) if d2 <= radius * radius else 0.0
        assert abs(stack.maps[0, 16 + dr, 16 + dc] - expected) < 1e-6


def test_target_invisible_channel_zero():
    case = make_case(positions=[(8.0, 16.0), None, (24.0, 16.0)])
    stack = make_target(case)
    assert not stack.visibility[1]
    assert np.all(stack.maps[1] == 0.0)
    assert stack.visibility[0] and stack.visibility[2]


def test_target_out_of_bounds_names_disc():
    case = make_case(positions=[(8.0, 16.0), (40.0, 16.0), (24.0, 16.0)])
    with pytest.raises(ValueError, match="disc 1"):
        make_target(case)


def test_target_channel_sums_equal_for_interior_discs():
    case = make_case(h=64, w=64, positions=[(20.0, 32.0), (32.0, 32.0), (44.0, 32.0)])
    stack = make_target(case)
    sums = stack.maps.reshape(3, -1).sum(axis=1)
    assert np.allclose(sums, sums[0], atol=1e-4)


def test_target_shift_equivariance():
    c1 = make_case(h=64, w=64, positions=[(24.0, 30.0)])
    c2 = make_case(h=64, w=64, positions=[(27.0, 34.0)])
    s1 = make_target(c1)
    s2 = make_target(c2)
    assert np.allclose(np.roll(np.roll(s1.maps[0], 3, axis=0), 4, axis=1), s2.maps[0], atol=1e-7)


def test_heatmapstack_shape_validation():
    with pytest.raises(ValueError, match="inconsistent"):
        HeatmapStack(maps=np.zeros((3, 4, 4)), visibility=np.zeros(2, dtype=bool))


# ---------------------------------------------------------------------------
# case IO and resize
# ---------------------------------------------------------------------------


def test_case_visibility_derived_and_checked():
    case = make_case(positions=[(1.0, 1.0), None])
    assert case.visibility == [True, False]
    with pytest.raises(ValueError, match="visibility"):
        LabeledCase(
            image=np.zeros((4, 4)),
            spacing_mm=(1, 1),
            disc_positions=[(1.0, 1.0), None],
            visibility=[True, True],
        )


def test_save_load_roundtrip(tmp_path):
    case = make_case(positions=[(8.0, 16.0), None, (24.5, 15.5)], spacing=(0.8, 0.7))
    case.image[:] = np.random.default_rng(3).random((32, 32))
    path = tmp_path / "case_0000.ndat"
    save_case(case, path)
    assert (tmp_path / "case_0000.ndat.json").exists()
    back = load_case(path)
    assert np.allclose(back.image, case.image, atol=1e-7)
    assert back.spacing_mm == pytest.approx((0.8, 0.7))
    assert back.disc_positions[1] is None
    assert back.disc_positions[2] == pytest.approx((24.5, 15.5))
    assert back.visibility == [True, False, True]


def test_resize_bilinear_identity_and_constant():
    img = np.random.default_rng(4).random((8, 8)).astype(np.float32)
    assert np.array_equal(resize_bilinear(img, (8, 8)), img)
    const = np.full((8, 8), 0.3, dtype=np.float32)
    assert np.allclose(resize_bilinear(const, (16, 16)), 0.3, atol=1e-6)


def test_resize_case_scales_annotations():
    case = make_case(h=32, w=32, positions=[(8.0, 16.0), None, (24.0, 16.0)])
    out = resize_case(case, (64, 64))
    assert out.image.shape == (64, 64)
    r, c = out.disc_positions[0]
    assert r == pytest.approx((8.0 + 0.5) * 2 - 0.5)
    assert c == pytest.approx((16.0 + 0.5) * 2 - 0.5)
    assert out.disc_positions[1] is None
    # physical size is preserved: spacing halves when resolution doubles
    assert out.spacing_mm == pytest.approx((0.5, 0.5))
