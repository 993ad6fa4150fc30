import numpy as np
import pytest
from skimage import color, measure

from imgcore import (
    AUGMENTATION_PRESETS,
    AugmentationRecord,
    PhotometricParams,
    apply_augmentation,
    apply_photometric,
    as_crop,
    connected_components,
    dilate,
    erode,
    fit_ellipse,
    invert_geometric,
    iou,
    kmeans_intensity,
    largest_component,
    native_view,
    network_view,
    nlm_denoise,
    otsu_threshold,
    read_mask,
    read_png,
    resize,
    rot90,
    rotate,
    to_gray,
    warp_geometric,
    write_png,
)
from utils import AugmentationError, DataError, DegenerateMaskError, EmptyMaskError


def test_as_crop_rejects_out_of_range():
    with pytest.raises(DataError):
        as_crop(np.full((4, 4), 1.5))
    with pytest.raises(DataError):
        as_crop(np.full((4, 4), np.nan))
    assert as_crop(np.zeros((4, 4))).shape == (4, 4, 1)


def test_rotate_zero_is_identity(rng):
    img = rng.random((9, 9, 1)).astype(np.float32)
    assert np.array_equal(rotate(img, 0), img)


def test_rotate_single_pixel_quarter_turn():
    img = np.zeros((5, 5))
    img[1, 2] = 1.0
    out = rotate(img, 90, interp="nearest")
    assert out[2, 1] == 1.0
    assert out.sum() == 1.0


def test_rotate_quarter_turn_matches_rot90(rng):
    img = rng.random((8, 8, 1)).astype(np.float32)
    assert np.allclose(rotate(img, 90), rot90(img, 1))
    assert np.allclose(rotate(img, -90), rot90(img, 3))


def test_rotate_round_trip_interior(rng):
    img = rng.random((21, 21, 1)).astype(np.float32)
    back = rotate(rotate(img, 90), -90)
    assert np.max(np.abs(back[3:-3, 3:-3] - img[3:-3, 3:-3])) <= 0.02


def test_rotate_fills_white_for_images_and_zero_for_masks():
    img = np.zeros((11, 11, 1), dtype=np.float32)
    assert rotate(img, 45)[0, 0, 0] == 1.0
    mask = np.ones((11, 11), dtype=bool)
    assert not rotate(mask, 45, interp="nearest")[0, 0]


def test_dilate_single_pixel_gives_block():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    out = dilate(mask, 1)
    assert out[1:4, 1:4].all() and out.sum() == 9
    assert np.array_equal(dilate(mask, 0), mask)
    assert not dilate(np.zeros((5, 5), dtype=bool), 3).any()


def test_erode_dilate_properties(rng):
    for _ in range(20):
        mask = rng.random((16, 16)) > 0.6
        k = int(rng.integers(1, 4))
        assert np.all(erode(dilate(mask, k), k) >= mask)
        assert np.all(dilate(mask, 1) >= mask)
        assert np.all(erode(mask, 1) <= mask)


def test_negative_iterations_rejected():
    with pytest.raises(ValueError):
        dilate(np.zeros((3, 3), dtype=bool), -1)


def test_components_two_blocks_and_area(rng):
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:2, 0:2] = True
    mask[5:7, 5:7] = True
    assert len(connected_components(mask)) == 2
    random_mask = rng.random((20, 20)) > 0.5
    parts = connected_components(random_mask)
    assert sum(p.sum() for p in parts) == random_mask.sum()
    assert connected_components(np.zeros((4, 4), dtype=bool)) == []


def test_largest_component_picks_bigger():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, 0:3] = True
    mask[5, 0:5] = True
    largest = largest_component(mask)
    assert largest.sum() == 5 and largest[5].all()
    with pytest.raises(EmptyMaskError):
        largest_component(np.zeros((4, 4), dtype=bool))


def test_fit_ellipse_axis_aligned(make_ellipse):
    mask = make_ellipse((41, 41), (20, 20), 10, 4)
    params = fit_ellipse(mask)
    assert abs(params.angle) <= 2.0
    assert params.major_axis / params.minor_axis == pytest.approx(2.5, abs=0.15)
    assert params.major_axis >= params.minor_axis > 0


def test_fit_ellipse_rotated(make_ellipse):
    params = fit_ellipse(make_ellipse((41, 41), (20, 20), 10, 4, angle=30))
    assert params.angle == pytest.approx(30.0, abs=2.0)


def test_fit_ellipse_circle_and_degenerate(make_ellipse):
    params = fit_ellipse(make_ellipse((41, 41), (20, 20), 8, 8))
    assert 1.0 <= params.major_axis / params.minor_axis <= 1.05
    line = np.zeros((10, 10), dtype=bool)
    line[4, 1:9] = True
    with pytest.raises(DegenerateMaskError):
        fit_ellipse(line)
    with pytest.raises(DegenerateMaskError):
        fit_ellipse(np.eye(3, dtype=bool))


def test_fit_ellipse_rotation_equivariant(make_ellipse):
    for angle in (-60, -20, 15, 45, 80):
        params = fit_ellipse(make_ellipse((51, 51), (25, 25), 12, 6, angle=angle))
        assert params.angle == pytest.approx(angle, abs=2.0)


def test_fit_ellipse_returns_full_axis_lengths(make_ellipse):
    mask = make_ellipse((61, 61), (30, 30), 12, 5, angle=25)
    params = fit_ellipse(mask)
    assert params.major_axis == pytest.approx(24.0, rel=0.03)
    assert params.minor_axis == pytest.approx(10.0, rel=0.06)
    props = measure.regionprops(mask.astype(np.uint8))[0]
    assert params.major_axis == pytest.approx(props.axis_major_length, rel=1e-6)
    assert params.minor_axis == pytest.approx(props.axis_minor_length, rel=1e-6)


def test_nlm_constant_and_noise(rng):
    const = np.full((20, 20), 0.5)
    assert np.allclose(nlm_denoise(const), 0.5)
    noisy = np.clip(0.5 + rng.normal(0, 0.1, (24, 24)), 0, 1)
    assert nlm_denoise(noisy, strength=0.1).var() < noisy.var()
    with pytest.raises(ValueError):
        nlm_denoise(const, patch=4)


def test_nlm_tiny_strength_keeps_input(rng):
    img = rng.random((16, 16))
    assert np.max(np.abs(nlm_denoise(img, strength=1e-4) - img)) <= 0.01


def test_otsu_cases(rng):
    bimodal = np.where(rng.random((20, 20)) > 0.5, 0.2, 0.8)
    result = otsu_threshold(bimodal)
    assert 0.2 < result.threshold < 0.8 and not result.degenerate
    assert otsu_threshold(np.full((5, 5), 0.5)).degenerate
    two_gauss = np.concatenate([rng.normal(0.3, 0.05, 5000), rng.normal(0.7, 0.05, 5000)])
    two_gauss = np.clip(two_gauss, 0, 1).reshape(100, 100)
    assert otsu_threshold(two_gauss).threshold == pytest.approx(0.5, abs=0.05)


def test_kmeans_three_levels(rng):
    img = rng.choice([0.1, 0.5, 0.9], size=(12, 12))
    region = np.ones_like(img, dtype=bool)
    result = kmeans_intensity(img, 3, seed=0, region=region)
    assert np.allclose(result.centroids, [0.1, 0.5, 0.9])
    assert np.all(img[result.cluster_mask(0)] == 0.1)


def test_kmeans_reduces_k_and_is_deterministic(rng):
    img = np.where(rng.random((10, 10)) > 0.5, 0.2, 0.7)
    result = kmeans_intensity(img, 3, seed=0, region=np.ones_like(img, dtype=bool))
    assert result.reduced and result.k_used == 2
    values = rng.random((15, 15))
    region = np.ones_like(values, dtype=bool)
    a = kmeans_intensity(values, 3, seed=5, region=region)
    b = kmeans_intensity(values, 3, seed=5, region=region)
    assert np.array_equal(a.labels, b.labels)


def test_kmeans_beats_random_partitions(rng):
    values = rng.random((8, 8))
    result = kmeans_intensity(values, 3, seed=0, region=np.ones_like(values, dtype=bool))

    def sse(labels):
        return sum(((values[labels == c] - values[labels == c].mean()) ** 2).sum()
                   for c in np.unique(labels))

    best = sse(result.labels)
    for _ in range(1000):
        assert best <= sse(rng.integers(0, 3, size=values.shape)) + 1e-12


def test_identity_policy_gives_identity_record(rng):
    img = rng.random((16, 16, 1)).astype(np.float32)
    out, record = apply_augmentation(img, "identity", 0)
    assert record.is_identity
    assert np.array_equal(out, img)
    back, valid = invert_geometric(out[..., 0], record)
    assert valid.all() and np.array_equal(back, img[..., 0])


def test_vflip_inverts_exactly(rng):
    record = AugmentationRecord(vflip=True)
    prob = rng.random((10, 10))
    flipped, _ = warp_geometric(prob, record)
    assert np.array_equal(flipped, prob[::-1])
    back, valid = invert_geometric(flipped, record)
    assert valid.all() and np.array_equal(back, prob)


def test_rotation_shift_round_trip():
    rows, cols = np.indices((32, 32))
    smooth = 0.5 + 0.25 * np.sin(rows / 5.0) * np.cos(cols / 6.0)
    record = AugmentationRecord(rotation=10.0, shift=(0.05, -0.05))
    warped, valid_fwd = warp_geometric(smooth, record)
    back, valid_inv = invert_geometric(warped, record)
    ok = valid_inv & valid_fwd
    ok = erode(ok, 2)
    assert ok.any()
    assert np.max(np.abs(back[ok] - smooth[ok])) <= 0.02


def test_incomplete_record_rejected():
    with pytest.raises(AugmentationError):
        warp_geometric(np.zeros((4, 4)), AugmentationRecord(rotation=None))


def test_augmentation_seed_is_reproducible(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    a, ra = apply_augmentation(img, AUGMENTATION_PRESETS["aid"], 42)
    b, rb = apply_augmentation(img, AUGMENTATION_PRESETS["aid"], 42)
    assert ra == rb and np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_hue_and_saturation_shift_in_opencv_units():
    for name in ("aid", "hushem-mild"):
        policy = AUGMENTATION_PRESETS[name]
        assert policy.hue * 180.0 == pytest.approx(50.0)
        assert policy.saturation * 255.0 == pytest.approx(30.0)
    gray = np.full((2, 2, 3), 0.5, dtype=np.float32)
    out = apply_photometric(gray, PhotometricParams(saturation=30.0 / 255.0))
    assert color.rgb2hsv(out)[..., 1] == pytest.approx(30.0 / 255.0, abs=1e-3)
    red = np.zeros((1, 1, 3), dtype=np.float32)
    red[..., 0] = 1.0
    shifted = apply_photometric(red, PhotometricParams(hue=60.0 / 180.0))
    assert color.rgb2hsv(shifted)[0, 0, 0] == pytest.approx(1 / 3, abs=1e-3)


def test_iou():
    a = np.zeros((4, 4), dtype=bool)
    assert iou(a, a) == 1.0
    b = a.copy()
    a[0, :2] = True
    b[0, 1:3] = True
    assert iou(a, b) == pytest.approx(1 / 3)


def test_png_round_trip(tmp_path, rng):
    mask = rng.random((9, 9)) > 0.5
    write_png(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)
    img = (np.round(rng.random((9, 9, 3)) * 255) / 255).astype(np.float32)
    write_png(tmp_path / "i.png", img)
    assert np.allclose(read_png(tmp_path / "i.png"), img, atol=1e-6)
    with pytest.raises(DataError):
        read_png(tmp_path / "missing.png")


def test_network_and_native_view_shapes():
    prob = np.zeros((35, 35))
    prob[10:25, 10:25] = 1.0
    view = network_view(prob, 64)
    assert view.shape == (64, 64)
    back = native_view(view, (35, 35))
    assert back.shape == (35, 35)
    assert native_view(network_view(prob, 64, 0.8), (35, 35), 0.8)[0, 0] == 0.0


def test_to_gray_and_resize():
    rgb = np.zeros((4, 4, 3))
    rgb[..., 1] = 1.0
    assert to_gray(rgb).shape == (4, 4)
    assert to_gray(rgb)[0, 0] == pytest.approx(0.7152, abs=1e-3)
    assert np.array_equal(to_gray(np.full((4, 4, 1), 0.5)), np.full((4, 4), 0.5))

    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    big = resize(mask, 16)
    assert big.dtype == bool and big.sum() == 64
    img = np.full((8, 8, 1), 0.4, dtype=np.float32)
    small = resize(img, 4)
    assert small.shape == (4, 4, 1) and small.dtype == np.float32
    assert np.allclose(small, 0.4)
    assert resize(img, 8) is not img
