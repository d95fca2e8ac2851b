import numpy as np
import pytest

from depthnav import depthproc as dp
from depthnav import scene as sc


def brute_force_min_pool(depth, valid, kernel):
    """Independent double-loop oracle for the windowed minimum."""
    h, w = depth.shape
    r = kernel // 2
    out = np.zeros_like(depth)
    out_valid = np.zeros_like(valid)
    for i in range(h):
        for j in range(w):
            best = np.inf
            any_valid = False
            for ii in range(max(0, i - r), min(h, i + r + 1)):
                for jj in range(max(0, j - r), min(w, j + r + 1)):
                    if valid[ii, jj]:
                        any_valid = True
                        best = min(best, depth[ii, jj])
            out_valid[i, j] = any_valid
            out[i, j] = best if any_valid else 0.0
    return out.astype(np.float32), out_valid


def random_image(rng, h, w, masked=True):
    depth = rng.uniform(0.2, 10.0, size=(h, w)).astype(np.float32)
    valid = rng.random((h, w)) > 0.25 if masked else np.ones((h, w), dtype=bool)
    return dp.DepthImage(depth=depth, valid=valid)


def test_kernel_one_is_identity():
    img = random_image(np.random.default_rng(0), 17, 23)
    out = dp.min_pool_dilate(img, 1)
    assert np.array_equal(out.valid, img.valid)
    assert np.array_equal(out.depth[out.valid], img.depth[img.valid])
    assert np.all(out.depth[~out.valid] == 0.0)


def test_constant_image_unchanged():
    img = dp.DepthImage(np.full((20, 30), 4.25, dtype=np.float32), np.ones((20, 30), dtype=bool))
    out = dp.min_pool_dilate(img, 5)
    assert np.array_equal(out.depth, img.depth)


def test_single_near_pixel_spreads():
    depth = np.full((4, 4), 10.0, dtype=np.float32)
    depth[1, 2] = 1.0
    img = dp.DepthImage(depth, np.ones((4, 4), dtype=bool))
    out = dp.min_pool_dilate(img, 3)
    expected, _ = brute_force_min_pool(depth, img.valid, 3)
    assert np.array_equal(out.depth, expected)
    assert np.all(out.depth[0:3, 1:4] == 1.0)
    assert out.depth[3, 0] == 10.0


def test_even_kernel_rejected():
    img = random_image(np.random.default_rng(1), 8, 8)
    with pytest.raises(ValueError):
        dp.min_pool_dilate(img, 4)
    with pytest.raises(ValueError):
        dp.min_pool_dilate(img, 9)  # larger than image


def test_matches_brute_force_oracle_with_masks():
    rng = np.random.default_rng(42)
    for _ in range(12):
        h = int(rng.integers(7, 30))
        w = int(rng.integers(7, 30))
        img = random_image(rng, h, w)
        for kernel in (1, 3, 5, 7):
            if kernel > min(h, w):
                continue
            out = dp.min_pool_dilate(img, kernel)
            exp_depth, exp_valid = brute_force_min_pool(img.depth, img.valid, kernel)
            assert np.array_equal(out.valid, exp_valid)
            assert np.array_equal(out.depth, exp_depth)


def test_pointwise_non_increasing():
    rng = np.random.default_rng(5)
    img = random_image(rng, 24, 31)
    out = dp.min_pool_dilate(img, 5)
    both = img.valid & out.valid
    assert np.all(out.depth[both] <= img.depth[both])


def test_twice_k3_equals_once_k5_fully_valid():
    rng = np.random.default_rng(9)
    img = random_image(rng, 25, 33, masked=False)
    twice = dp.min_pool_dilate(dp.min_pool_dilate(img, 3), 3)
    once = dp.min_pool_dilate(img, 5)
    assert np.array_equal(twice.depth, once.depth)
    assert np.array_equal(twice.valid, once.valid)


def test_fully_invalid_window_invalidates_output():
    depth = np.full((9, 9), 5.0, dtype=np.float32)
    valid = np.zeros((9, 9), dtype=bool)
    valid[0, 0] = True
    out = dp.min_pool_dilate(dp.DepthImage(depth, valid), 3)
    assert out.valid[0, 0] and out.valid[1, 1]
    assert not out.valid[5, 5]
    assert out.depth[5, 5] == 0.0


# ---------------------------------------------------------------------------
# stereo degradation
# ---------------------------------------------------------------------------

def camera():
    return sc.CameraModel(width=64, height=32, fx=100.0, fy=100.0, cx=32.0, cy=16.0, max_depth=12.0, baseline=0.1)


def plane(depth_m, h=32, w=64):
    return dp.DepthImage(np.full((h, w), depth_m, dtype=np.float32), np.ones((h, w), dtype=bool))


def test_degrade_disabled_is_identity_away_from_border():
    params = dp.StereoDegradeParams(subpixel_levels=None, speckle_rate=0.0, noise_sigma_coeff=0.0, min_depth=0.25, seed=3)
    cam = camera()
    gt = plane(5.0)
    out = dp.stereo_degrade(gt, cam, params)
    border = int(np.ceil(cam.fx * cam.baseline / params.min_depth))
    assert np.all(~out.valid[:, :border])
    assert np.all(out.valid[:, border:])
    assert np.array_equal(out.depth[:, border:], gt.depth[:, border:])


def test_exact_disparity_quantization_preserves_depth():
    """5 m at fx*b = 10 gives disparity 2.0 px: exactly representable at 1/16."""
    params = dp.StereoDegradeParams(subpixel_levels=16, speckle_rate=0.0, noise_sigma_coeff=0.0, seed=0)
    out = dp.stereo_degrade(plane(5.0), camera(), params)
    assert np.allclose(out.depth[out.valid], 5.0, atol=1e-6)


def test_quantization_rounds_depth():
    cam = camera()
    params = dp.StereoDegradeParams(subpixel_levels=1, speckle_rate=0.0, noise_sigma_coeff=0.0, seed=0)
    # depth 4.44 m -> disparity 2.252 -> rounds to 2 -> depth 5.0
    out = dp.stereo_degrade(plane(4.44), cam, params)
    assert np.allclose(out.depth[out.valid], 5.0, atol=1e-6)


def test_zero_depth_rejected():
    img = plane(5.0)
    img.depth[3, 3] = 0.0
    with pytest.raises(ValueError, match="disparity"):
        dp.stereo_degrade(img, camera(), dp.StereoDegradeParams())


def test_occlusion_shadow_left_of_post():
    """A near post in front of a far wall shadows pixels on its left side."""
    cam = camera()
    params = dp.StereoDegradeParams(subpixel_levels=None, speckle_rate=0.0, noise_sigma_coeff=0.0,
                                    occlusion_threshold=0.05, min_depth=0.5, seed=0)
    depth = np.full((32, 64), 10.0, dtype=np.float32)  # wall: disparity 1 px
    depth[:, 40:44] = 1.0  # post: disparity 10 px
    out = dp.stereo_degrade(dp.DepthImage(depth, np.ones_like(depth, dtype=bool)), cam, params)

    # reprojection oracle: wall pixel u maps to u-1, post pixels 40..43 map to 30..33
    # wall pixels with u-1 in {30..33} -> u in {31..34} are occluded
    border = int(np.ceil(cam.fx * cam.baseline / params.min_depth))
    assert border < 31
    assert np.all(~out.valid[:, 31:35])
    assert np.all(out.valid[:, 35:40])
    assert np.all(out.valid[:, 40:44])  # the post itself survives
    assert np.all(out.valid[:, 44:])


def test_degrade_deterministic_and_seed_sensitive():
    cam = camera()
    params = dp.StereoDegradeParams(seed=11)
    gt = plane(6.0)
    a = dp.stereo_degrade(gt, cam, params)
    b = dp.stereo_degrade(gt, cam, params)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.valid, b.valid)
    c = dp.stereo_degrade(gt, cam, dp.StereoDegradeParams(seed=12))
    assert not np.array_equal(a.valid, c.valid) or not np.array_equal(a.depth, c.depth)


def test_speckle_rate_controls_dropout():
    cam = camera()
    params = dp.StereoDegradeParams(subpixel_levels=None, speckle_rate=0.2, speckle_patch=4,
                                    noise_sigma_coeff=0.0, min_depth=2.0, seed=5)
    out = dp.stereo_degrade(plane(5.0), cam, params)
    border = int(np.ceil(cam.fx * cam.baseline / params.min_depth))
    interior = out.valid[:, border:]
    dropout = 1.0 - interior.mean()
    assert 0.05 < dropout < 0.35  # patches may overlap; rate is approximate


def test_noise_grows_with_depth_squared():
    cam = camera()
    rng_sigma = 0.004
    params = dp.StereoDegradeParams(subpixel_levels=None, speckle_rate=0.0,
                                    noise_sigma_coeff=rng_sigma, min_depth=2.0, seed=7)
    near = dp.stereo_degrade(plane(2.0), cam, params)
    far = dp.stereo_degrade(plane(8.0), cam, params)
    err_near = np.std(near.depth[near.valid] - 2.0)
    err_far = np.std(far.depth[far.valid] - 8.0)
    assert abs(err_near - rng_sigma * 4.0) < 0.2 * rng_sigma * 4.0
    assert abs(err_far - rng_sigma * 64.0) < 0.2 * rng_sigma * 64.0


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_normalize_max_depth_is_one():
    img = plane(12.0)
    out = dp.to_encoder_input(img, 12.0)
    assert np.all(out == 1.0)


def test_normalize_half_depth():
    img = plane(6.0)
    out = dp.to_encoder_input(img, 12.0)
    assert np.allclose(out, 0.5)


def test_normalize_invalid_maps_far():
    img = dp.DepthImage(np.full((8, 8), 3.0, dtype=np.float32), np.zeros((8, 8), dtype=bool))
    out = dp.to_encoder_input(img, 12.0)
    assert np.all(out == 1.0)


# ---------------------------------------------------------------------------
# dataset round trip
# ---------------------------------------------------------------------------

def test_dataset_bit_exact_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    frames = [random_image(rng, 24, 32) for _ in range(7)]
    path = tmp_path / "frames.dtd"
    dp.write_depth_dataset(str(path), frames, max_depth=12.0)
    loaded, max_depth = dp.read_depth_dataset(str(path))
    assert max_depth == 12.0
    assert len(loaded) == 7
    for a, b in zip(frames, loaded):
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.valid, b.valid)
    # byte-stable: writing again produces identical bytes
    path2 = tmp_path / "frames2.dtd"
    dp.write_depth_dataset(str(path2), frames, max_depth=12.0)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_header_layout(tmp_path):
    frames = [plane(5.0, h=16, w=20)]
    path = tmp_path / "one.dtd"
    dp.write_depth_dataset(str(path), frames, max_depth=9.0)
    blob = path.read_bytes()
    assert blob[:4] == b"DTD1"
    import struct

    count, h, w, md = struct.unpack("<IIIf", blob[4:20])
    assert (count, h, w) == (1, 16, 20)
    assert md == np.float32(9.0)
    assert len(blob) == 20 + 16 * 20 * 5


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dtd"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="DTD1"):
        dp.read_depth_dataset(str(path))
