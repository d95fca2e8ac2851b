import numpy as np
import pytest

from depthnav import scene as sc
from depthnav.dynamics import quat_from_axis_angle, quat_normalize, quat_to_rotmat

BOUNDS = (np.array([-2.0, -10.0, 0.0]), np.array([22.0, 10.0, 6.0]))


def small_camera(**kw):
    defaults = dict(width=32, height=24, fx=24.0, fy=24.0, cx=16.0, cy=12.0, max_depth=12.0)
    defaults.update(kw)
    return sc.CameraModel(**defaults)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_zero_density_gives_empty_scene():
    scn = sc.generate_scene(0, 0.0, BOUNDS, clearance=1.0)
    assert scn.primitives == []


def test_generation_deterministic():
    a = sc.generate_scene(123, 0.08, BOUNDS, clearance=1.0)
    b = sc.generate_scene(123, 0.08, BOUNDS, clearance=1.0)
    assert len(a.primitives) == len(b.primitives)
    for pa, pb in zip(a.primitives, b.primitives):
        assert pa.kind == pb.kind
        assert np.array_equal(pa.center, pb.center)
        assert np.array_equal(pa.dims, pb.dims)


def test_poisson_count_expectation():
    """density * area sets the mean primitive count (independent area check)."""
    bounds = (np.array([0.0, 0.0, 0.0]), np.array([20.0, 20.0, 5.0]))
    density = 0.1
    area = 20.0 * 20.0
    counts = [len(sc.generate_scene(seed, density, bounds, clearance=1.0).primitives) for seed in range(100)]
    mean = np.mean(counts)
    # Poisson(40): SE of the mean over 100 seeds is ~0.63
    assert abs(mean - density * area) < 3.0


def test_primitives_inside_bounds_and_clear_of_anchors():
    scn = sc.generate_scene(9, 0.1, BOUNDS, clearance=1.5)
    for prim in scn.primitives:
        ext = prim.extent()
        assert np.all(prim.center - ext >= scn.bounds_min - 1e-9)
        assert np.all(prim.center + ext <= scn.bounds_max + 1e-9)
        for anchor in (scn.start_center, scn.goal_center):
            d_xy = np.hypot(*(prim.center[:2] - anchor[:2]))
            assert d_xy >= scn.clearance + prim.xy_radius() - 1e-9


def test_generation_failure_names_constraint():
    tiny = (np.array([0.0, 0.0, 0.0]), np.array([2.0, 2.0, 2.0]))
    with pytest.raises(ValueError, match="clearance"):
        sc.generate_scene(0, 5.0, tiny, clearance=1.4)


def test_primitive_validation():
    with pytest.raises(ValueError):
        sc.Primitive("sphere", np.zeros(3), np.array([-1.0]))
    with pytest.raises(ValueError):
        sc.Primitive("pyramid", np.zeros(3), np.array([1.0]))
    with pytest.raises(ValueError):
        sc.Primitive("box", np.zeros(3), np.array([1.0]))


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def identity_pose(position=np.zeros(3)):
    # camera frame == world frame: optical axis along world +z
    return (position, np.array([1.0, 0.0, 0.0, 0.0]))


def test_empty_scene_renders_max_depth():
    scn = sc.Scene([], *BOUNDS, seed=0)
    img = sc.raycast_depth(scn, identity_pose(), small_camera())
    assert np.all(img.depth == np.float32(12.0))
    assert np.all(img.valid)


def test_sphere_center_pixel_depth():
    prim = sc.Primitive("sphere", np.array([0.0, 0.0, 5.0]), np.array([1.0]))
    scn = sc.Scene([prim], *BOUNDS, seed=0)
    img = sc.raycast_depth(scn, identity_pose(), small_camera())
    assert abs(float(img.depth[12, 16]) - 4.0) < 1e-6


def test_sphere_behind_camera_invisible():
    prim = sc.Primitive("sphere", np.array([0.0, 0.0, -5.0]), np.array([1.0]))
    scn = sc.Scene([prim], *BOUNDS, seed=0)
    img = sc.raycast_depth(scn, identity_pose(), small_camera())
    assert np.all(img.depth == np.float32(12.0))


def test_box_face_depth():
    prim = sc.Primitive("box", np.array([0.0, 0.0, 6.0]), np.array([2.0, 2.0, 1.0]))
    scn = sc.Scene([prim], *BOUNDS, seed=0)
    img = sc.raycast_depth(scn, identity_pose(), small_camera())
    assert abs(float(img.depth[12, 16]) - 5.0) < 1e-6


def test_depth_is_z_depth_not_euclidean():
    """Off-axis pixels of a frontal plane read the plane distance, not the ray length."""
    prim = sc.Primitive("box", np.array([0.0, 0.0, 6.0]), np.array([50.0, 50.0, 1.0]))
    scn = sc.Scene([prim], np.array([-60.0, -60, -1]), np.array([60.0, 60, 8]), seed=0)
    img = sc.raycast_depth(scn, identity_pose(), small_camera())
    assert np.allclose(img.depth, 5.0, atol=1e-5)


def scene_sdf(scn, p):
    """Independent signed-distance re-derivation for the marching oracle."""
    best = np.inf
    for prim in scn.primitives:
        c = p - prim.center
        if prim.kind == "sphere":
            d = np.linalg.norm(c) - prim.dims[0]
        elif prim.kind == "box":
            q = np.abs(c) - prim.dims
            d = np.linalg.norm(np.maximum(q, 0.0)) + min(max(q[0], q[1], q[2]), 0.0)
        else:
            dxy = np.hypot(c[0], c[1]) - prim.dims[0]
            dz = abs(c[2]) - prim.dims[1]
            d = min(max(dxy, dz), 0.0) + np.hypot(max(dxy, 0.0), max(dz, 0.0))
        best = min(best, d)
    return best


def march_depth(scn, origin, direction, max_depth):
    """Sphere-marching along a unit ray; returns z-depth (direction[2] factor)."""
    t = 0.0
    for _ in range(400):
        p = origin + t * direction
        d = scene_sdf(scn, p)
        if d < 1e-7:
            break
        t += d
        if t > max_depth * 3:
            break
    return t


def test_raycast_matches_sphere_marching_oracle():
    rng = np.random.default_rng(21)
    scn = sc.generate_scene(4, 0.05, BOUNDS, clearance=1.0)
    cam = small_camera()
    for _ in range(6):
        pos = np.array([rng.uniform(0, 18), rng.uniform(-8, 8), rng.uniform(1, 5)])
        q = quat_normalize(rng.standard_normal(4))
        img = sc.raycast_depth(scn, (pos, q), cam)
        rot = quat_to_rotmat(q)
        for _ in range(12):
            i = int(rng.integers(0, cam.height))
            j = int(rng.integers(0, cam.width))
            d_cam = np.array([(j - cam.cx) / cam.fx, (i - cam.cy) / cam.fy, 1.0])
            d_world = rot @ d_cam
            norm = np.linalg.norm(d_world)
            t_unit = march_depth(scn, pos, d_world / norm, cam.max_depth)
            z_oracle = min(t_unit / norm, cam.max_depth)
            if abs(z_oracle - cam.max_depth) < 1e-3:
                assert float(img.depth[i, j]) >= cam.max_depth - 1e-3
            else:
                assert abs(float(img.depth[i, j]) - z_oracle) < 1e-4


def test_adding_primitive_never_increases_depth():
    rng = np.random.default_rng(31)
    scn = sc.generate_scene(17, 0.05, BOUNDS, clearance=1.0)
    cam = small_camera()
    pose = (np.array([1.0, 0.0, 2.0]), quat_from_axis_angle(np.array([0, 1, 0]), 0.4))
    base = sc.raycast_depth(scn, pose, cam)
    extra = sc.Primitive("sphere", np.array([3.0, 0.5, 2.0]), np.array([0.8]))
    bigger = sc.Scene(scn.primitives + [extra], scn.bounds_min, scn.bounds_max, seed=0)
    after = sc.raycast_depth(bigger, pose, cam)
    assert np.all(after.depth <= base.depth + 1e-7)


def test_render_determinism_bit_exact():
    scn = sc.generate_scene(8, 0.08, BOUNDS, clearance=1.0)
    cam = small_camera()
    pose = (np.array([1.0, 0.2, 2.0]), quat_from_axis_angle(np.array([0, 0, 1]), 0.3))
    a = sc.raycast_depth(scn, pose, cam)
    b = sc.raycast_depth(scn, pose, cam)
    assert np.array_equal(a.depth, b.depth)


# ---------------------------------------------------------------------------
# collision
# ---------------------------------------------------------------------------

def test_collision_at_sphere_center():
    prim = sc.Primitive("sphere", np.array([5.0, 0.0, 3.0]), np.array([1.0]))
    scn = sc.Scene([prim], *BOUNDS, seed=0)
    assert sc.check_collision(scn, np.array([5.0, 0.0, 3.0]), 0.2)


def test_no_collision_in_empty_interior():
    scn = sc.Scene([], *BOUNDS, seed=0)
    assert not sc.check_collision(scn, np.array([5.0, 0.0, 3.0]), 0.2)


def test_exact_radius_distance_is_free():
    """Strict inequality: exactly drone_radius from a box face is collision-free."""
    prim = sc.Primitive("box", np.array([5.0, 0.0, 3.0]), np.array([1.0, 1.0, 1.0]))
    scn = sc.Scene([prim], *BOUNDS, seed=0)
    # face at x = 6; drone at x = 6.25 with radius 0.25
    assert not sc.check_collision(scn, np.array([6.25, 0.0, 3.0]), 0.25)
    assert sc.check_collision(scn, np.array([6.249999, 0.0, 3.0]), 0.25)


def test_bounds_margin_collision():
    scn = sc.Scene([], *BOUNDS, seed=0)
    assert sc.check_collision(scn, np.array([5.0, 0.0, 0.1]), 0.2)  # near floor
    assert not sc.check_collision(scn, np.array([5.0, 0.0, 0.21]), 0.2)


def test_signed_distance_matches_oracle_random_points():
    rng = np.random.default_rng(12)
    scn = sc.generate_scene(3, 0.08, BOUNDS, clearance=1.0)
    for _ in range(200):
        p = rng.uniform(BOUNDS[0], BOUNDS[1])
        assert abs(sc.scene_signed_distance(scn, p) - scene_sdf(scn, p)) < 1e-12


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_scene_round_trip(tmp_path):
    scn = sc.generate_scene(77, 0.1, BOUNDS, clearance=1.2)
    path = tmp_path / "scene.txt"
    sc.save_scene(scn, str(path))
    loaded = sc.load_scene(str(path))
    assert loaded.seed == scn.seed
    assert np.array_equal(loaded.bounds_min, scn.bounds_min)
    assert np.array_equal(loaded.bounds_max, scn.bounds_max)
    assert np.array_equal(loaded.start_center, scn.start_center)
    assert len(loaded.primitives) == len(scn.primitives)
    for pa, pb in zip(scn.primitives, loaded.primitives):
        assert pa.kind == pb.kind
        assert np.array_equal(pa.center, pb.center)
        assert np.array_equal(pa.dims, pb.dims)


def test_load_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("SOMETHING ELSE\n")
    with pytest.raises(ValueError, match="DEPTHNAV-SCENE"):
        sc.load_scene(str(path))
