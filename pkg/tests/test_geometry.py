"""Oracle and property tests for the rigid-transform core."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from helpers import (
    AXIS_X,
    AXIS_Y,
    grid_distance_oracle,
    homogeneous_point_oracle,
    random_params,
    resample_oracle,
    rigid_point_oracle,
    rotation_oracle,
)
from svrkit.geometry import (
    IDENTITY,
    RigidParams,
    VolumeGeometry,
    compose_affine,
    euler_to_rotation,
    grid_distance,
    invert,
    is_rigid,
    make_grid,
    resample,
    transform_grid,
)


class TestRigidParams:
    def test_array_round_trip(self):
        p = RigidParams(1.0, -2.0, 3.0, 4.0, -5.0, 6.0)
        assert_allclose(RigidParams.from_array(p.as_array()).as_array(), p.as_array())

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            RigidParams(np.nan, 0, 0, 0, 0, 0)
        with pytest.raises(ValueError):
            RigidParams(0, 0, 0, np.inf, 0, 0)


class TestEulerToRotation:
    def test_zero_angles_identity(self):
        assert_allclose(euler_to_rotation(RigidParams()), np.eye(3))

    def test_quarter_turn_about_z_maps_x_to_y(self):
        rot = euler_to_rotation(RigidParams(alpha_z=90.0))
        assert_allclose(rot @ AXIS_X, AXIS_Y, atol=1e-12)

    def test_matches_per_axis_composition_oracle(self):
        rot = euler_to_rotation(RigidParams(3.0, -4.0, 5.0))
        assert_allclose(rot, rotation_oracle(3.0, -4.0, 5.0), atol=1e-12)

    def test_matches_scipy_extrinsic_xyz(self):
        rng = np.random.default_rng(11)
        perm = [2, 1, 0]
        for _ in range(100):
            angles = rng.uniform(-90, 90, size=3)
            rot = euler_to_rotation(RigidParams(*angles))
            ref = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
            assert_allclose(rot, ref[np.ix_(perm, perm)], atol=1e-12)

    def test_orthonormal_with_unit_determinant(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            rot = euler_to_rotation(random_params(rng))
            assert np.abs(rot @ rot.T - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(rot) - 1.0) < 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            euler_to_rotation(RigidParams(alpha_x=np.inf))


class TestComposeAffine:
    def test_zero_params_identity(self):
        geom = VolumeGeometry((8, 8, 8))
        assert_allclose(compose_affine(RigidParams(), geom), np.eye(4))

    def test_translation_only(self):
        geom = VolumeGeometry((8, 8, 8))
        mat = compose_affine(RigidParams(t_x=1.0, t_y=2.0, t_z=3.0), geom)
        expected = np.eye(4)
        expected[:3, 3] = [3.0, 2.0, 1.0]  # (z, y, x) ordering
        assert_allclose(mat, expected)

    def test_quarter_turn_about_offset_center(self):
        # rotate about z through c = (10, 0, 0) mm (a point offset along depth)
        geom = VolumeGeometry((8, 8, 8), rotation_center=(10.0, 0.0, 0.0))
        params = RigidParams(alpha_z=90.0)
        mat = compose_affine(params, geom)
        for point in [np.array([10.0, 5.0, 0.0]), np.array([0.0, 1.0, 2.0])]:
            expected = rigid_point_oracle(params, geom.center, point)
            assert_allclose(transform_grid(mat, point), expected, atol=1e-12)

    def test_matches_point_oracle_on_random_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            params = random_params(rng)
            center = rng.uniform(-20, 20, size=3)
            geom = VolumeGeometry((8, 8, 8), rotation_center=tuple(center))
            mat = compose_affine(params, geom)
            point = rng.uniform(-50, 50, size=3)
            assert_allclose(
                transform_grid(mat, point),
                rigid_point_oracle(params, center, point),
                atol=1e-9,
            )

    def test_invariants_hold_over_sampled_ranges(self):
        rng = np.random.default_rng(13)
        geom = VolumeGeometry((8, 8, 8))
        for _ in range(200):
            mat = compose_affine(random_params(rng), geom)
            assert is_rigid(mat)

    def test_rotation_center_is_fixed_point_up_to_translation(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            params = random_params(rng)
            center = rng.uniform(-30, 30, size=3)
            geom = VolumeGeometry((8, 8, 8), rotation_center=tuple(center))
            mat = compose_affine(params, geom)
            moved = transform_grid(mat, center)
            assert np.linalg.norm(moved - center - params.translation_zyx()) < 1e-10


class TestMakeGrid:
    def test_single_voxel_sits_at_center(self):
        geom = VolumeGeometry((1, 1, 1), spacing=2.4)
        assert_allclose(make_grid(geom), np.zeros((1, 1, 1, 3)))

    def test_three_cube_corners(self):
        geom = VolumeGeometry((3, 3, 3), spacing=1.0)
        grid = make_grid(geom)
        assert_allclose(grid[0, 0, 0], [-1.0, -1.0, -1.0])
        assert_allclose(grid[2, 2, 2], [1.0, 1.0, 1.0])
        assert_allclose(grid[0, 2, 0], [-1.0, 1.0, -1.0])

    def test_reference_scale_extents(self):
        geom = VolumeGeometry((70, 100, 100), spacing=2.4)
        grid = make_grid(geom)
        extent = grid.max(axis=(0, 1, 2)) - grid.min(axis=(0, 1, 2))
        assert_allclose(extent, [69 * 2.4, 99 * 2.4, 99 * 2.4])
        assert_allclose(extent, [165.6, 237.6, 237.6])
        assert_allclose(grid.mean(axis=(0, 1, 2)), geom.center, atol=1e-12)

    def test_corners_symmetric_about_center(self):
        geom = VolumeGeometry((5, 6, 7), spacing=1.3, rotation_center=(2.0, -1.0, 0.5))
        grid = make_grid(geom)
        assert_allclose(grid[0, 0, 0] + grid[-1, -1, -1], 2 * geom.center)


class TestTransformGrid:
    def test_identity_leaves_grid_unchanged(self):
        grid = make_grid(VolumeGeometry((4, 5, 6)))
        assert np.array_equal(transform_grid(IDENTITY, grid), grid)

    def test_translation_offsets_every_point(self):
        grid = make_grid(VolumeGeometry((4, 4, 4)))
        mat = np.eye(4)
        mat[:3, 3] = [1.0, -2.0, 0.5]
        assert_allclose(transform_grid(mat, grid), grid + [1.0, -2.0, 0.5])

    def test_matches_per_point_homogeneous_oracle(self):
        rng = np.random.default_rng(23)
        geom = VolumeGeometry((5, 5, 5), spacing=1.7)
        grid = make_grid(geom)
        for _ in range(100):
            mat = compose_affine(random_params(rng), geom)
            moved = transform_grid(mat, grid)
            flat = grid.reshape(-1, 3)
            moved_flat = moved.reshape(-1, 3)
            for idx in range(0, flat.shape[0], 7):
                assert_allclose(
                    moved_flat[idx],
                    homogeneous_point_oracle(mat, flat[idx]),
                    atol=1e-12,
                )

    def test_composition_associativity(self):
        rng = np.random.default_rng(29)
        geom = VolumeGeometry((4, 4, 4))
        grid = make_grid(geom)
        for _ in range(25):
            mat_a = compose_affine(random_params(rng), geom)
            mat_b = compose_affine(random_params(rng), geom)
            left = transform_grid(mat_a @ mat_b, grid)
            right = transform_grid(mat_a, transform_grid(mat_b, grid))
            assert_allclose(left, right, atol=1e-10)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            transform_grid(np.eye(3), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            transform_grid(np.eye(4), np.zeros((2, 4)))


class TestResample:
    def test_identity_is_exact(self):
        rng = np.random.default_rng(31)
        geom = VolumeGeometry((6, 7, 8))
        vol = rng.random(geom.shape)
        assert np.array_equal(resample(vol, IDENTITY, geom), vol)

    def test_single_voxel_depth_shift_exact_interior(self):
        rng = np.random.default_rng(37)
        geom = VolumeGeometry((8, 6, 6), spacing=2.4)
        vol = rng.random(geom.shape)
        mat = compose_affine(RigidParams(t_z=2.4), geom)
        out = resample(vol, mat, geom)
        assert np.array_equal(out[1:], vol[:-1])
        assert np.all(out[0] == 0.0)

    def test_matches_loop_trilinear_oracle(self):
        rng = np.random.default_rng(41)
        geom = VolumeGeometry((8, 8, 8), spacing=2.4)
        for _ in range(30):
            vol = rng.random(geom.shape)
            mat = compose_affine(random_params(rng, max_trans=6.0), geom)
            assert_allclose(resample(vol, mat, geom), resample_oracle(vol, mat, geom), atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            resample(np.zeros((3, 3, 3)), IDENTITY, VolumeGeometry((4, 4, 4)))


class TestGridDistance:
    def test_equal_transforms_give_zero(self):
        geom = VolumeGeometry((6, 6, 6))
        grid = make_grid(geom)
        mat = compose_affine(RigidParams(2.0, -1.0, 3.0, 1.0, 2.0, -0.5), geom)
        assert grid_distance(mat, mat, grid) == 0.0

    def test_pure_translation_three_four_five(self):
        grid = make_grid(VolumeGeometry((5, 5, 5)))
        mat = np.eye(4)
        mat[:3, 3] = [0.0, 4.0, 3.0]  # 3 mm along x, 4 mm along y
        assert_allclose(grid_distance(IDENTITY, mat, grid), 5.0, rtol=1e-12)

    def test_small_rotation_matches_chord_length_oracle(self):
        # 5 deg about z: every point moves 2 sin(2.5 deg) times its in-plane radius
        geom = VolumeGeometry((70, 100, 100), spacing=2.4)
        grid = make_grid(geom)
        mat = compose_affine(RigidParams(alpha_z=5.0), geom)
        value = grid_distance(IDENTITY, mat, grid)
        radii = np.sqrt(grid[..., 1] ** 2 + grid[..., 2] ** 2)
        expected = float(np.mean(2.0 * np.sin(np.deg2rad(2.5)) * radii))
        assert_allclose(value, expected, rtol=1e-9)

    def test_matches_per_point_oracle(self):
        rng = np.random.default_rng(43)
        geom = VolumeGeometry((5, 5, 5), spacing=2.0)
        grid = make_grid(geom)
        for _ in range(100):
            mat_a = compose_affine(random_params(rng), geom)
            mat_b = compose_affine(random_params(rng), geom)
            assert_allclose(
                grid_distance(mat_a, mat_b, grid),
                grid_distance_oracle(mat_a, mat_b, grid),
                atol=1e-9,
            )

    def test_pseudometric_properties(self):
        rng = np.random.default_rng(47)
        geom = VolumeGeometry((4, 4, 4))
        grid = make_grid(geom)
        for _ in range(50):
            a = compose_affine(random_params(rng), geom)
            b = compose_affine(random_params(rng), geom)
            c = compose_affine(random_params(rng), geom)
            dab = grid_distance(a, b, grid)
            assert dab >= 0.0
            assert_allclose(dab, grid_distance(b, a, grid), rtol=1e-12)
            assert dab <= grid_distance(a, c, grid) + grid_distance(c, b, grid) + 1e-9

    def test_invariant_to_point_ordering(self):
        rng = np.random.default_rng(53)
        geom = VolumeGeometry((5, 5, 5))
        grid = make_grid(geom)
        flat = grid.reshape(-1, 3)
        shuffled = flat[rng.permutation(len(flat))]
        mat_a = compose_affine(random_params(rng), geom)
        mat_b = compose_affine(random_params(rng), geom)
        assert_allclose(
            grid_distance(mat_a, mat_b, grid),
            grid_distance(mat_a, mat_b, shuffled),
            rtol=1e-12,
        )


class TestInvert:
    def test_identity(self):
        assert_allclose(invert(IDENTITY), IDENTITY)

    def test_pure_translation(self):
        mat = np.eye(4)
        mat[:3, 3] = [1.0, -2.0, 3.0]
        inv = invert(mat)
        assert_allclose(inv[:3, 3], [-1.0, 2.0, -3.0])
        assert_allclose(inv[:3, :3], np.eye(3))

    def test_round_trip_on_random_points(self):
        rng = np.random.default_rng(59)
        geom = VolumeGeometry((8, 8, 8))
        for _ in range(100):
            mat = compose_affine(random_params(rng), geom)
            pts = rng.uniform(-60, 60, size=(100, 3))
            back = transform_grid(invert(mat), transform_grid(mat, pts))
            assert np.abs(back - pts).max() < 1e-9

    def test_product_with_inverse_is_identity(self):
        rng = np.random.default_rng(61)
        geom = VolumeGeometry((8, 8, 8))
        for _ in range(100):
            mat = compose_affine(random_params(rng), geom)
            assert np.abs(mat @ invert(mat) - np.eye(4)).max() < 1e-10


class TestVolumeGeometry:
    def test_validation(self):
        with pytest.raises(ValueError):
            VolumeGeometry((0, 4, 4))
        with pytest.raises(ValueError):
            VolumeGeometry((4, 4, 4), spacing=0.0)

    def test_extent(self):
        assert_allclose(VolumeGeometry((70, 100, 100), 2.4).extent_mm(), [165.6, 237.6, 237.6])
