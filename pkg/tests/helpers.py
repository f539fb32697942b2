"""Brute-force oracles shared by the unit and acceptance suites.

Every oracle here deliberately recomputes its quantity by a different route
than the library (scalar loops, Rodrigues axis rotations, homogeneous
multiplies) so the two sides stay independent.
"""

from __future__ import annotations

import numpy as np

from svrkit.geometry import RigidParams, VolumeGeometry

# canonical right-handed basis expressed in (z, y, x) component order
AXIS_X = np.array([0.0, 0.0, 1.0])
AXIS_Y = np.array([0.0, 1.0, 0.0])
AXIS_Z = np.array([1.0, 0.0, 0.0])


def rodrigues(axis_zyx: np.ndarray, angle_deg: float) -> np.ndarray:
    """Axis-angle rotation matrix via the Rodrigues formula, in zyx ordering."""
    theta = np.deg2rad(angle_deg)
    # convert to xyz components for the cross-product matrix, then permute back
    z, y, x = axis_zyx
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])  # xyz ordering
    rot_xyz = np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)
    perm = [2, 1, 0]
    return rot_xyz[np.ix_(perm, perm)]


def rotation_oracle(alpha_x: float, alpha_y: float, alpha_z: float) -> np.ndarray:
    """Compose the three axis rotations x-then-y-then-z explicitly."""
    return (
        rodrigues(AXIS_Z, alpha_z)
        @ rodrigues(AXIS_Y, alpha_y)
        @ rodrigues(AXIS_X, alpha_x)
    )


def rigid_point_oracle(
    params: RigidParams, center: np.ndarray, point: np.ndarray
) -> np.ndarray:
    """Apply R (p - c) + c + t to a single point, matrices built independently."""
    rot = rotation_oracle(params.alpha_x, params.alpha_y, params.alpha_z)
    t = np.array([params.t_z, params.t_y, params.t_x])
    return rot @ (point - center) + center + t


def homogeneous_point_oracle(matrix: np.ndarray, point: np.ndarray) -> np.ndarray:
    """4x4 homogeneous multiply of one 3-point."""
    ph = np.append(point, 1.0)
    out = np.zeros(4)
    for i in range(4):
        for j in range(4):
            out[i] += matrix[i, j] * ph[j]
    return out[:3] / out[3]


def trilinear_oracle(volume: np.ndarray, voxel: np.ndarray) -> float:
    """Scalar 8-neighbour trilinear interpolation; zero outside the lattice."""
    base = np.floor(voxel).astype(int)
    frac = voxel - base
    value = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                k, j, i = base + (dz, dy, dx)
                w = (
                    (frac[0] if dz else 1.0 - frac[0])
                    * (frac[1] if dy else 1.0 - frac[1])
                    * (frac[2] if dx else 1.0 - frac[2])
                )
                if 0 <= k < volume.shape[0] and 0 <= j < volume.shape[1] and 0 <= i < volume.shape[2]:
                    value += w * volume[k, j, i]
    return value


def resample_oracle(
    volume: np.ndarray, matrix: np.ndarray, geom: VolumeGeometry
) -> np.ndarray:
    """Loop-based pull-back resampling; independent of the ndimage path."""
    inv = np.linalg.inv(matrix)
    center_idx = (np.asarray(geom.shape, dtype=float) - 1.0) / 2.0
    center = np.asarray(geom.rotation_center, dtype=float)
    out = np.zeros(geom.shape)
    for k in range(geom.shape[0]):
        for j in range(geom.shape[1]):
            for i in range(geom.shape[2]):
                p = (np.array([k, j, i], dtype=float) - center_idx) * geom.spacing + center
                source = homogeneous_point_oracle(inv, p)
                voxel = (source - center) / geom.spacing + center_idx
                out[k, j, i] = trilinear_oracle(volume, voxel)
    return out


def grid_distance_oracle(
    matrix_a: np.ndarray, matrix_b: np.ndarray, grid: np.ndarray
) -> float:
    """Per-point transform-and-norm mean distance."""
    pts = grid.reshape(-1, 3)
    total = 0.0
    for p in pts:
        pa = homogeneous_point_oracle(matrix_a, p)
        pb = homogeneous_point_oracle(matrix_b, p)
        total += float(np.sqrt(np.sum((pa - pb) ** 2)))
    return total / len(pts)


def random_params(rng: np.random.Generator, max_angle=5.0, max_trans=12.0) -> RigidParams:
    a = rng.uniform(-max_angle, max_angle, size=3)
    t = rng.uniform(-max_trans, max_trans, size=3)
    return RigidParams(a[0], a[1], a[2], t[0], t[1], t[2])
