"""Rigid 3D transforms, physical grids, and trilinear resampling.

Conventions used throughout the toolkit:

* Volume arrays are indexed ``(depth, row, column)``.
* Physical points are millimetre vectors ordered ``(z, y, x)`` so that the
  vector components line up with the array axes: component 0 is the depth
  (z) axis, component 1 the row (y) axis, component 2 the column (x) axis.
* Rotation angles are degrees at every API boundary; radians appear only
  inside trig calls.  ``alpha_x`` spins about the column (x) axis, and so on.
* The full rotation is the extrinsic x-then-y-then-z composition
  ``R = Rz(alpha_z) @ Ry(alpha_y) @ Rx(alpha_x)``.
* Affine matrices are 4x4, double precision, acting on homogeneous
  ``(z, y, x, 1)`` physical coordinates.
* Rigid motion is applied about a volume's rotation centre:
  ``T(p) = R (p - c) + c + t``.

All functions are pure and operate on immutable inputs, so they are safe to
call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "RigidParams",
    "VolumeGeometry",
    "euler_to_rotation",
    "rigid_about",
    "compose_affine",
    "make_grid",
    "transform_grid",
    "resample",
    "grid_distance",
    "invert",
    "is_rigid",
]

# permutation taking canonical (x, y, z) component order to (z, y, x)
_XYZ_TO_ZYX = (2, 1, 0)


@dataclass(frozen=True)
class RigidParams:
    """The six rigid motion parameters: rotations in degrees, translations in mm."""

    alpha_x: float = 0.0
    alpha_y: float = 0.0
    alpha_z: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0

    def __post_init__(self) -> None:
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"rigid parameters must be finite, got {values}")

    def as_array(self) -> np.ndarray:
        """Parameters as ``[alpha_x, alpha_y, alpha_z, t_x, t_y, t_z]`` float64."""
        return np.array(
            [self.alpha_x, self.alpha_y, self.alpha_z, self.t_x, self.t_y, self.t_z],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values: np.ndarray) -> "RigidParams":
        values = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(*[float(v) for v in values])

    def angles_deg(self) -> np.ndarray:
        return np.array([self.alpha_x, self.alpha_y, self.alpha_z], dtype=np.float64)

    def translation_zyx(self) -> np.ndarray:
        """Translation as a (z, y, x)-ordered millimetre vector."""
        return np.array([self.t_z, self.t_y, self.t_x], dtype=np.float64)


@dataclass(frozen=True)
class VolumeGeometry:
    """Voxel lattice description: shape ``(D, H, W)``, isotropic mm spacing, centre."""

    shape: tuple[int, int, int]
    spacing: float = 2.4
    rotation_center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(
            self, "rotation_center", tuple(float(c) for c in self.rotation_center)
        )

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.rotation_center, dtype=np.float64)

    def extent_mm(self) -> np.ndarray:
        """Physical span ``(n - 1) * spacing`` per axis."""
        return (np.asarray(self.shape, dtype=np.float64) - 1.0) * self.spacing


def _axis_rotation(axis: str, angle_deg: float) -> np.ndarray:
    """3x3 rotation about a named axis, expressed in (z, y, x) component order."""
    theta = np.deg2rad(float(angle_deg))
    c, s = np.cos(theta), np.sin(theta)
    if axis == "x":
        m = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    elif axis == "y":
        m = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    elif axis == "z":
        m = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return m[np.ix_(_XYZ_TO_ZYX, _XYZ_TO_ZYX)]


def euler_to_rotation(params: RigidParams) -> np.ndarray:
    """Rotation matrix ``Rz @ Ry @ Rx`` for the given Euler angles.

    Returns a 3x3 orthonormal matrix (det +1) acting on (z, y, x)-ordered
    vectors.  Angles are taken from ``params`` in degrees.
    """
    return (
        _axis_rotation("z", params.alpha_z)
        @ _axis_rotation("y", params.alpha_y)
        @ _axis_rotation("x", params.alpha_x)
    )


def rigid_about(params: RigidParams, center: np.ndarray | tuple) -> np.ndarray:
    """4x4 rigid transform ``T(p) = R (p - c) + c + t`` about an arbitrary centre."""
    rot = euler_to_rotation(params)
    center = np.asarray(center, dtype=np.float64)
    offset = center - rot @ center + params.translation_zyx()
    matrix = np.eye(4, dtype=np.float64)
    matrix[:3, :3] = rot
    matrix[:3, 3] = offset
    return matrix


def compose_affine(params: RigidParams, geom: VolumeGeometry) -> np.ndarray:
    """4x4 rigid transform about the volume's rotation centre."""
    return rigid_about(params, geom.center)


def is_rigid(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    """True when ``matrix`` is a homogeneous rigid transform within ``tol``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (4, 4):
        return False
    if not np.array_equal(matrix[3], [0.0, 0.0, 0.0, 1.0]):
        return False
    rot = matrix[:3, :3]
    ortho_err = np.abs(rot @ rot.T - np.eye(3)).max()
    return bool(ortho_err < tol and abs(np.linalg.det(rot) - 1.0) < tol)


def make_grid(geom: VolumeGeometry) -> np.ndarray:
    """Physical coordinate grid, shape ``(D, H, W, 3)`` with (z, y, x) mm points.

    Voxel ``(k, j, i)`` maps to ``((k, j, i) - (D-1, H-1, W-1)/2) * spacing + c``,
    which places the lattice symmetrically about the rotation centre.
    """
    axes = [
        (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * geom.spacing + c
        for n, c in zip(geom.shape, geom.rotation_center)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def transform_grid(matrix: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Map every grid point through a 4x4 homogeneous transform.

    ``grid`` is any ``(..., 3)`` array of physical points; the output has the
    same shape.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {matrix.shape}")
    if grid.shape[-1] != 3:
        raise ValueError(f"grid must have trailing dimension 3, got {grid.shape}")
    return grid @ matrix[:3, :3].T + matrix[:3, 3]


def invert(matrix: np.ndarray) -> np.ndarray:
    """Inverse of a homogeneous affine transform."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rot_inv = np.linalg.inv(matrix[:3, :3])
    out = np.eye(4, dtype=np.float64)
    out[:3, :3] = rot_inv
    out[:3, 3] = -rot_inv @ matrix[:3, 3]
    return out


def resample(
    volume: np.ndarray, matrix: np.ndarray, geom: VolumeGeometry
) -> np.ndarray:
    """Warp ``volume`` by the rigid transform using pull-back trilinear sampling.

    Output voxel at physical point ``p`` reads ``volume`` at ``T^{-1}(p)``; the
    volume is treated as embedded in a zero background, so samples beyond the
    lattice blend linearly to zero.  Output shape and geometry equal the input.

    The pull-back is evaluated directly in index space, which keeps the
    identity transform and exact integer-voxel shifts bit-exact.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.shape != geom.shape:
        raise ValueError(f"volume shape {volume.shape} != geometry shape {geom.shape}")
    inv = invert(matrix)
    rot, off = inv[:3, :3], inv[:3, 3]
    center_idx = (np.asarray(geom.shape, dtype=np.float64) - 1.0) / 2.0
    center = geom.center
    # source voxel for output voxel v:  rot @ (v - ci) + (rot @ c + off - c)/s + ci
    pulled_center = (rot @ center + off - center) / geom.spacing + center_idx
    offset = pulled_center - rot @ center_idx
    return ndimage.affine_transform(
        volume,
        rot,
        offset=offset,
        order=1,
        mode="grid-constant",
        cval=0.0,
        prefilter=False,
        output=np.float64,
    )


def grid_distance(
    matrix_a: np.ndarray, matrix_b: np.ndarray, grid: np.ndarray
) -> float:
    """Mean Euclidean distance (mm) between the two transformed grids.

    This single implementation backs the initial-displacement statistic, the
    registration error metric, and the grid term reported by the training loss.
    """
    matrix_a = np.asarray(matrix_a, dtype=np.float64)
    matrix_b = np.asarray(matrix_b, dtype=np.float64)
    pts = np.asarray(grid, dtype=np.float64).reshape(-1, 3)
    delta_rot = matrix_a[:3, :3] - matrix_b[:3, :3]
    delta_off = matrix_a[:3, 3] - matrix_b[:3, 3]
    disp = pts @ delta_rot.T + delta_off
    return float(np.mean(np.linalg.norm(disp, axis=1)))


IDENTITY: np.ndarray = np.eye(4, dtype=np.float64)
