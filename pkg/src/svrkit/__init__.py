"""svrkit: slice-to-volume rigid registration with attention-weighted slices.

Numpy-facing modules (``geometry``, ``dataio``, ``acquisition``) import fast
and carry the synthesis/evaluation math; ``network``, ``training``, and
``evaluation`` pull in torch and are imported on demand::

    from svrkit import geometry, acquisition
    from svrkit import network, training, evaluation
"""

from svrkit.geometry import (
    RigidParams,
    VolumeGeometry,
    compose_affine,
    euler_to_rotation,
    grid_distance,
    invert,
    make_grid,
    resample,
    transform_grid,
)

__version__ = "0.1.0"

__all__ = [
    "RigidParams",
    "VolumeGeometry",
    "compose_affine",
    "euler_to_rotation",
    "grid_distance",
    "invert",
    "make_grid",
    "resample",
    "transform_grid",
    "__version__",
]
