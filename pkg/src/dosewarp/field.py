"""Dense displacement fields: warping, composition, Jacobian analysis.

A :class:`DisplacementField` lives on a reference grid and stores one mm
3-vector per voxel in the pull-back convention: the vector at reference
point x points to the location in the moving image that is resampled onto
x.  ``warp_image(moving, field)`` therefore reproduces the moving image on
the reference grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    GridGeometry,
    LabelVolume,
    ScalarVolume,
    _TrilinearStencil,
    _source_index_grids,
    gather_nearest,
    gather_trilinear,
)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement u (mm) on a reference grid; phi = id + u."""

    geometry: GridGeometry
    vectors: np.ndarray  # shape (nx, ny, nz, 3)

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        expected = self.geometry.dims + (3,)
        if arr.ndim == 2 and arr.shape == (self.geometry.n_voxels, 3):
            arr = arr.reshape(self.geometry.dims + (3,), order="F")
        if arr.shape != expected:
            raise ValueError(f"vectors shape {arr.shape} != {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @property
    def is_zero(self) -> bool:
        return not self.vectors.any()


def zero_field(geometry: GridGeometry) -> DisplacementField:
    return DisplacementField(geometry, np.zeros(geometry.dims + (3,)))


def uniform_field(geometry: GridGeometry, t_mm) -> DisplacementField:
    """Constant translation field, t in mm."""
    u = np.empty(geometry.dims + (3,))
    u[..., 0], u[..., 1], u[..., 2] = t_mm
    return DisplacementField(geometry, u)


def sample_coords(field: DisplacementField, source: GridGeometry):
    """Continuous source-grid indices hit by each reference voxel's pull-back.

    q_axis = i*scale + offset + u_axis/spacing, arranged so a zero field on
    co-located grids maps every index to itself exactly in floating point.
    """
    base = _source_index_grids(source, field.geometry)
    return tuple(
        base[a] + field.vectors[..., a] / source.spacing[a] for a in range(3)
    )


def warp_image(moving: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Resample the moving image through the field onto the field's grid."""
    qx, qy, qz = sample_coords(field, moving.geometry)
    return ScalarVolume(field.geometry, gather_trilinear(moving.data, qx, qy, qz))


def warp_labels(moving: LabelVolume, field: DisplacementField) -> LabelVolume:
    """As warp_image with nearest-neighbor sampling (labels stay discrete)."""
    qx, qy, qz = sample_coords(field, moving.geometry)
    return LabelVolume(field.geometry, gather_nearest(moving.data, qx, qy, qz))


def warp_channels(channels, source: GridGeometry, field: DisplacementField):
    """Trilinear-warp several co-located scalar channels through one stencil."""
    qx, qy, qz = sample_coords(field, source)
    stencil = _TrilinearStencil(source.dims, qx, qy, qz)
    return [stencil.value(np.asarray(c, float)) for c in channels]


def compose(total: DisplacementField, increment: DisplacementField) -> DisplacementField:
    """Field whose warp equals warping by ``total`` then by ``increment``.

    u'(p) = u_inc(p) + u_total sampled at p + u_inc(p)/spacing.  Composing
    with a zero increment returns ``total`` bit-exactly.
    """
    if total.geometry != increment.geometry:
        raise ValueError("compose requires both fields on the same geometry")
    geom = total.geometry
    ix, iy, iz = geom.index_grids()
    qx = ix + increment.vectors[..., 0] / geom.spacing[0]
    qy = iy + increment.vectors[..., 1] / geom.spacing[1]
    qz = iz + increment.vectors[..., 2] / geom.spacing[2]
    qx, qy, qz = np.broadcast_arrays(qx, qy, qz)
    stencil = _TrilinearStencil(geom.dims, qx, qy, qz)
    out = np.empty(geom.dims + (3,))
    for a in range(3):
        out[..., a] = increment.vectors[..., a] + stencil.value(total.vectors[..., a])
    return DisplacementField(geom, out)


def jacobian_determinant(field: DisplacementField) -> ScalarVolume:
    """det(I + grad u) per voxel, dimensionless.

    Derivatives are taken in mm (index scaled by spacing): central differences
    in the interior, first-order one-sided at the boundary.  Identity field
    gives 1.0 everywhere; values below 0 indicate folding.
    """
    geom = field.geometry
    sp = geom.spacing
    J = np.empty(geom.dims + (3, 3))
    for a in range(3):
        dx, dy, dz = np.gradient(field.vectors[..., a], sp[0], sp[1], sp[2],
                                 edge_order=1)
        J[..., a, 0], J[..., a, 1], J[..., a, 2] = dx, dy, dz
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    det = (J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
           - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
           + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0]))
    return ScalarVolume(geom, det)


def displacement_magnitude(field: DisplacementField) -> ScalarVolume:
    """Per-voxel Euclidean norm of u, in mm."""
    return ScalarVolume(field.geometry,
                        np.sqrt(np.sum(field.vectors ** 2, axis=-1)))


def resample_field(field: DisplacementField, target: GridGeometry) -> DisplacementField:
    """Resample the field onto another grid (trilinear per component).

    Vectors are stored in mm, so values carry over unscaled; the target
    geometry supplies the new voxel size.
    """
    if field.geometry == target:
        return field
    qx, qy, qz = _source_index_grids(field.geometry, target)
    qx, qy, qz = np.broadcast_arrays(qx, qy, qz)
    stencil = _TrilinearStencil(field.geometry.dims, qx, qy, qz)
    out = np.empty(target.dims + (3,))
    for a in range(3):
        out[..., a] = stencil.value(field.vectors[..., a])
    return DisplacementField(target, out)
