"""Axis-aligned volume grids: geometry, interpolation, resampling, normalization.

All volumes live on an axis-aligned grid described by a :class:`GridGeometry`.
World coordinates are in mm; the world position of voxel index ``(i, j, k)``
is ``origin + index * spacing``.  Voxel data is held as a 3D array indexed
``[x, y, z]``; the canonical flat layout (x fastest, then y, then z) is what
``flat()`` returns and what the file formats store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LABEL_CODES = (0, 1, 2, 3, 4)  # background, bladder, rectum, prostate-CTV, urethra


@dataclass(frozen=True)
class GridGeometry:
    """Dimensions (voxels), spacing (mm/voxel) and origin (mm) of a 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry fields must have length 3")
        if any(d < 2 for d in dims):
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacing must be finite and > 0, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def axis_coords_mm(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def index_grids(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable integer index arrays (ix, iy, iz) for the full grid."""
        nx, ny, nz = self.dims
        ix = np.arange(nx, dtype=np.float64).reshape(nx, 1, 1)
        iy = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
        iz = np.arange(nz, dtype=np.float64).reshape(1, 1, nz)
        return ix, iy, iz

    def world_grids(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable world-mm coordinate arrays for all voxel centers."""
        ix, iy, iz = self.index_grids()
        return (
            self.origin[0] + ix * self.spacing[0],
            self.origin[1] + iy * self.spacing[1],
            self.origin[2] + iz * self.spacing[2],
        )


def _as_grid_array(data, geometry: GridGeometry, dtype) -> np.ndarray:
    """Coerce 1D-canonical or 3D input to a read-only (nx,ny,nz) array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 1:
        if arr.size != geometry.n_voxels:
            raise ValueError(
                f"data length {arr.size} != voxel count {geometry.n_voxels}")
        arr = arr.reshape(geometry.dims, order="F")
    elif arr.ndim == 3:
        if arr.shape != geometry.dims:
            raise ValueError(f"data shape {arr.shape} != dims {geometry.dims}")
        arr = arr.copy()
    else:
        raise ValueError("data must be 1D (canonical order) or 3D")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued 3D grid (image intensity or dose), immutable."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = _as_grid_array(self.data, self.geometry, np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    def flat(self) -> np.ndarray:
        """Canonical linearization, x fastest."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid over {0:bg, 1:bladder, 2:rectum, 3:CTV, 4:urethra}."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = _as_grid_array(self.data, self.geometry, np.int64)
        bad = ~np.isin(arr, LABEL_CODES)
        if bad.any():
            raise ValueError(
                f"labels outside declared code set {LABEL_CODES}: "
                f"found {sorted(np.unique(arr[bad]).tolist())}")
        object.__setattr__(self, "data", arr)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")


# ---------------------------------------------------------------------------
# Interpolation kernels.  Shared by warping, resampling and the loss adjoints;
# the q arrays are continuous voxel indices on the source grid.
# ---------------------------------------------------------------------------

def _check_finite_q(qx, qy, qz):
    for q in (qx, qy, qz):
        if not np.all(np.isfinite(q)):
            raise ValueError("sample coordinates must be finite")


class _TrilinearStencil:
    """Clamped cell indices and corner weights for a batch of sample points.

    Computing the stencil once lets several co-sampled channels (image plus
    mask channels) reuse the same gather indices and weights.
    """

    def __init__(self, dims, qx, qy, qz):
        nx, ny, nz = dims
        qx, qy, qz = np.asarray(qx, float), np.asarray(qy, float), np.asarray(qz, float)
        _check_finite_q(qx, qy, qz)
        cx = np.clip(qx, 0.0, nx - 1.0)
        cy = np.clip(qy, 0.0, ny - 1.0)
        cz = np.clip(qz, 0.0, nz - 1.0)
        self.dims = tuple(dims)
        self.ix = np.minimum(np.floor(cx).astype(np.intp), nx - 2)
        self.iy = np.minimum(np.floor(cy).astype(np.intp), ny - 2)
        self.iz = np.minimum(np.floor(cz).astype(np.intp), nz - 2)
        self.fx = cx - self.ix
        self.fy = cy - self.iy
        self.fz = cz - self.iz
        # Saturated clamp => zero derivative w.r.t. the raw coordinate.
        self.inx = (qx >= 0.0) & (qx <= nx - 1.0)
        self.iny = (qy >= 0.0) & (qy <= ny - 1.0)
        self.inz = (qz >= 0.0) & (qz <= nz - 1.0)
        # Gathers go through flat C-order indices (fastest in numpy).
        self._sx = ny * nz
        self._sy = nz
        self._base = (self.ix * ny + self.iy) * nz + self.iz

    @staticmethod
    def _flat(data):
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        return data.reshape(-1)

    def corners(self, data):
        f = self._flat(data)
        b, sx, sy = self._base, self._sx, self._sy
        return (f[b], f[b + sx], f[b + sy], f[b + sx + sy],
                f[b + 1], f[b + sx + 1], f[b + sy + 1], f[b + sx + sy + 1])

    def value(self, data):
        v000, v100, v010, v110, v001, v101, v011, v111 = self.corners(data)
        fx, fy, fz = self.fx, self.fy, self.fz
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        return (v000 * gx * gy * gz + v100 * fx * gy * gz
                + v010 * gx * fy * gz + v110 * fx * fy * gz
                + v001 * gx * gy * fz + v101 * fx * gy * fz
                + v011 * gx * fy * fz + v111 * fx * fy * fz)

    def value_and_grad(self, data):
        """Interpolated value and d(value)/d(q) per axis (voxel-index units).

        The interpolant is only piecewise smooth: exactly on a cell face the
        two adjacent cells disagree, and exactly on the domain edge the
        clamp flattens one side.  There the returned derivative is the
        average of the two one-sided slopes (flat clamp counting as zero),
        which is the limit of a central finite difference of the sampled
        value, and the convention every gradient check in this package uses.
        """
        v000, v100, v010, v110, v001, v101, v011, v111 = self.corners(data)
        fx, fy, fz = self.fx, self.fy, self.fz
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        val = (v000 * gx * gy * gz + v100 * fx * gy * gz
               + v010 * gx * fy * gz + v110 * fx * fy * gz
               + v001 * gx * gy * fz + v101 * fx * gy * fz
               + v011 * gx * fy * fz + v111 * fx * fy * fz)
        dx = ((v100 - v000) * gy * gz + (v110 - v010) * fy * gz
              + (v101 - v001) * gy * fz + (v111 - v011) * fy * fz)
        dy = ((v010 - v000) * gx * gz + (v110 - v100) * fx * gz
              + (v011 - v001) * gx * fz + (v111 - v101) * fx * fz)
        dz = ((v001 - v000) * gx * gy + (v101 - v100) * fx * gy
              + (v011 - v010) * gx * fy + (v111 - v110) * fx * fy)

        f = self._flat(data)
        b, sx, sy = self._base, self._sx, self._sy
        ix, iy, iz = self.ix, self.iy, self.iz
        if np.any(fx == 0.0) or np.any(fx == 1.0):
            pb = b - np.where(ix > 0, sx, 0)
            prev = ((v000 - f[pb]) * gy * gz + (v010 - f[pb + sy]) * fy * gz
                    + (v001 - f[pb + 1]) * gy * fz
                    + (v011 - f[pb + sy + 1]) * fy * fz)
            other = np.where((fx == 0.0) & (ix > 0), prev, 0.0)
            dx = np.where((fx == 0.0) | (fx == 1.0), 0.5 * (dx + other), dx)
        if np.any(fy == 0.0) or np.any(fy == 1.0):
            pb = b - np.where(iy > 0, sy, 0)
            prev = ((v000 - f[pb]) * gx * gz + (v100 - f[pb + sx]) * fx * gz
                    + (v001 - f[pb + 1]) * gx * fz
                    + (v101 - f[pb + sx + 1]) * fx * fz)
            other = np.where((fy == 0.0) & (iy > 0), prev, 0.0)
            dy = np.where((fy == 0.0) | (fy == 1.0), 0.5 * (dy + other), dy)
        if np.any(fz == 0.0) or np.any(fz == 1.0):
            pb = b - np.where(iz > 0, 1, 0)
            prev = ((v000 - f[pb]) * gx * gy + (v100 - f[pb + sx]) * fx * gy
                    + (v010 - f[pb + sy]) * gx * fy
                    + (v110 - f[pb + sx + sy]) * fx * fy)
            other = np.where((fz == 0.0) & (iz > 0), prev, 0.0)
            dz = np.where((fz == 0.0) | (fz == 1.0), 0.5 * (dz + other), dz)
        return val, dx * self.inx, dy * self.iny, dz * self.inz


def gather_trilinear(data: np.ndarray, qx, qy, qz) -> np.ndarray:
    """Trilinear interpolation of a 3D array at continuous voxel indices.

    Out-of-range coordinates are clamped to the boundary (edge extension).
    Exact at integer coordinates.
    """
    return _TrilinearStencil(data.shape, qx, qy, qz).value(data)


def gather_nearest(data: np.ndarray, qx, qy, qz) -> np.ndarray:
    """Nearest-neighbor lookup; exact .5 ties go to the lower index."""
    _check_finite_q(np.asarray(qx, float), np.asarray(qy, float), np.asarray(qz, float))
    out_idx = []
    for q, n in zip((qx, qy, qz), data.shape):
        i = np.ceil(np.asarray(q, float) - 0.5).astype(np.intp)
        out_idx.append(np.clip(i, 0, n - 1))
    return data[tuple(out_idx)]


def sample_trilinear(vol: ScalarVolume, q) -> float:
    """Sample one point at continuous voxel index q = (qx, qy, qz)."""
    qx, qy, qz = (float(c) for c in q)
    return float(gather_trilinear(vol.data, qx, qy, qz))


def sample_nearest(vol: LabelVolume, q) -> int:
    """Nearest-neighbor label at continuous voxel index q."""
    qx, qy, qz = (float(c) for c in q)
    return int(gather_nearest(vol.data, qx, qy, qz))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _source_index_grids(source: GridGeometry, target: GridGeometry):
    """Continuous source-index coordinates of every target voxel center.

    Formulated as index*scale + offset so that identical geometries map each
    index to itself exactly (scale == 1.0, offset == 0.0 in floating point).
    """
    coords = []
    ix, iy, iz = target.index_grids()
    for axis, idx in enumerate((ix, iy, iz)):
        scale = target.spacing[axis] / source.spacing[axis]
        offset = (target.origin[axis] - source.origin[axis]) / source.spacing[axis]
        coords.append(idx * scale + offset)
    return tuple(coords)


def resample(vol, target: GridGeometry):
    """Resample a volume onto a new grid via world-space correspondence.

    Trilinear for ScalarVolume, nearest for LabelVolume.  Resampling onto the
    identical geometry returns the input unchanged (volumes are immutable).
    """
    if vol.geometry == target:
        return vol
    qx, qy, qz = _source_index_grids(vol.geometry, target)
    qx, qy, qz = np.broadcast_arrays(qx, qy, qz)
    if isinstance(vol, LabelVolume):
        return LabelVolume(target, gather_nearest(vol.data, qx, qy, qz))
    if isinstance(vol, ScalarVolume):
        return ScalarVolume(target, gather_trilinear(vol.data, qx, qy, qz))
    raise ValueError(f"cannot resample object of type {type(vol).__name__}")


# ---------------------------------------------------------------------------
# Intensity normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizeResult:
    """Normalized volume plus the clip window; degenerate marks a flat input."""

    volume: ScalarVolume
    low_value: float
    high_value: float
    degenerate: bool


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: value at rank ceil(pct/100 * n), 1-based."""
    if not 0.0 <= pct <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {pct}")
    v = np.sort(np.asarray(values, float), axis=None)
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def normalize_percentile(vol: ScalarVolume, lo_pct: float = 10.0,
                         hi_pct: float = 90.0) -> NormalizeResult:
    """Clip to [lo, hi] percentile window and rescale to [0, 1].

    Percentiles use the nearest-rank estimator over all voxels.  A degenerate
    window (flat volume) yields all zeros with the degenerate flag set rather
    than an error, so batch pipelines survive blank inputs.
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ValueError(f"need 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})")
    v = np.sort(vol.data, axis=None)
    lo_rank = max(1, math.ceil(lo_pct / 100.0 * v.size))
    hi_rank = max(1, math.ceil(hi_pct / 100.0 * v.size))
    a = float(v[lo_rank - 1])
    b = float(v[hi_rank - 1])
    if a == b:
        zeros = ScalarVolume(vol.geometry, np.zeros(vol.geometry.dims))
        return NormalizeResult(zeros, a, b, True)
    out = (np.clip(vol.data, a, b) - a) / (b - a)
    return NormalizeResult(ScalarVolume(vol.geometry, out), a, b, False)
