"""Synthetic pelvic phantoms with known deformations, doses and noise.

Anatomy is analytic (ellipsoids, spheres, z-axis tubes) so images, labels
and doses can be evaluated exactly at arbitrary world points: a deformed
acquisition is the analytic phantom composed with a displacement field,
never an interpolated copy.  That makes every generated pair carry an exact
ground-truth field.

Randomness comes from a counter-based splitmix64 generator so results are
implementation-defined rather than library-defined.  Value ``i`` of stream
``(seed, tag)`` is ``mix(key + (i+1) * G)`` with G = 0x9E3779B97F4A7C15,
``key = mix(mix(seed) ^ mix(tag ^ 0xA3EC4E1D)),`` and

    mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
            z ^= z >> 27; z *= 0x94D049BB133111EB;
            z ^= z >> 31        (all mod 2^64)

Uniform doubles are ``(v >> 11) * 2^-53``; normals use Box-Muller pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .dose import FractionRecord
from .field import (
    DisplacementField,
    gather_trilinear,
    jacobian_determinant,
    zero_field,
)
from .grid import GridGeometry, LabelVolume, ScalarVolume


class RetryBoundExceeded(RuntimeError):
    """Deformation generation kept violating its validity bounds."""


# ---------------------------------------------------------------------------
# Counter-based PRNG (splitmix64 core)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_TAG_SALT = np.uint64(0xA3EC4E1D)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * np.uint64(0xBF58476D1CE4E5B9)
        z = z ^ (z >> np.uint64(27))
        z = z * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, tag: int) -> np.uint64:
    s = _mix64(np.uint64(np.int64(seed).astype(np.uint64)))
    t = _mix64(np.uint64(tag) ^ _TAG_SALT)
    return _mix64(s ^ t)


def stream_uniform(seed: int, tag: int, n: int, offset: int = 0) -> np.ndarray:
    """n uniforms in [0, 1) from stream (seed, tag) starting at ``offset``."""
    key = _stream_key(seed, tag)
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        vals = _mix64(key + counters * _GOLDEN)
    return (vals >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def stream_normal(seed: int, tag: int, n: int) -> np.ndarray:
    """n standard normals via Box-Muller on consecutive uniform pairs."""
    m = (n + 1) // 2
    u = stream_uniform(seed, tag, 2 * m)
    u1 = u[:m] + 2.0 ** -53  # keep log() away from 0
    u2 = u[m:]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                          r * np.sin(2.0 * np.pi * u2)])
    return out[:n]


# Stream tags.
_T_BIAS, _T_NOISE, _T_BUMPS, _T_AFFINE = 1, 2, 3, 4


# ---------------------------------------------------------------------------
# Phantom anatomy
# ---------------------------------------------------------------------------

DEFAULT_INTENSITIES = {
    "air": 0.0, "body": 0.35, "bladder": 0.85,
    "rectum": 0.55, "ctv": 0.70, "urethra": 0.30,
}


@dataclass(frozen=True)
class PhantomSpec:
    """Analytic pelvic phantom: body ellipsoid enclosing bladder (ellipsoid),
    rectum (z tube), prostate CTV (sphere) and urethra (thin z tube inside
    the CTV).  Offsets are mm relative to the grid center."""

    geometry: GridGeometry
    body_semiaxes_mm: tuple
    bladder_center_mm: tuple
    bladder_semiaxes_mm: tuple
    rectum_center_mm: tuple
    rectum_radius_mm: float
    rectum_length_mm: float
    ctv_center_mm: tuple
    ctv_radius_mm: float
    urethra_radius_mm: float
    urethra_length_mm: float
    intensities: dict = dc_field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.10
    seed: int = 0

    @classmethod
    def default(cls, geometry: GridGeometry | None = None, seed: int = 0,
                **overrides) -> "PhantomSpec":
        """Spec with structure placement proportional to the field of view."""
        if geometry is None:
            geometry = GridGeometry((48, 48, 32), (2.0, 2.0, 2.0))
        half = [(geometry.dims[a] - 1) * geometry.spacing[a] / 2.0
                for a in range(3)]
        ctv_r = 0.36 * min(half)
        ure_r = 0.25 * ctv_r
        base = dict(
            geometry=geometry,
            body_semiaxes_mm=(0.94 * half[0], 0.94 * half[1], 0.97 * half[2]),
            bladder_center_mm=(0.0, 0.42 * half[1], 0.14 * half[2]),
            bladder_semiaxes_mm=(0.34 * half[0], 0.27 * half[1], 0.34 * half[2]),
            rectum_center_mm=(0.0, -0.56 * half[1], 0.0),
            rectum_radius_mm=0.16 * min(half[0], half[1]),
            rectum_length_mm=1.5 * half[2],
            ctv_center_mm=(0.0, -0.13 * half[1], -0.06 * half[2]),
            ctv_radius_mm=ctv_r,
            urethra_radius_mm=ure_r,
            urethra_length_mm=1.8 * math.sqrt(max(ctv_r ** 2 - ure_r ** 2, 0.0)) * 0.9,
            seed=seed,
        )
        base.update(overrides)
        return cls(**base)

    def center_mm(self) -> np.ndarray:
        g = self.geometry
        return np.array([g.origin[a] + (g.dims[a] - 1) * g.spacing[a] / 2.0
                         for a in range(3)])


def _world_grids(geometry: GridGeometry):
    return geometry.world_grids()


def _inside_ellipsoid(X, Y, Z, center, semiaxes):
    return ((X - center[0]) / semiaxes[0]) ** 2 \
        + ((Y - center[1]) / semiaxes[1]) ** 2 \
        + ((Z - center[2]) / semiaxes[2]) ** 2 <= 1.0


def _inside_ztube(X, Y, Z, center, radius, length):
    radial = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius ** 2
    return radial & (np.abs(Z - center[2]) <= length / 2.0)


def labels_at(spec: PhantomSpec, X, Y, Z) -> np.ndarray:
    """Analytic label lookup at world-mm points (arrays broadcast)."""
    c = spec.center_mm()
    X, Y, Z = np.broadcast_arrays(X, Y, Z)
    out = np.zeros(X.shape, dtype=np.int64)
    bladder = _inside_ellipsoid(X, Y, Z, c + spec.bladder_center_mm,
                                spec.bladder_semiaxes_mm)
    rectum = _inside_ztube(X, Y, Z, c + spec.rectum_center_mm,
                           spec.rectum_radius_mm, spec.rectum_length_mm)
    ctv = _inside_ellipsoid(X, Y, Z, c + spec.ctv_center_mm,
                            (spec.ctv_radius_mm,) * 3)
    urethra = _inside_ztube(X, Y, Z, c + spec.ctv_center_mm,
                            spec.urethra_radius_mm, spec.urethra_length_mm) & ctv
    out[bladder] = 1
    out[rectum] = 2
    out[ctv] = 3
    out[urethra] = 4
    return out


def body_at(spec: PhantomSpec, X, Y, Z) -> np.ndarray:
    c = spec.center_mm()
    return _inside_ellipsoid(X, Y, Z, c, spec.body_semiaxes_mm)


def _bias_at(spec: PhantomSpec, X, Y, Z) -> np.ndarray:
    """Smooth multiplicative bias: three low-frequency cosine modes."""
    if spec.bias_amplitude == 0.0:
        return np.zeros(np.broadcast(X, Y, Z).shape)
    u = stream_uniform(spec.seed, _T_BIAS, 9)
    g = spec.geometry
    fov = [g.dims[a] * g.spacing[a] for a in range(3)]
    out = np.zeros(np.broadcast(X, Y, Z).shape)
    for j, W in enumerate((X, Y, Z)):
        freq = (0.5 + u[3 * j]) * 2.0 * np.pi / fov[j]
        phase = u[3 * j + 1] * 2.0 * np.pi
        out = out + (u[3 * j + 2] + 0.5) * np.cos(freq * (W - g.origin[j]) + phase)
    out /= 4.5  # modes sum inside [-1, 1]
    return spec.bias_amplitude * out


def image_at(spec: PhantomSpec, X, Y, Z) -> np.ndarray:
    """Noise-free analytic intensity (structure value times bias) at points."""
    labels = labels_at(spec, X, Y, Z)
    inten = spec.intensities
    base = np.where(body_at(spec, X, Y, Z), inten["body"], inten["air"])
    for name, code in (("bladder", 1), ("rectum", 2), ("ctv", 3), ("urethra", 4)):
        base = np.where(labels == code, inten[name], base)
    return base * (1.0 + _bias_at(spec, X, Y, Z))


def _grid_noise(spec: PhantomSpec, tag: int) -> np.ndarray:
    if spec.noise_sigma == 0.0:
        return np.zeros(spec.geometry.dims)
    flat = stream_normal(spec.seed, tag, spec.geometry.n_voxels)
    return spec.noise_sigma * flat.reshape(spec.geometry.dims, order="F")


def _validate_spec(spec: PhantomSpec):
    g = spec.geometry
    c = spec.center_mm()
    lo = np.array(g.origin)
    hi = lo + (np.array(g.dims) - 1) * np.array(g.spacing)

    def check_box(name, mins, maxs):
        if np.any(np.array(mins) < lo) or np.any(np.array(maxs) > hi):
            raise ValueError(f"{name} extends outside the grid")

    b = c + spec.bladder_center_mm
    check_box("bladder", b - spec.bladder_semiaxes_mm, b + spec.bladder_semiaxes_mm)
    r = c + spec.rectum_center_mm
    rext = np.array([spec.rectum_radius_mm, spec.rectum_radius_mm,
                     spec.rectum_length_mm / 2.0])
    check_box("rectum", r - rext, r + rext)
    p = c + spec.ctv_center_mm
    check_box("ctv", p - spec.ctv_radius_mm, p + spec.ctv_radius_mm)
    check_box("body", c - spec.body_semiaxes_mm, c + spec.body_semiaxes_mm)

    # Pairwise disjointness on the voxel grid (urethra nests in the CTV by
    # construction since it is carved out of it).
    X, Y, Z = _world_grids(g)
    bladder = _inside_ellipsoid(X, Y, Z, b, spec.bladder_semiaxes_mm)
    rectum = _inside_ztube(X, Y, Z, r, spec.rectum_radius_mm, spec.rectum_length_mm)
    ctv = _inside_ellipsoid(X, Y, Z, p, (spec.ctv_radius_mm,) * 3)
    for name_a, a, name_b, bb in (("bladder", bladder, "rectum", rectum),
                                  ("bladder", bladder, "ctv", ctv),
                                  ("rectum", rectum, "ctv", ctv)):
        if np.any(a & bb):
            raise ValueError(f"{name_a} and {name_b} overlap; adjust the spec")


def make_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Reference image and labels on the spec's grid, deterministic by seed."""
    _validate_spec(spec)
    X, Y, Z = _world_grids(spec.geometry)
    image = image_at(spec, X, Y, Z) + _grid_noise(spec, _T_NOISE)
    labels = labels_at(spec, X, Y, Z)
    return (ScalarVolume(spec.geometry, image),
            LabelVolume(spec.geometry, labels))


def body_mask(spec: PhantomSpec) -> np.ndarray:
    """Boolean body mask on the spec's grid (analytic body ellipsoid)."""
    X, Y, Z = _world_grids(spec.geometry)
    return body_at(spec, X, Y, Z)


# ---------------------------------------------------------------------------
# Ground-truth deformations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeformSpec:
    """Smooth random field: Gaussian displacement bumps plus a bounded
    linear (affine) component about the grid center.

    Regenerates with an incremented sub-seed until the field keeps
    min Jacobian > ``min_jacobian`` and (for randomized specs) a peak
    magnitude inside [min_peak_mm, max_peak_mm].
    """

    n_bumps: int = 3
    bump_amplitude_mm: float = 6.0
    bump_sigma_mm: float = 18.0
    affine_bound: float = 0.02
    affine_diag: tuple | None = None  # explicit diagonal overrides the draw
    min_peak_mm: float = 2.0
    max_peak_mm: float = 10.0
    min_jacobian: float = 0.1
    max_retries: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.n_bumps < 0 or self.bump_amplitude_mm < 0 or self.bump_sigma_mm <= 0:
            raise ValueError("invalid bump parameters")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


def _draw_field(spec: DeformSpec, geometry: GridGeometry, attempt: int) -> np.ndarray:
    g = geometry
    X, Y, Z = _world_grids(g)
    center = np.array([g.origin[a] + (g.dims[a] - 1) * g.spacing[a] / 2.0
                       for a in range(3)])
    fov = np.array([g.dims[a] * g.spacing[a] for a in range(3)])
    u = np.zeros(g.dims + (3,))

    if spec.n_bumps > 0:
        draws = stream_uniform(spec.seed, _T_BUMPS + 101 * attempt,
                               8 * spec.n_bumps)
        for b in range(spec.n_bumps):
            d = draws[8 * b:8 * b + 8]
            cb = center + (d[0:3] - 0.5) * 0.6 * fov
            sigma = spec.bump_sigma_mm * (0.8 + 0.4 * d[3])
            amp = spec.bump_amplitude_mm * (0.5 + 0.5 * d[4])
            theta = math.acos(2.0 * d[5] - 1.0)
            phi = 2.0 * math.pi * d[6]
            direction = np.array([math.sin(theta) * math.cos(phi),
                                  math.sin(theta) * math.sin(phi),
                                  math.cos(theta)])
            r2 = (X - cb[0]) ** 2 + (Y - cb[1]) ** 2 + (Z - cb[2]) ** 2
            bump = amp * np.exp(-r2 / (2.0 * sigma ** 2))
            for a in range(3):
                u[..., a] += direction[a] * bump

    if spec.affine_diag is not None:
        A = np.diag(spec.affine_diag)
    elif spec.affine_bound > 0:
        entries = stream_uniform(spec.seed, _T_AFFINE + 101 * attempt, 9)
        A = (2.0 * entries.reshape(3, 3) - 1.0) * spec.affine_bound
    else:
        A = None
    if A is not None:
        dx, dy, dz = X - center[0], Y - center[1], Z - center[2]
        for a in range(3):
            u[..., a] += A[a, 0] * dx + A[a, 1] * dy + A[a, 2] * dz
    return u


def make_deformation(spec: DeformSpec, geometry: GridGeometry) -> DisplacementField:
    """Smooth invertibility-checked field, deterministic given the seed."""
    if spec.n_bumps == 0 and spec.affine_bound == 0 and spec.affine_diag is None:
        return zero_field(geometry)
    randomized = spec.n_bumps > 0
    for attempt in range(spec.max_retries):
        u = _draw_field(spec, geometry, attempt)
        field = DisplacementField(geometry, u)
        if float(jacobian_determinant(field).data.min()) <= spec.min_jacobian:
            continue
        if randomized:
            peak = float(np.sqrt((u ** 2).sum(axis=-1)).max())
            if not spec.min_peak_mm <= peak <= spec.max_peak_mm:
                continue
        return field
    raise RetryBoundExceeded(
        f"no valid field after {spec.max_retries} attempts; "
        "reduce bump_amplitude_mm or affine_bound")


def invert_displacement(field: DisplacementField, iterations: int = 30) -> DisplacementField:
    """Fixed-point inverse w(p) = -u(p + w(p)); used to synthesize images
    consistent with a prescribed reference-to-fraction field."""
    g = field.geometry
    ix, iy, iz = g.index_grids()
    w = -field.vectors.copy()
    for _ in range(iterations):
        qx = ix + w[..., 0] / g.spacing[0]
        qy = iy + w[..., 1] / g.spacing[1]
        qz = iz + w[..., 2] / g.spacing[2]
        qx, qy, qz = np.broadcast_arrays(qx, qy, qz)
        w = -np.stack([gather_trilinear(field.vectors[..., a], qx, qy, qz)
                       for a in range(3)], axis=-1)
    return DisplacementField(g, w)


# ---------------------------------------------------------------------------
# Registration pairs and treatment courses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationPair:
    """Moving/fixed pair with the exact field: warp(moving, true_field)
    reproduces the fixed image up to noise and interpolation."""

    moving_image: ScalarVolume
    moving_labels: LabelVolume
    fixed_image: ScalarVolume
    fixed_labels: LabelVolume
    true_field: DisplacementField


def deform_pair(spec: PhantomSpec, field: DisplacementField,
                noise_tag: int = 1) -> RegistrationPair:
    """Build the pair for a prescribed field on the phantom's grid.

    The fixed image is the analytic phantom evaluated at the displaced
    points (exact composition), with an independent noise realization.
    """
    if field.geometry != spec.geometry:
        raise ValueError("field must live on the phantom geometry")
    _validate_spec(spec)
    moving_image, moving_labels = make_phantom(spec)
    X, Y, Z = _world_grids(spec.geometry)
    Xd = X + field.vectors[..., 0]
    Yd = Y + field.vectors[..., 1]
    Zd = Z + field.vectors[..., 2]
    fixed = image_at(spec, Xd, Yd, Zd) + _grid_noise(
        replace(spec, seed=spec.seed + 7919 * noise_tag), _T_NOISE)
    fixed_labels = labels_at(spec, Xd, Yd, Zd)
    return RegistrationPair(
        moving_image, moving_labels,
        ScalarVolume(spec.geometry, fixed),
        LabelVolume(spec.geometry, fixed_labels),
        field,
    )


def make_registration_pair(spec: PhantomSpec, deform: DeformSpec) -> RegistrationPair:
    return deform_pair(spec, make_deformation(deform, spec.geometry))


def dose_profile(r_mm: np.ndarray, dose_gy: float, plateau_radius_mm: float,
                 falloff_sigma_mm: float) -> np.ndarray:
    """Uniform plateau with Gaussian tail beyond the plateau radius."""
    r = np.asarray(r_mm, float)
    tail = np.exp(-np.maximum(r - plateau_radius_mm, 0.0) ** 2
                  / (2.0 * falloff_sigma_mm ** 2))
    return dose_gy * tail


@dataclass(frozen=True)
class Course:
    """Fractionated course on one phantom: per-fraction images, labels,
    doses and exact reference-to-fraction fields (fraction 1 = reference)."""

    spec: PhantomSpec
    reference_image: ScalarVolume
    reference_labels: LabelVolume
    records: list  # FractionRecord per fraction
    fraction_images: list
    fraction_labels: list
    fraction_dose_gy: float
    plateau_radius_mm: float
    falloff_sigma_mm: float

    @property
    def planned_ctv_dose_gy(self) -> float:
        """Analytic plan value: every CTV tissue point sits inside each
        fraction's plateau, so the course total is n * fraction dose."""
        return self.fraction_dose_gy * len(self.records)


def make_course(spec: PhantomSpec, n_fractions: int,
                fraction_dose_gy: float = 8.0,
                deform: DeformSpec | None = None,
                plateau_margin_mm: float = 10.0,
                falloff_sigma_mm: float = 8.0) -> Course:
    """Reference phantom plus n-1 deformed fractions with daily plans.

    Each fraction's dose is an analytic plateau centered on that day's CTV
    position (daily adaptation), so accumulating with the exact fields gives
    the CTV the full planned dose.
    """
    if n_fractions < 1:
        raise ValueError("n_fractions must be >= 1")
    if fraction_dose_gy < 0:
        raise ValueError("fraction dose must be >= 0")
    if deform is None:
        deform = DeformSpec(seed=spec.seed)
    reference_image, reference_labels = make_phantom(spec)
    geom = spec.geometry
    X, Y, Z = _world_grids(geom)
    ctv_center = spec.center_mm() + spec.ctv_center_mm
    plateau_r = spec.ctv_radius_mm + plateau_margin_mm

    records, images, labels = [], [], []
    for i in range(1, n_fractions + 1):
        if i == 1:
            field = zero_field(geom)
            img, lab = reference_image, reference_labels
        else:
            field = make_deformation(replace(deform, seed=deform.seed + 1009 * i),
                                     geom)
            inv = invert_displacement(field)
            Xi = X + inv.vectors[..., 0]
            Yi = Y + inv.vectors[..., 1]
            Zi = Z + inv.vectors[..., 2]
            img_data = image_at(spec, Xi, Yi, Zi) + _grid_noise(
                replace(spec, seed=spec.seed + 101 * i), _T_NOISE)
            img = ScalarVolume(geom, img_data)
            lab = LabelVolume(geom, labels_at(spec, Xi, Yi, Zi))
        # Daily CTV position: the reference center carried by this field.
        cidx = [(ctv_center[a] - geom.origin[a]) / geom.spacing[a] for a in range(3)]
        shift = [float(gather_trilinear(field.vectors[..., a], *cidx))
                 for a in range(3)]
        daily_center = ctv_center + np.array(shift)
        r = np.sqrt((X - daily_center[0]) ** 2 + (Y - daily_center[1]) ** 2
                    + (Z - daily_center[2]) ** 2)
        dose = ScalarVolume(geom, dose_profile(r, fraction_dose_gy, plateau_r,
                                               falloff_sigma_mm))
        records.append(FractionRecord(i, dose, field))
        images.append(img)
        labels.append(lab)
    return Course(spec, reference_image, reference_labels, records, images,
                  labels, fraction_dose_gy, plateau_r, falloff_sigma_mm)
