"""Composite registration objective: patch MSE + smoothness + mask consistency.

The per-step objective evaluated during progressive registration is

    total = similarity + lambda_smooth * smooth + lambda_cons * consistency

where similarity is the mean over non-overlapping patches of the per-patch
mean squared intensity difference, smooth is the summed squared forward
gradient of the displacement field, and consistency is a weighted soft-Dice
overlap penalty on the warped structure masks (bladder weighted highest).
The deep-supervision form sums the consistency term over refinement steps.

``grad_total`` is the analytic adjoint of the single-step objective with
respect to the incremental field, with earlier steps frozen; it is what the
gradient-descent solver consumes and what the finite-difference tests check.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import DisplacementField, sample_coords, warp_image
from .grid import GridGeometry, LabelVolume, ScalarVolume, _TrilinearStencil

STRUCTURE_LABELS = {"bladder": 1, "rectum": 2, "ctv": 3, "urethra": 4}
LOSS_STRUCTURES = ("bladder", "rectum", "ctv")  # urethra is reported, never optimized
DEFAULT_STRUCTURE_WEIGHTS = {"bladder": 0.40, "rectum": 0.30, "ctv": 0.30}
DSC_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; defaults follow the tuned operating point."""

    lambda_smooth: float = 30.0
    lambda_cons: float = 5.0
    structure_weights: dict = dc_field(
        default_factory=lambda: dict(DEFAULT_STRUCTURE_WEIGHTS))
    patch: tuple[int, int, int] = (8, 8, 8)

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_cons < 0:
            raise ValueError("lambda weights must be >= 0")
        w = {k: float(v) for k, v in self.structure_weights.items()}
        if set(w) != set(LOSS_STRUCTURES):
            raise ValueError(f"structure_weights must cover {LOSS_STRUCTURES}")
        if any(v < 0 for v in w.values()):
            raise ValueError("structure weights must be >= 0")
        if abs(sum(w.values()) - 1.0) > 1e-12:
            raise ValueError(f"structure weights must sum to 1, got {sum(w.values())}")
        patch = tuple(int(p) for p in self.patch)
        if len(patch) != 3 or any(p < 1 for p in patch):
            raise ValueError(f"patch dims must be 3 positive ints, got {patch}")
        object.__setattr__(self, "structure_weights", w)
        object.__setattr__(self, "patch", patch)


@dataclass(frozen=True)
class SoftMask:
    """Per-structure occupancy channels in [0, 1] on a shared grid."""

    geometry: GridGeometry
    channels: dict  # structure name -> float array of shape geometry.dims

    def __post_init__(self):
        ch = {}
        for name, arr in self.channels.items():
            a = np.asarray(arr, float)
            if a.shape != self.geometry.dims:
                raise ValueError(f"channel '{name}' shape {a.shape} != grid dims")
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"channel '{name}' values outside [0, 1]")
            a = a.copy()
            a.setflags(write=False)
            ch[name] = a
        object.__setattr__(self, "channels", ch)

    def channel(self, name: str) -> np.ndarray:
        if name not in self.channels:
            raise ValueError(f"missing structure channel '{name}'")
        return self.channels[name]

    @classmethod
    def from_labels(cls, labels: LabelVolume, structures=LOSS_STRUCTURES,
                    sigma: float = 0.0) -> "SoftMask":
        """One-hot encode label codes, optionally Gaussian-blurred (voxels)."""
        ch = {}
        for name in structures:
            ind = (labels.data == STRUCTURE_LABELS[name]).astype(float)
            if sigma > 0:
                ind = np.clip(gaussian_filter(ind, sigma=sigma, mode="nearest"),
                              0.0, 1.0)
            ch[name] = ind
        return cls(labels.geometry, ch)


@dataclass(frozen=True)
class LossBreakdown:
    similarity: float
    smooth: float
    consistency: float
    total: float

    def as_dict(self) -> dict:
        return {"similarity": self.similarity, "smooth": self.smooth,
                "consistency": self.consistency, "total": self.total}


def _require_same_geometry(a, b, what: str):
    if a != b:
        raise ValueError(f"{what}: geometry mismatch ({a.dims} vs {b.dims})")


# ---------------------------------------------------------------------------
# Similarity (patch-wise MSE)
# ---------------------------------------------------------------------------

def _patch_starts(n: int, p: int) -> np.ndarray:
    return np.arange(0, n, p)


def _patch_sums(arr: np.ndarray, patch) -> np.ndarray:
    out = arr
    for axis in range(3):
        out = np.add.reduceat(out, _patch_starts(arr.shape[axis], patch[axis]),
                              axis=axis)
    return out


def _patch_voxel_counts(dims, patch):
    """Per-patch voxel counts (ragged tail patches keep their own count)."""
    lens = []
    for n, p in zip(dims, patch):
        starts = _patch_starts(n, p)
        ends = np.append(starts[1:], n)
        lens.append((ends - starts).astype(float))
    return lens


def loss_similarity(warped: ScalarVolume, fixed: ScalarVolume,
                    patch=(8, 8, 8)) -> float:
    """Mean over non-overlapping patches of the per-patch MSE.

    Volume dims need not divide evenly; tail patches average over their own
    voxel count.  With equal-size patches this equals the global MSE.
    """
    _require_same_geometry(warped.geometry, fixed.geometry, "loss_similarity")
    diff2 = (warped.data - fixed.data) ** 2
    sums = _patch_sums(diff2, patch)
    lx, ly, lz = _patch_voxel_counts(warped.geometry.dims, patch)
    counts = lx[:, None, None] * ly[None, :, None] * lz[None, None, :]
    return float(np.mean(sums / counts))


def _similarity_voxel_weights(dims, patch) -> np.ndarray:
    """d(loss_similarity)/d(diff2) per voxel: 1 / (patch count * n patches)."""
    lx, ly, lz = _patch_voxel_counts(dims, patch)
    n_patches = lx.size * ly.size * lz.size
    per_axis = [np.repeat(l, l.astype(int)) for l in (lx, ly, lz)]
    counts = (per_axis[0][:, None, None] * per_axis[1][None, :, None]
              * per_axis[2][None, None, :])
    return 1.0 / (counts * n_patches)


# ---------------------------------------------------------------------------
# Smoothness (summed squared forward gradient of u)
# ---------------------------------------------------------------------------

def loss_smooth(field: DisplacementField) -> float:
    """Sum over voxels of ||grad u||_F^2, forward differences scaled by spacing.

    Penalizes the displacement (not the map id + u), so any uniform
    translation scores exactly 0.  The last slice per axis has no forward
    neighbor and contributes no term.
    """
    u = field.vectors
    sp = field.geometry.spacing
    total = 0.0
    for axis in range(3):
        d = np.diff(u, axis=axis) / sp[axis]
        total += float(np.sum(d * d))
    return total


def _smooth_gradient(field: DisplacementField) -> np.ndarray:
    """Adjoint of loss_smooth w.r.t. u (same stencil, exact)."""
    u = field.vectors
    sp = field.geometry.spacing
    g = np.zeros_like(u)
    head = [slice(None)] * 4
    tail = [slice(None)] * 4
    for axis in range(3):
        d = np.diff(u, axis=axis) / sp[axis]
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        g[tuple(head)] -= 2.0 * d / sp[axis]
        g[tuple(tail)] += 2.0 * d / sp[axis]
        head[axis] = slice(None)
        tail[axis] = slice(None)
    return g


# ---------------------------------------------------------------------------
# Segmentation consistency (weighted soft Dice)
# ---------------------------------------------------------------------------

def soft_dsc(pred: np.ndarray, target: np.ndarray, eps: float = DSC_EPS) -> float:
    """(2*sum(p*t) + eps) / (sum(p) + sum(t) + eps); empty-vs-empty -> 1."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"soft_dsc shape mismatch {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    num = 2.0 * float(np.sum(pred * target)) + eps
    den = float(np.sum(pred)) + float(np.sum(target)) + eps
    return num / den


def loss_consistency(per_step_masks: Sequence[SoftMask], fixed_masks: SoftMask,
                     weights: LossWeights) -> float:
    """Deep-supervision overlap loss: sum over steps and structures of
    w_k * (1 - soft DSC).  Summed, not averaged, over steps."""
    total = 0.0
    for masks in per_step_masks:
        _require_same_geometry(masks.geometry, fixed_masks.geometry,
                               "loss_consistency")
        for name in LOSS_STRUCTURES:
            w = weights.structure_weights[name]
            total += w * (1.0 - soft_dsc(masks.channel(name),
                                         fixed_masks.channel(name)))
    return total


# ---------------------------------------------------------------------------
# Total loss and its gradient
# ---------------------------------------------------------------------------

def loss_total(warped: ScalarVolume, fixed: ScalarVolume,
               per_step_masks: Sequence[SoftMask], fixed_masks: SoftMask,
               field: DisplacementField, weights: LossWeights) -> LossBreakdown:
    """similarity + lambda_smooth*smooth + lambda_cons*consistency."""
    sim = loss_similarity(warped, fixed, weights.patch)
    smo = loss_smooth(field)
    con = loss_consistency(per_step_masks, fixed_masks, weights)
    total = sim + weights.lambda_smooth * smo + weights.lambda_cons * con
    return LossBreakdown(sim, smo, con, total)


def warp_soft_mask(masks: SoftMask, field: DisplacementField) -> SoftMask:
    """Trilinear-warp every channel; convexity keeps values in [0, 1]."""
    qx, qy, qz = sample_coords(field, masks.geometry)
    stencil = _TrilinearStencil(masks.geometry.dims, qx, qy, qz)
    return SoftMask(field.geometry,
                    {k: stencil.value(v) for k, v in masks.channels.items()})


def warp_state(moving: ScalarVolume, moving_masks: SoftMask,
               field: DisplacementField):
    """Warp the image and every mask channel through one shared stencil."""
    qx, qy, qz = sample_coords(field, moving.geometry)
    stencil = _TrilinearStencil(moving.geometry.dims, qx, qy, qz)
    warped = ScalarVolume(field.geometry, stencil.value(moving.data))
    warped_masks = SoftMask(field.geometry,
                            {k: stencil.value(v)
                             for k, v in moving_masks.channels.items()})
    return warped, warped_masks


def step_objective(moving: ScalarVolume, fixed: ScalarVolume,
                   moving_masks: SoftMask, fixed_masks: SoftMask,
                   field: DisplacementField, weights: LossWeights) -> LossBreakdown:
    """Single-step objective: warp image and masks by ``field``, then total.

    This is the function whose gradient ``grad_total`` returns; during
    progressive registration ``moving`` is the previous step's warped state.
    """
    _require_same_geometry(moving.geometry, field.geometry, "step_objective")
    _require_same_geometry(fixed.geometry, field.geometry, "step_objective")
    warped, warped_masks = warp_state(moving, moving_masks, field)
    return loss_total(warped, fixed, [warped_masks], fixed_masks, field, weights)


def grad_total(moving: ScalarVolume, fixed: ScalarVolume,
               moving_masks: SoftMask, fixed_masks: SoftMask,
               field: DisplacementField, weights: LossWeights) -> np.ndarray:
    """Analytic gradient of ``step_objective`` w.r.t. every component of u.

    Returns an array shaped like field.vectors.  At an exact channel match
    (warped mask identical to its target) the consistency term sits at its
    global minimum and contributes a zero subgradient; likewise the
    similarity term vanishes wherever warped equals fixed.
    """
    _require_same_geometry(moving.geometry, field.geometry, "grad_total")
    _require_same_geometry(fixed.geometry, field.geometry, "grad_total")
    geom = field.geometry
    sp = moving.geometry.spacing
    qx, qy, qz = sample_coords(field, moving.geometry)
    stencil = _TrilinearStencil(moving.geometry.dims, qx, qy, qz)

    g = weights.lambda_smooth * _smooth_gradient(field)

    # Similarity: dL/dW = 2 (W - f) / (patch count * n patches).
    W, dWx, dWy, dWz = stencil.value_and_grad(moving.data)
    dldw = 2.0 * (W - fixed.data) * _similarity_voxel_weights(geom.dims,
                                                              weights.patch)
    g[..., 0] += dldw * dWx / sp[0]
    g[..., 1] += dldw * dWy / sp[1]
    g[..., 2] += dldw * dWz / sp[2]

    # Consistency: dL/dX_p = -w (2 t_p D - N) / D^2 for dsc = N/D.
    for name in LOSS_STRUCTURES:
        w = weights.lambda_cons * weights.structure_weights[name]
        if w == 0.0:
            continue
        t = fixed_masks.channel(name)
        X, dXx, dXy, dXz = stencil.value_and_grad(moving_masks.channel(name))
        if np.array_equal(X, t):
            continue  # exact overlap: global minimum of this term
        N = 2.0 * np.sum(X * t) + DSC_EPS
        D = np.sum(X) + np.sum(t) + DSC_EPS
        dldx = -w * (2.0 * t * D - N) / (D * D)
        g[..., 0] += dldx * dXx / sp[0]
        g[..., 1] += dldx * dXy / sp[1]
        g[..., 2] += dldx * dXz / sp[2]
    return g
