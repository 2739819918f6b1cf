"""Deformable dose mapping, accumulation, DVH and constraint compliance.

Per-fraction dose grids are pulled back onto the reference anatomy
(fraction 1) through each fraction's displacement field with trilinear
interpolation, summed voxelwise, and evaluated against structure masks:
cumulative DVH curves, D_x / V_d / Mean metrics and institutional
constraint checks with cohort-level compliance rates.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import DisplacementField, warp_image
from .grid import GridGeometry, LabelVolume, ScalarVolume
from .metrics import structure_mask


def validate_dose(dose: ScalarVolume, what: str = "dose") -> ScalarVolume:
    if np.min(dose.data) < 0.0:
        raise ValueError(f"{what} contains negative values")
    return dose


@dataclass(frozen=True)
class FractionRecord:
    """One treatment fraction: its dose grid and the reference-to-fraction
    displacement field (defined on the reference grid, mm)."""

    index: int
    dose: ScalarVolume
    field_to_fraction: DisplacementField

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("fraction index must be >= 1")
        validate_dose(self.dose, f"fraction {self.index} dose")


def map_dose(fraction: FractionRecord, reference: GridGeometry) -> ScalarVolume:
    """Pull the fraction dose back onto the reference grid (trilinear).

    output(p) = dose sampled at x(p) + u(p); convexity of trilinear weights
    keeps mapped dose nonnegative.
    """
    if fraction.field_to_fraction.geometry != reference:
        raise ValueError("fraction field must live on the reference geometry")
    return warp_image(fraction.dose, fraction.field_to_fraction)


def accumulate(mapped: list) -> ScalarVolume:
    """Voxelwise sum of co-located dose grids (fixed summation order)."""
    if not mapped:
        raise ValueError("accumulate requires at least one dose volume")
    geom = mapped[0].geometry
    total = np.zeros(geom.dims)
    for dose in mapped:
        if dose.geometry != geom:
            raise ValueError("accumulate: dose grids must be co-located")
        total = total + dose.data
    return ScalarVolume(geom, total)


# ---------------------------------------------------------------------------
# DVH and point metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DVHCurve:
    """Cumulative-from-above DVH: percent of structure volume receiving at
    least each dose level.  Levels are k * bin_width for k = 0..n-1."""

    structure: str
    bin_width_gy: float
    levels_gy: np.ndarray
    percent_volume: np.ndarray

    def volume_at(self, dose_gy: float) -> float:
        """Percent volume at the nearest tabulated level >= dose_gy."""
        k = min(int(math.ceil(dose_gy / self.bin_width_gy)),
                self.levels_gy.size - 1)
        return float(self.percent_volume[k])


def _structure_doses(dose: ScalarVolume, masks: LabelVolume, structure) -> np.ndarray:
    if dose.geometry != masks.geometry:
        raise ValueError("dose and mask grids must be co-located")
    sel = structure_mask(masks, structure)
    if not sel.any():
        raise ValueError(f"structure '{structure}' is empty in the mask volume")
    return dose.data[sel]


def dvh(dose: ScalarVolume, masks: LabelVolume, structure,
        bin_width_gy: float = 0.1) -> DVHCurve:
    """Cumulative DVH for one structure; starts at 100%, ends at 0%."""
    if bin_width_gy <= 0:
        raise ValueError("bin width must be > 0")
    validate_dose(dose)
    doses = np.sort(_structure_doses(dose, masks, structure), axis=None)
    n_levels = int(math.floor(doses[-1] / bin_width_gy)) + 2
    levels = np.arange(n_levels) * bin_width_gy
    received = doses.size - np.searchsorted(doses, levels, side="left")
    percent = 100.0 * received / doses.size
    name = structure if isinstance(structure, str) else str(structure)
    return DVHCurve(name, bin_width_gy, levels, percent)


_QUERY_RE = re.compile(r"^(D|V)\s*(\d+(?:\.\d+)?)$|^(Mean)$", re.IGNORECASE)


def dose_metric(dose: ScalarVolume, masks: LabelVolume, structure,
                query: str) -> float:
    """Evaluate "D<x>" (Gy), "V<d>" (percent volume) or "Mean" (Gy).

    D_x is the nearest-rank (100-x)th percentile of the structure's sorted
    voxel doses: the dose that the hottest x% of the volume still receives.
    V_d is the percent of structure volume receiving at least d Gy.
    """
    m = _QUERY_RE.match(query.strip())
    if not m:
        raise ValueError(f"unrecognized dose query '{query}'")
    doses = np.sort(_structure_doses(validate_dose(dose), masks, structure),
                    axis=None)
    if m.group(3):
        return float(np.mean(doses))
    kind, value = m.group(1).upper(), float(m.group(2))
    if kind == "D":
        if not 0.0 < value <= 100.0:
            raise ValueError(f"D_x percent must be in (0, 100], got {value}")
        rank = max(1, math.ceil((100.0 - value) / 100.0 * doses.size))
        return float(doses[rank - 1])
    if value < 0.0:
        raise ValueError(f"V_d dose must be >= 0 Gy, got {value}")
    received = doses.size - np.searchsorted(doses, value, side="left")
    return 100.0 * received / doses.size


# ---------------------------------------------------------------------------
# Constraint compliance
# ---------------------------------------------------------------------------

_OPS = {
    ">=": lambda a, t: a >= t,
    "<=": lambda a, t: a <= t,
    ">": lambda a, t: a > t,
    "<": lambda a, t: a < t,
}


@dataclass(frozen=True)
class DoseConstraint:
    """One institutional constraint, e.g. CTV D95 >= 40 Gy.

    ``metric`` is a dose_metric query string.  A constraint with no limit is
    report-only: its achieved value is recorded but never pass/failed.
    """

    id: str
    structure: str
    metric: str
    op: str = ">="
    limit: float | None = None

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown comparison op '{self.op}'")


def default_constraints() -> list:
    """Institutional defaults for the 5-fraction prostate course.

    The rectum V30/V24 volume limits are site configuration with no shipped
    default, so those entries are report-only until a limit is supplied.
    """
    return [
        DoseConstraint("ctv_d95", "ctv", "D95", ">=", 40.0),
        DoseConstraint("ctv_mean_min", "ctv", "Mean", ">=", 40.4),
        DoseConstraint("ctv_mean_max", "ctv", "Mean", "<", 42.0),
        DoseConstraint("bladder_d50", "bladder", "D50", "<=", 20.0),
        DoseConstraint("rectum_v30", "rectum", "V30", "<=", None),
        DoseConstraint("rectum_v24", "rectum", "V24", "<=", None),
    ]


@dataclass(frozen=True)
class ConstraintResult:
    constraint: DoseConstraint
    achieved: float
    passed: bool | None  # None when report-only

    def as_dict(self) -> dict:
        return {
            "id": self.constraint.id,
            "structure": self.constraint.structure,
            "metric": self.constraint.metric,
            "op": self.constraint.op,
            "limit": self.constraint.limit,
            "achieved": self.achieved,
            "pass": self.passed,
        }


def check_constraints(dose: ScalarVolume, masks: LabelVolume,
                      constraints=None) -> list:
    """Evaluate each constraint against the accumulated dose."""
    if constraints is None:
        constraints = default_constraints()
    results = []
    for c in constraints:
        achieved = dose_metric(dose, masks, c.structure, c.metric)
        passed = None if c.limit is None else bool(_OPS[c.op](achieved, c.limit))
        results.append(ConstraintResult(c, achieved, passed))
    return results


def compliance_summary(reports: list) -> dict:
    """Per-constraint pass rate (percent) over a cohort of constraint reports.

    Report-only constraints are excluded.  All reports must carry the same
    constraint ids in the same order.
    """
    if not reports:
        raise ValueError("compliance_summary requires at least one report")
    ids = [r.constraint.id for r in reports[0]]
    for rep in reports:
        if [r.constraint.id for r in rep] != ids:
            raise ValueError("inconsistent constraint ids across reports")
    rates = {}
    for i, cid in enumerate(ids):
        outcomes = [rep[i].passed for rep in reports]
        if all(o is None for o in outcomes):
            continue
        n_passed = sum(1 for o in outcomes if o)
        rates[cid] = 100.0 * n_passed / len(outcomes)
    return rates
