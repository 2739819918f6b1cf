"""Progressive deformable registration and dose accumulation toolkit.

Registration aligns 3D volume pairs by optimizing, per pair, a composite
objective (patch MSE + field smoothness + weighted soft-Dice consistency on
propagated structure masks) over a sequence of composed incremental
displacement fields.  Downstream modules evaluate the result: overlap and
surface-distance metrics, Jacobian analysis, deformable dose accumulation
with DVH/constraint reporting, and nonparametric paired/unpaired tests.
Synthetic pelvic phantoms with known ground-truth deformations provide the
test substrate.
"""

__version__ = "0.1.0"

from .grid import (  # noqa: F401
    GridGeometry,
    LabelVolume,
    NormalizeResult,
    ScalarVolume,
    normalize_percentile,
    resample,
    sample_nearest,
    sample_trilinear,
)
from .field import (  # noqa: F401
    DisplacementField,
    compose,
    displacement_magnitude,
    jacobian_determinant,
    resample_field,
    uniform_field,
    warp_image,
    warp_labels,
    zero_field,
)
from .losses import (  # noqa: F401
    LossBreakdown,
    LossWeights,
    SoftMask,
    grad_total,
    loss_consistency,
    loss_similarity,
    loss_smooth,
    loss_total,
    soft_dsc,
    step_objective,
)
