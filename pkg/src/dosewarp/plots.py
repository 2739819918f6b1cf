"""Figure rendering for the report paths (DVH curves, field maps, traces).

All renderers write PNG files next to the delimited/JSON outputs they
illustrate.  The Agg backend keeps them usable headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STRUCTURE_COLORS = {"bladder": "tab:blue", "rectum": "tab:orange",
                    "ctv": "tab:red", "urethra": "tab:green"}


def _save(fig, path: str):
    fig.savefig(path, dpi=110, bbox_inches="tight", format="png")
    plt.close(fig)


def plot_dvh(curves, path: str):
    """Cumulative DVH curves, one line per structure."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        ax.plot(curve.levels_gy, curve.percent_volume,
                color=STRUCTURE_COLORS.get(curve.structure),
                label=curve.structure)
    ax.set_xlabel("dose (Gy)")
    ax.set_ylabel("volume (%)")
    ax.set_ylim(0, 105)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_loss_trace(per_step_loss, path: str):
    """Per-step objective breakdown of a registration run."""
    steps = np.arange(1, len(per_step_loss) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [b.total for b in per_step_loss], "o-", label="total")
    ax.plot(steps, [b.similarity for b in per_step_loss], "s--",
            label="similarity")
    ax.plot(steps, [b.consistency for b in per_step_loss], "d--",
            label="consistency")
    ax.set_xlabel("refinement step")
    ax.set_ylabel("loss")
    ax.set_xticks(steps)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_field_maps(field, path: str):
    """Mid-axial Jacobian determinant and displacement magnitude maps."""
    from .field import displacement_magnitude, jacobian_determinant

    k = field.geometry.dims[2] // 2
    jac = jacobian_determinant(field).data[:, :, k].T
    mag = displacement_magnitude(field).data[:, :, k].T
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    im0 = axes[0].imshow(jac, origin="lower", cmap="coolwarm",
                         vmin=min(0.5, jac.min()), vmax=max(1.5, jac.max()))
    axes[0].set_title("Jacobian determinant (mid slice)")
    fig.colorbar(im0, ax=axes[0], shrink=0.8)
    im1 = axes[1].imshow(mag, origin="lower", cmap="viridis")
    axes[1].set_title("displacement magnitude (mm)")
    fig.colorbar(im1, ax=axes[1], shrink=0.8)
    for ax in axes:
        ax.set_xlabel("x (voxels)")
        ax.set_ylabel("y (voxels)")
    _save(fig, path)


def plot_compliance(rates: dict, path: str):
    """Bar chart of per-constraint pass rates."""
    names = list(rates)
    values = [rates[k] for k in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylabel("pass rate (%)")
    ax.set_ylim(0, 105)
    for i, v in enumerate(values):
        ax.text(i, v + 1.5, f"{v:.1f}", ha="center", fontsize=9)
    ax.tick_params(axis="x", rotation=30)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)
