"""Figure and plot-data emission: per-stage RMSE, cost-vs-iteration curves,
post-fit residual histograms, normal-equation sparsity, and spline curves
with their control points.  Every figure renders to a file; the numeric data
behind each figure is also exported as CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ctcalib import lie
from ctcalib.io import _fmt
from ctcalib.models import CalibrationState


# ---------------------------------------------------------------------------
# spline sampling exports


def spline_samples(state: CalibrationState, sample_rate: float = 100.0):
    """Sampled rotation (unit quaternion wxyz) and velocity curves.

    The sample grid spans the shared spline support with
    ``duration * sample_rate + 1`` points.
    """
    grid = state.rotation_spline.grid
    duration = grid.end_time - grid.start_time
    n = int(round(duration * sample_rate)) + 1
    t = grid.start_time + np.arange(n) / sample_rate
    t = np.minimum(t, np.nextafter(grid.end_time, -np.inf))
    rots = state.rotation_spline.eval(t)
    quats = np.stack([lie.matrix_to_quat(r) for r in rots])
    vels = state.velocity_spline.eval(t)
    return t, quats, vels


def export_spline_csv(state: CalibrationState, out_dir, sample_rate: float = 100.0):
    """Write rotation/velocity sample CSVs plus control-point dumps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t, quats, vels = spline_samples(state, sample_rate)
    paths = {}

    def _write(name, header, rows):
        p = out_dir / name
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        paths[name] = p

    _write(
        "rotation_spline.csv", ["t", "qw", "qx", "qy", "qz"],
        np.column_stack([t, quats]),
    )
    _write(
        "velocity_spline.csv", ["t", "vx", "vy", "vz"], np.column_stack([t, vels])
    )
    knots = state.rotation_spline.grid.knot_times()
    rot_cp = np.stack(
        [lie.matrix_to_quat(r) for r in state.rotation_spline.control_points]
    )
    _write(
        "rotation_control_points.csv", ["t_knot", "qw", "qx", "qy", "qz"],
        np.column_stack([knots, rot_cp]),
    )
    _write(
        "velocity_control_points.csv", ["t_knot", "vx", "vy", "vz"],
        np.column_stack([knots, state.velocity_spline.control_points]),
    )
    return paths


def save_spline_plot(state: CalibrationState, path, sample_rate: float = 100.0):
    """Rotation-quaternion and velocity curves with velocity control points."""
    t, quats, vels = spline_samples(state, sample_rate)
    knots = state.velocity_spline.grid.knot_times()
    fig, axes = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    for k, lbl in enumerate(["qw", "qx", "qy", "qz"]):
        axes[0].plot(t, quats[:, k], label=lbl, lw=1.0)
    axes[0].set_ylabel("rotation quaternion")
    axes[0].legend(ncol=4, fontsize=8)
    for k, lbl in enumerate(["vx", "vy", "vz"]):
        axes[1].plot(t, vels[:, k], label=lbl, lw=1.0)
        axes[1].plot(knots, state.velocity_spline.control_points[:, k], ".",
                     ms=3, alpha=0.6)
    axes[1].set_ylabel("velocity [m/s]")
    axes[1].set_xlabel("time [s]")
    axes[1].legend(ncol=3, fontsize=8)
    fig.suptitle("Estimated splines and control points")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# stage RMSE / cost curves


def save_stage_rmse_plot(stage_rmse: dict, path):
    """Per-family RMSE after each pipeline stage (log scale)."""
    names = stage_rmse["stages"]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key, series in stage_rmse.items():
        if key == "stages":
            continue
        ax.semilogy(range(len(names)), np.maximum(series, 1e-16), "o-", label=key)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("RMSE")
    ax.set_title("Per-stage calibration error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_cost_plot(batch_stages: list, path):
    """Objective value versus cumulative iteration across the batch stages.

    ``batch_stages`` are the report's stage-log dicts.
    """
    fig, ax = plt.subplots(figsize=(8, 5))
    base = 0
    for log in batch_stages:
        costs = [it["cost"] for it in log["iterations"]]
        xs = base + np.arange(1, len(costs) + 1)
        ax.semilogy(xs, np.maximum(costs, 1e-24), "o-", ms=3, label=log["name"])
        base += len(costs)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.set_title("Objective per iteration")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# residual histograms


def residual_arrays(state, imu_streams, radar_streams, cfg=None) -> dict:
    """Standardized post-fit residuals per factor group at the given state."""
    from ctcalib.estimator import EstimatorConfig, _valid_residuals, build_batch_problem

    problem, _ = build_batch_problem(
        state, imu_streams, radar_streams, cfg or EstimatorConfig()
    )
    values = problem.values()
    return {
        g.name: _valid_residuals(g, values).ravel()
        for g in problem.groups
        if not g.name.startswith("center/")
    }


def save_residual_histograms(residuals: dict, path, bins: int = 60):
    names = sorted(residuals)
    cols = 3
    rows = max(1, (len(names) + cols - 1) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows),
                             squeeze=False)
    for k, name in enumerate(names):
        ax = axes[k // cols][k % cols]
        ax.hist(residuals[name], bins=bins, color="tab:blue")
        ax.set_title(name, fontsize=9)
    for k in range(len(names), rows * cols):
        axes[k // cols][k % cols].axis("off")
    fig.suptitle("Standardized post-fit residuals")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# normal-equation sparsity


def block_magnitudes(problem) -> tuple:
    """Frobenius norm of every free-block pair of the Gauss-Newton matrix.

    Returns ``(labels, magnitudes)`` with a dense (n_free, n_free) array;
    intended for small illustration problems.
    """
    from ctcalib.solver import _assemble

    offsets, total = problem.tangent_layout()
    h, _, _ = _assemble(problem, problem.values(), offsets, total)
    h = np.asarray(h.todense()) if hasattr(h, "todense") else np.asarray(h)
    free = [i for i, o in enumerate(offsets) if o >= 0]
    labels = [problem.blocks[i].name for i in free]
    spans = [
        (offsets[i], offsets[i] + problem.blocks[i].tangent_dim) for i in free
    ]
    n = len(free)
    mags = np.zeros((n, n))
    for a, (r0, r1) in enumerate(spans):
        for b, (c0, c1) in enumerate(spans):
            mags[a, b] = np.linalg.norm(h[r0:r1, c0:c1])
    return labels, mags


def export_sparsity_csv(labels, mags, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["block"] + labels)
        for name, row in zip(labels, mags):
            w.writerow([name] + [_fmt(x) for x in row])
    return Path(path)


def save_sparsity_plot(labels, mags, path):
    fig, ax = plt.subplots(figsize=(7, 6))
    with np.errstate(divide="ignore"):
        img = np.log10(np.where(mags > 0, mags, np.nan))
    im = ax.imshow(img, cmap="viridis")
    ax.set_title("Normal-equation block magnitudes (log10)")
    if len(labels) <= 40:
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=6)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
