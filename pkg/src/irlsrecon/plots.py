"""PNG figures for reconstruction traces and training logs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_convergence(trace, path) -> None:
    """Fixed-point residual, objective and (if recorded) PSNR per IRLS step."""
    steps = [row.step for row in trace]
    has_psnr = any(row.psnr is not None for row in trace)
    fig, axes = plt.subplots(1, 3 if has_psnr else 2, figsize=(11 if has_psnr else 7.5, 3.2))
    axes[0].semilogy(steps, [max(row.fixed_point_rtol, 1e-300) for row in trace], marker=".")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("fixed-point residual")
    axes[1].plot(steps, [row.objective for row in trace], marker=".")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("objective")
    if has_psnr:
        pts = [(row.step, row.psnr) for row in trace if row.psnr is not None]
        axes[2].plot(*zip(*pts), marker=".")
        axes[2].set_xlabel("step")
        axes[2].set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_training(rows, path) -> None:
    """Batch loss (negative PSNR) per optimizer step."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(rows)), [row["loss"] for row in rows], marker=".")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss (-PSNR, dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
