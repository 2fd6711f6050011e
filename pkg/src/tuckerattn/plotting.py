"""Figures for the CLI reports, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

from matplotlib.figure import Figure

from .conversion import SPECTRUM_MODES, Spectrum


def plot_spectrum(spectra: Spectrum, path) -> Path:
    """One panel per tensor with a log-scale curve per mode unfolding."""
    fig = Figure(figsize=(9, 3.5), layout="constrained")
    axes = fig.subplots(1, len(SPECTRUM_MODES), sharey=True)
    for ax, tensor in zip(axes, SPECTRUM_MODES):
        for mode in SPECTRUM_MODES[tensor]:
            values = spectra.values[(tensor, mode)]
            positive = values[values > 0]
            if positive.size:
                ax.semilogy(range(1, positive.size + 1), positive, marker=".", label=mode)
        ax.set_title(f"{tensor}-softmax tensor")
        ax.set_xlabel("index")
        if ax.lines:
            ax.legend()
    axes[0].set_ylabel("normalized singular value")
    path = Path(path)
    fig.savefig(path, dpi=120)
    return path


def plot_losses(losses, path) -> Path:
    fig = Figure(figsize=(5, 3.5), layout="constrained")
    ax = fig.subplots()
    ax.semilogy(range(len(losses)), losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    path = Path(path)
    fig.savefig(path, dpi=120)
    return path
