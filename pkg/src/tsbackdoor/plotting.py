"""Figures for single samples: waveform overlay, magnitude spectrum, and an
attention strip (Grad-CAM, or occlusion sensitivity for recurrent models)."""
from __future__ import annotations

import os
import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attacks import budget_violations  # noqa: E402
from .evaluation import UnsupportedArchitectureError, fourier_magnitude, grad_cam_1d, occlusion_sensitivity  # noqa: E402
from .training import predict  # noqa: E402

PLOT_KINDS = ("waveform", "spectrum", "gradcam")


def safe_name(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(sample_id))


def plot_paths(out_dir, sample_id: str, fmt: str = "png") -> dict:
    stem = safe_name(sample_id)
    return {k: os.path.join(out_dir, f"{stem}_{k}.{fmt}") for k in PLOT_KINDS}


def _save(fig, path):
    tmp = path + ".tmp"
    fig.savefig(tmp, format=os.path.splitext(path)[1][1:], dpi=100, metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)


def attention_map(model, x, target_class: int) -> tuple[np.ndarray, str]:
    try:
        return grad_cam_1d(model, x, target_class), "Grad-CAM"
    except UnsupportedArchitectureError:
        occ = occlusion_sensitivity(model, x, target_class)
        occ = np.maximum(occ, 0)
        return (occ / occ.max() if occ.max() > 0 else occ), "occlusion"


def plot_sample(
    x,
    x_poisoned,
    sample_id: str,
    out_dir,
    model=None,
    clip_fraction: float | None = None,
    fmt: str = "png",
) -> dict:
    """Write the three figures for one clean/poisoned pair; returns their paths.

    With ``clip_fraction`` the pair is rechecked against the trigger budget
    first and a violation raises ``ValueError``.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_poisoned, dtype=np.float64)
    if x.ndim == 1:
        x, xp = x[:, None], xp[:, None]
    if clip_fraction is not None and budget_violations(x, xp, clip_fraction):
        raise ValueError(f"sample {sample_id}: poisoned values exceed the {clip_fraction} budget")
    os.makedirs(out_dir, exist_ok=True)
    paths = plot_paths(out_dir, sample_id, fmt)
    t = np.arange(len(x))

    fig, ax = plt.subplots(figsize=(7, 2.6))
    for d in range(x.shape[1]):
        ax.plot(t, x[:, d], color="tab:blue", lw=1.2, label="clean" if d == 0 else None)
        ax.plot(t, xp[:, d], color="tab:red", lw=0.9, ls="--", label="poisoned" if d == 0 else None)
    ax.set_xlabel("time step")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(str(sample_id), fontsize=9)
    fig.tight_layout()
    _save(fig, paths["waveform"])

    fig, ax = plt.subplots(figsize=(7, 2.6))
    sx, sp = fourier_magnitude(x), fourier_magnitude(xp)
    freq = np.arange(len(sx))
    for d in range(x.shape[1]):
        ax.plot(freq, sx[:, d], color="tab:blue", lw=1.2, label="clean" if d == 0 else None)
        ax.plot(freq, sp[:, d], color="tab:red", lw=0.9, ls="--", label="poisoned" if d == 0 else None)
    ax.set_yscale("log")
    ax.set_xlabel("frequency bin")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, paths["spectrum"])

    fig, axes = plt.subplots(2, 1, figsize=(7, 2.4), sharex=True)
    for ax, series, label in zip(axes, (x, xp), ("clean", "poisoned")):
        if model is not None:
            pred, _ = predict(model, series)
            cam, method = attention_map(model, series, int(pred))
            ax.imshow(cam[None, :], aspect="auto", cmap="jet", vmin=0, vmax=1,
                      extent=(-0.5, len(series) - 0.5, 0, 1))
            ax.set_ylabel(f"{label}\n->{int(pred)}", fontsize=7)
            ax.set_title(method if label == "clean" else "", fontsize=8)
        ax.plot(t, (series[:, 0] - series[:, 0].min()) / (np.ptp(series[:, 0]) or 1.0), color="w", lw=0.8)
        ax.set_yticks([])
    axes[-1].set_xlabel("time step")
    fig.tight_layout()
    _save(fig, paths["gradcam"])
    return paths
