"""Figure rendering from run artifacts.

Three figure kinds: the latent-embedding scatter (source red, target blue),
loss curves over training steps, and contact sheets scaled up from exported
image grids.  Rendering never writes into the run directory it reads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .artifacts import SchemaError, read_embeddings, read_losses, read_pixmap

FIGURE_KINDS = ("embedding_scatter", "loss_curves", "contact_sheet")

SOURCE_COLOR = "red"
TARGET_COLOR = "blue"


@dataclass
class FigureJob:
    kind: str
    inputs: list
    output: str
    point_size: float = 8.0
    scale: int = 4
    title: str = ""
    dpi: int = 120

    def validate(self) -> "FigureJob":
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"figure kind must be one of {FIGURE_KINDS}, got {self.kind!r}")
        if not self.inputs:
            raise ValueError("figure job needs at least one input path")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        return self


def _render_embedding_scatter(job: FigureJob) -> Path:
    emb = read_embeddings(job.inputs[0])
    if len(emb["source"]) == 0 and len(emb["target"]) == 0:
        warnings.warn(f"{job.inputs[0]}: schema valid but empty; no figure written")
        return None
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(emb["source"][:, 0], emb["source"][:, 1], s=job.point_size,
               c=SOURCE_COLOR, label="source", alpha=0.6, linewidths=0)
    ax.scatter(emb["target"][:, 0], emb["target"][:, 1], s=job.point_size,
               c=TARGET_COLOR, label="target", alpha=0.6, linewidths=0)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best")
    ax.set_title(job.title or "latent embedding")
    return _save(fig, job)


def _render_loss_curves(job: FigureJob) -> Path:
    losses = read_losses(job.inputs[0])
    if losses["step"].size == 0:
        warnings.warn(f"{job.inputs[0]}: schema valid but empty; no figure written")
        return None
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, series in losses.items():
        if name == "step":
            continue
        ax.plot(losses["step"], series, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=8)
    ax.set_title(job.title or "training losses")
    return _save(fig, job)


def _render_contact_sheet(job: FigureJob) -> Path:
    img = read_pixmap(job.inputs[0])
    scaled = np.repeat(np.repeat(img, job.scale, axis=0), job.scale, axis=1)
    out = Path(job.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if scaled.ndim == 2:
        plt.imsave(out, scaled, cmap="gray", vmin=0, vmax=255)
    else:
        plt.imsave(out, scaled)
    return out


def _save(fig, job: FigureJob) -> Path:
    out = Path(job.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=job.dpi, bbox_inches="tight")
    plt.close(fig)
    return out


def render(job: FigureJob):
    """Render one figure; returns the output path, or None for empty inputs."""
    job.validate()
    if job.kind == "embedding_scatter":
        return _render_embedding_scatter(job)
    if job.kind == "loss_curves":
        return _render_loss_curves(job)
    return _render_contact_sheet(job)
