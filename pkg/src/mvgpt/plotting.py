"""Matplotlib figures for experiment reports, written straight to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import Z95  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no version metadata, so equal figures give equal bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rollouts(
    path: PathLike,
    truths: Mapping[str, Sequence[float]],
    rollouts: Mapping[str, Mapping[str, Sequence[float]]],
    n_seed: int,
    max_panels: int = 6,
) -> Path:
    """Grid of ground truth against model rollouts, one panel per trajectory.

    ``rollouts`` maps a model label to ``{seq_id: values}``.
    """
    ids = list(truths)[:max_panels]
    cols = min(3, len(ids))
    rows = -(-len(ids) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.6 * rows), squeeze=False)
    for ax, seq_id in zip(axes.flat, ids):
        y = np.asarray(truths[seq_id])
        ax.plot(y, color="black", lw=1.5, label="truth")
        for label, per_seq in rollouts.items():
            if seq_id in per_seq:
                ax.plot(per_seq[seq_id], lw=1, ls="--", label=label)
        ax.axvline(n_seed - 0.5, color="grey", lw=0.8, ls=":")
        ax.set_title(seq_id, fontsize=9)
    for ax in list(axes.flat)[len(ids):]:
        ax.set_visible(False)
    axes.flat[0].legend(fontsize=7)
    return _save(fig, path)


def plot_qq(path: PathLike, series: Mapping[str, Sequence[tuple[float, float]]]) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    lim = 3.0
    for label, pts in series.items():
        if not pts:
            continue
        t, s = np.asarray(pts).T
        ax.plot(t, s, ".", ms=3, label=label)
        lim = max(lim, float(np.abs(t).max()))
    ax.plot([-lim, lim], [-lim, lim], color="black", lw=1)
    for x in (-Z95, Z95):
        ax.axvline(x, color="grey", ls="--", lw=0.8)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-2 * lim, 2 * lim)
    ax.set_xlabel("standard normal quantile")
    ax.set_ylabel("standardized residual quantile")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_losses(path: PathLike, histories: Mapping[str, Sequence[tuple]]) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, hist in histories.items():
        val = [(row[0], row[4]) for row in hist if row[1] == "val"]
        if val:
            x, y = zip(*val)
            ax.plot(x, y, marker=".", label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("validation loss")
    ax.legend(fontsize=7)
    return _save(fig, path)
