"""Figures written next to the JSON reports, and the saliency overlay."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "legend.fontsize": 8,
}

OVERLAY_ALPHA = 0.5


def heat_lut() -> np.ndarray:
    """256 x 3 uint8 jet-style table: blue -> cyan -> yellow -> red.

    Piecewise-linear in closed form, so it never depends on the installed
    matplotlib version.
    """
    x = np.arange(256) / 255.0
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.rint(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


HEAT_LUT = heat_lut()


def overlay(frame: np.ndarray, saliency: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the heat-coloured saliency map onto an H x W x 3 uint8 frame."""
    idx = np.clip(np.rint(np.asarray(saliency, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    heat = HEAT_LUT[idx].astype(np.float64)
    out = (1 - alpha) * frame.astype(np.float64) + alpha * heat
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_history(history: list[dict], path) -> None:
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_cc) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax_loss.plot(epochs, [r["loss"] for r in history], color="tab:blue", lw=1)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("BCE")
        ax_loss.set_yscale("log")
        src = history[0].get("cc_source", "validation") if history else "validation"
        ax_cc.plot(epochs, [r["cc"] for r in history], color="tab:orange", lw=1)
        ax_cc.set_xlabel("epoch")
        ax_cc.set_ylabel(f"CC ({src})")
        ax_cc.set_ylim(min(0.0, min((r["cc"] for r in history), default=0.0)), 1.0)
        fig.tight_layout()
        _save(fig, path)


def plot_metrics(report: dict, path) -> None:
    names = [k for k in ("AUC_Borji", "AUC_Judd", "NSS", "CC", "SIM", "KLD") if k in report]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.6))
        vals = [report[k] if report[k] is not None else 0.0 for k in names]
        bars = ax.bar(names, vals, color=["tab:gray" if report[k] is None else "tab:blue" for k in names])
        for bar, k in zip(bars, names):
            label = "-" if report[k] is None else f"{report[k]:.3f}"
            ax.annotate(label, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("score")
        ax.set_title(f"n = {report.get('n_samples', '?')}")
        fig.tight_layout()
        _save(fig, path)
