"""SVG chart emission with reproducible output.

Matplotlib salts element ids per process by default and stamps the file
with the render date; both are pinned here so the same data produces the
same bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "jointplan"

__all__ = ["line_chart", "bar_chart"]

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def line_chart(path, series, xlabel: str, ylabel: str, title: str = "") -> None:
    """Write a line chart; series is a list of (label, xs, ys)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        drew_any = False
        for label, xs, ys in series:
            if len(xs):
                ax.plot(xs, ys, label=label, linewidth=1.5)
                drew_any = True
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if drew_any:
            ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
    finally:
        plt.close(fig)


def bar_chart(path, labels, values, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        ax.bar(range(len(labels)), values)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
    finally:
        plt.close(fig)
