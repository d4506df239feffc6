"""SVG figures for the evaluation report.

Output is byte-stable: the SVG hash salt is pinned and the date metadata
dropped, so identical inputs give identical files.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "ucascade", "svg.fonttype": "path", "figure.dpi": 100}
_META = {"Date": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def curve_plot(path, curves, xlabel, ylabel, title, diagonal=False):
    """Line plot of ``{label: (x, y)}``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4.5))
        if diagonal:
            ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        for label, (x, y) in curves.items():
            ax.plot(x, y, lw=1.4, label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="lower right" if diagonal else "lower left", fontsize=8)
        return _save(fig, path)


def bar_plot(path, values, ylabel, title):
    """Bars for ``{label: value}`` in insertion order."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        labels = list(values)
        ax.bar(range(len(labels)), [values[k] for k in labels], color="tab:blue", width=0.6)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=15, fontsize=8)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        return _save(fig, path)
