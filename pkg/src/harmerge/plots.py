"""Optional SVG plot emission (requires matplotlib, extra 'plots')."""

from __future__ import annotations


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise RuntimeError(
            "plot emission needs matplotlib; install the 'plots' extra"
        ) from exc
    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "harmerge"
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(report: dict, path) -> None:
    """Accuracy-vs-knob curves, one line per strategy."""
    plt = _pyplot()
    strategies = sorted({row["strategy"] for row in report["rows"]})
    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy in strategies:
        rows = sorted(
            (r for r in report["rows"] if r["strategy"] == strategy),
            key=lambda r: r["value"],
        )
        xs = [r["value"] for r in rows]
        ys = [r["mean_accuracy"] for r in rows]
        es = [r["std_accuracy"] for r in rows]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=strategy)
    ax.set_xlabel(report["parameter"])
    ax.set_ylabel("held-out accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_curves(report: dict, path) -> None:
    """Per-source training-loss curves for the first protocol cell, showing
    the competitive loss dynamics across sources."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    cell = next((c for c in report["cells"] if c.get("diagnostics")), None)
    if cell is not None:
        series = cell["diagnostics"]
        steps = [p["step"] for p in series]
        n_sources = len(series[0]["ce_loss_per_source"]) if series else 0
        for i in range(n_sources):
            ax.plot(steps, [p["ce_loss_per_source"][i] for p in series],
                    alpha=0.8, label=f"source {i}")
        ax.set_title(f"held-out {cell['held_out']}, seed {cell['seed']}")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
