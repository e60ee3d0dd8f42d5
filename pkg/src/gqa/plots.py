"""Static figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_ndcg_by_type(fig_rows, table, path):
    """Bar chart of model NDCG per distortion type (mean with std error
    bars), with full-reference metric means overlaid as markers."""
    dtypes = [r["dtype"] for r in fig_rows]
    x = np.arange(len(dtypes))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(dtypes) + 2), 3.2))
    ax.bar(x, [r["mean"] for r in fig_rows], yerr=[r["std"] for r in fig_rows],
           color="0.6", capsize=3, label="gqanet")
    markers = iter("o^sDvx+*")
    for method, by_type in table.items():
        if method == "gqanet":
            continue
        ax.plot(x, [by_type.get(t, np.nan) for t in dtypes], linestyle="none",
                marker=next(markers, "."), label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(dtypes)
    ax.set_ylabel("NDCG")
    lo = min([r["mean"] - r["std"] for r in fig_rows] + [1.0])
    ax.set_ylim(max(0.0, lo - 0.05), 1.005)
    ax.legend(fontsize="small", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
