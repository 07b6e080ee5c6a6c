"""SVG figures written next to the CSV outputs.

Figures are rendered with the non-interactive Agg backend.  The SVG id salt
and the date stamp are fixed so equal inputs give byte-identical files.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "oaknee", "svg.fonttype": "none", "figure.dpi": 100}
_META = {"Date": None, "Creator": "oaknee"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_roc(result, path, title="ROC"):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(result.fpr, result.tpr, lw=1.5, label=f"AUC = {result.auc:.4f}")
        ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_importance(report, names, path, top=30):
    k = min(top, len(report.ranking))
    idx = report.ranking[:k]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 0.18 * k + 1.2))
        ax.barh(np.arange(k)[::-1], report.importance[idx])
        ax.set_yticks(np.arange(k)[::-1])
        ax.set_yticklabels([names[i] for i in idx], fontsize=7)
        ax.set_xlabel("mean decrease in impurity")
        ax.set_title(f"top {k} features")
        return _save(fig, path)


def plot_density(stats, path, feature="feature"):
    centers = stats.bin_centers
    width = centers[1] - centers[0] if len(centers) > 1 else 1.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for c, name in ((0, "non-OA"), (1, "OA")):
            ax.step(centers, stats.density[c], where="mid",
                    label=f"{name}: {stats.mean[c]:.2f} ({stats.std[c]:.2f})")
        ax.set_xlim(centers[0] - width / 2, centers[-1] + width / 2)
        ax.set_xlabel(feature)
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_noise_sweep(rows, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for tag in dict.fromkeys(r.model for r in rows):
            pts = sorted((r.sigma_mm, r.auc) for r in rows if r.model == tag)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=tag)
        ax.set_xlabel("noise std (mm)")
        ax.set_ylabel("test AUC")
        ax.legend()
        return _save(fig, path)


def plot_history(history, path):
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, [h["train_loss"] for h in history], label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [h["val_auc"] for h in history], color="tab:orange", label="val AUC")
        ax2.set_ylabel("validation AUC")
        fig.legend(loc="upper right")
        return _save(fig, path)
