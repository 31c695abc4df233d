"""Figure rendering for the report paths (training curves, score charts)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def save_training_curves(log_csv, out_png) -> None:
    """Loss components and the cross-supervision weight over training steps."""
    steps, sup, cps, total, lam = [], [], [], [], []
    with open(log_csv, newline="", encoding="utf-8") as f:
        for i, row in enumerate(csv.DictReader(f)):
            steps.append(i)
            sup.append(float(row["l_sup"]))
            cps.append(float(row["l_cps_l"]) + float(row["l_cps_u"]))
            total.append(float(row["total"]))
            lam.append(float(row["lambda"]))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, total, label="total", lw=1.2)
        ax.plot(steps, sup, label="supervised", lw=1.0, alpha=0.8)
        ax.plot(steps, cps, label="cross-pseudo", lw=1.0, alpha=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(steps, lam, color="tab:gray", ls="--", lw=0.9, label="lambda")
        ax2.set_ylabel("lambda")
        ax2.set_ylim(0, max(0.55, max(lam) * 1.1 if lam else 0.55))
        ax2.grid(False)
        lines, labels = ax.get_legend_handles_labels()
        l2, lab2 = ax2.get_legend_handles_labels()
        ax.legend(lines + l2, labels + lab2, loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)


def save_score_chart(dsc_means: dict[int, float], nsd_means: dict[int, float], out_png) -> None:
    """Grouped per-class bars of mean DSC and NSD."""
    classes = sorted(dsc_means)
    x = range(len(classes))
    width = 0.38
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar([i - width / 2 for i in x], [dsc_means[c] for c in classes], width, label="DSC")
        ax.bar([i + width / 2 for i in x], [nsd_means[c] for c in classes], width, label="NSD")
        ax.set_xticks(list(x), [f"class {c}" for c in classes])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)


def save_experiment_chart(rows: list[dict], out_png) -> None:
    """Validation mDSC per seed, baseline next to the dual-network run."""
    seeds = sorted({int(r["seed"]) for r in rows})
    modes = ("baseline", "cps")
    width = 0.38
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for k, mode in enumerate(modes):
            vals = []
            for s in seeds:
                match = [r for r in rows if int(r["seed"]) == s and r["mode"] == mode]
                vals.append(float(match[0]["val_mdsc"]) if match else 0.0)
            offs = (k - 0.5) * width
            ax.bar([i + offs for i in range(len(seeds))], vals, width, label=mode)
        ax.set_xticks(range(len(seeds)), [f"seed {s}" for s in seeds])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("validation mDSC")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
