"""Markdown tables and figures from a finished study.

Renders three tables (intra-rater, inter-method, inter-rater) in the
ICC(95%CI) / MAD(max) / %<5 deg / SD(max) / SEM(max) layout, a CSV of the
paired per-curve method means with the fitted line, and a robotic-vs-
manual scatter figure.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .study import METHODS, StudyOutput


class ReportError(RuntimeError):
    pass


def _fmt_icc(cell: dict) -> str:
    icc = cell.get("icc", {})
    if "error" in icc or "icc" not in icc:
        return "n/a"
    return f"{icc['icc']:.3f} ({icc['ci_low']:.3f}-{icc['ci_high']:.3f})"


def _fmt_spread(mean, sd, mx) -> str:
    return f"{mean:.1f}±{sd:.1f} ({mx:.1f})"


def _fmt_pct(cell: dict) -> str:
    p = cell.get("pct_below", {})
    if not p:
        return "n/a"
    return f"{p['pct_of_analyzed']:.1f} ({p['count']}) [of total: {p['pct_of_total']:.1f}]"


def _intra_table(report: dict, rater_names: list[str]) -> list[str]:
    lines = [
        "| Method | Rater | ICC (95%CI) | MAD(max), ° | % below 5° | SD(max), ° | SEM(max), ° |",
        "|---|---|---|---|---|---|---|",
    ]
    for method in METHODS:
        for name in rater_names:
            cell = report["intra_rater"].get(f"{method}_{name}", {})
            if "error" in cell:
                lines.append(f"| {method} | {name} | {cell['error']} | | | | |")
                continue
            mad = cell["mad"]
            ss = cell["sd_sem"]
            lines.append(
                f"| {method} | {name} | {_fmt_icc(cell)} | "
                f"{_fmt_spread(mad['mean'], mad['sd'], mad['max'])} | "
                f"{_fmt_pct(cell)} | "
                f"{_fmt_spread(ss['sd_mean'], ss['sd_sd'], ss['sd_max'])} | "
                f"{_fmt_spread(ss['sem_mean'], ss['sem_sd'], ss['sem_max'])} |")
    return lines


def _inter_method_table(report: dict, rater_names: list[str]) -> list[str]:
    lines = [
        "| Rater | Methods | MAD(max), ° | % below 5° | Wilcoxon p | R² |",
        "|---|---|---|---|---|---|",
    ]
    for name in rater_names:
        cell = report["inter_method"].get(name, {})
        if "error" in cell:
            lines.append(f"| {name} | robotic vs manual | {cell['error']} | | | |")
            continue
        mad = cell["mad"]
        p = cell.get("wilcoxon_p")
        r2 = cell.get("linreg", {}).get("r2")
        p_str = f"{p:.3f}" if p is not None else "n/a"
        r2_str = f"{r2:.2f}" if r2 is not None else "n/a"
        lines.append(
            f"| {name} | robotic vs manual | "
            f"{_fmt_spread(mad['mean'], mad['sd'], mad['max'])} | "
            f"{_fmt_pct(cell)} | {p_str} | {r2_str} |")
    return lines


def _inter_rater_table(report: dict, rater_names: list[str]) -> list[str]:
    raters = " vs ".join(rater_names)
    lines = [
        "| Method | Raters | ICC (95%CI) | MAD(max), ° | % below 5° | SD(max), ° | SEM(max), ° |",
        "|---|---|---|---|---|---|---|",
    ]
    for method in METHODS:
        cell = report["inter_rater"].get(method, {})
        if "error" in cell:
            lines.append(f"| {method} | {raters} | {cell['error']} | | | | |")
            continue
        mad = cell["mad"]
        ss = cell["sd_sem"]
        lines.append(
            f"| {method} | {raters} | {_fmt_icc(cell)} | "
            f"{_fmt_spread(mad['mean'], mad['sd'], mad['max'])} | "
            f"{_fmt_pct(cell)} | "
            f"{_fmt_spread(ss['sd_mean'], ss['sd_sd'], ss['sd_max'])} | "
            f"{_fmt_spread(ss['sem_mean'], ss['sem_sd'], ss['sem_max'])} |")
    return lines


def render_report(study: StudyOutput, out_dir: str | Path | None = None) -> dict:
    """Write report.md, scatter CSVs and scatter figures; returns the paths.

    Missing analyses leave explicit gaps in the tables rather than failing,
    but an empty rating table is an error.
    """
    if not study.rows:
        raise ReportError("empty rating table; nothing to report")
    out = Path(out_dir) if out_dir is not None else study.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report = study.reports
    rater_names = sorted({r["rater"] for r in study.rows} - {"auto"})

    lines = ["# Study report", "",
             f"Curves analyzed: {report.get('n_curves_total', 'n/a')}", "",
             "## Intra-rater variation and reliability", ""]
    lines += _intra_table(report, rater_names)
    lines += ["", "## Inter-method comparison (means of scans per method)", ""]
    lines += _inter_method_table(report, rater_names)
    lines += ["", "## Inter-rater correlation", ""]
    lines += _inter_rater_table(report, rater_names)
    lines.append("")

    paths = {"markdown": out / "report.md"}
    scatter_files = []
    for name in rater_names:
        cell = report["inter_method"].get(name, {})
        pairs = cell.get("pairs")
        if not pairs:
            continue
        csv_path = out / f"scatter_{name}.csv"
        fig_path = out / f"scatter_{name}.png"
        lin = cell.get("linreg", {})
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "curve_id", "manual_mean_deg", "robotic_mean_deg",
                             "fit_slope", "fit_intercept", "fit_r2"])
            for key, man, rob in zip(pairs["keys"], pairs["manual_means"], pairs["robotic_means"]):
                writer.writerow([key[0], key[1], f"{man:.4f}", f"{rob:.4f}",
                                 f"{lin.get('slope', float('nan')):.6f}",
                                 f"{lin.get('intercept', float('nan')):.6f}",
                                 f"{lin.get('r2', float('nan')):.6f}"])
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(pairs["manual_means"], pairs["robotic_means"], s=18, alpha=0.8)
        if "slope" in lin:
            xs = [min(pairs["manual_means"]), max(pairs["manual_means"])]
            ys = [lin["slope"] * v + lin["intercept"] for v in xs]
            ax.plot(xs, ys, "r-", lw=1,
                    label=f"y = {lin['slope']:.2f}x + {lin['intercept']:.1f}, R² = {lin['r2']:.2f}")
            ax.legend(loc="upper left", fontsize=8)
        ax.set_xlabel("manual SPA mean (deg)")
        ax.set_ylabel("robotic SPA mean (deg)")
        ax.set_title(f"Rater {name}: robotic vs manual")
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        scatter_files.append((csv_path, fig_path))
        lines.append(f"Scatter ({name}): `{csv_path.name}`, `{fig_path.name}`")

    paths["markdown"].write_text("\n".join(lines) + "\n")
    paths["scatter"] = scatter_files
    return paths
