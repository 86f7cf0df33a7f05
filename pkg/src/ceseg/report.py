"""Cross-run comparison: tables (CSV + text) and PNG plots.

Takes two or more metric reports over the same cases, prints Mean±SD per
metric with the best value emphasized, and attaches paired Wilcoxon p-values
of every run against the first (reference) run. Plots: per-case DSC paired
scatter, training curves, and mid-slice overlay panels in the three
anatomical views.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import load_case, load_manifest
from .errors import DegenerateSampleError, InputError
from .metrics import METRIC_KEYS, MetricsReport, paired_wilcoxon

# Whether a larger mean is better, per metric.
_HIGHER_BETTER = {
    "dsc_pct": True,
    "assd_mm": False,
    "hd95_mm": False,
    "sensitivity_pct": True,
    "precision_pct": True,
}


def _check_case_sets(reports: list[MetricsReport]) -> list[str]:
    reference = {c["case_id"] for c in reports[0].per_case}
    for i, report in enumerate(reports[1:], start=1):
        cases = {c["case_id"] for c in report.per_case}
        if cases != reference:
            offending = sorted(reference ^ cases)
            raise InputError(
                f"report {i} covers different cases than report 0; "
                f"offending ids: {offending}"
            )
    return sorted(reference)


def default_labels(reports: list[MetricsReport]) -> list[str]:
    labels = []
    for i, report in enumerate(reports):
        base = report.meta.get("variant") or f"report{i}"
        label = base
        k = 2
        while label in labels:
            label = f"{base}{k}"
            k += 1
        labels.append(label)
    return labels


def build_comparison(
    reports: list[MetricsReport], labels: list[str] | None = None
) -> dict:
    """Aggregate rows plus p-values of each run against the first run.

    p-values pair per-case values sorted by case_id; cases missing a value in
    either run are dropped from that pair list. Degenerate pairings (all
    differences zero) and too-small pairings are recorded as strings rather
    than aborting the table.
    """
    if len(reports) < 2:
        raise InputError(f"need at least 2 reports to compare, got {len(reports)}")
    labels = labels or default_labels(reports)
    if len(labels) != len(reports):
        raise InputError(f"{len(labels)} labels for {len(reports)} reports")
    case_ids = _check_case_sets(reports)

    metrics: dict[str, dict] = {}
    for key in METRIC_KEYS:
        rows = []
        for label, report in zip(labels, reports):
            agg = report.aggregate.get(key)
            rows.append(
                {
                    "label": label,
                    "mean": None if agg is None else agg["mean"],
                    "sd": None if agg is None else agg["sd"],
                    "n": None if agg is None else agg["n"],
                }
            )
        p_values = {}
        ref_values = reports[0].metric_by_case(key)
        for label, report in zip(labels[1:], reports[1:]):
            values = report.metric_by_case(key)
            pairs = [
                (ref_values[cid], values[cid])
                for cid in case_ids
                if ref_values.get(cid) is not None and values.get(cid) is not None
            ]
            a = [p[0] for p in pairs]
            b = [p[1] for p in pairs]
            try:
                p_values[label] = paired_wilcoxon(b, a)
            except DegenerateSampleError:
                p_values[label] = "degenerate"
            except InputError as exc:
                p_values[label] = f"n/a ({exc})"
        means = [r["mean"] for r in rows]
        best = None
        candidates = [m for m in means if m is not None]
        if candidates:
            target = max(candidates) if _HIGHER_BETTER[key] else min(candidates)
            best = means.index(target)
        metrics[key] = {"rows": rows, "p_values": p_values, "best": best}
    return {"labels": labels, "reference": labels[0], "metrics": metrics}


def format_table(comparison: dict) -> str:
    """Plain-text Mean±SD table; the best value per metric is wrapped in *...*."""
    labels = comparison["labels"]
    ref = comparison["reference"]
    header = ["metric"] + labels + [f"p (vs {ref})" for _ in labels[1:]]
    table = [header]
    for key, entry in comparison["metrics"].items():
        row = [key]
        for i, cell in enumerate(entry["rows"]):
            if cell["mean"] is None:
                row.append("n/a")
                continue
            text = f"{cell['mean']:.2f} ± {cell['sd']:.2f}"
            if entry["best"] == i:
                text = f"*{text}*"
            row.append(text)
        for label in labels[1:]:
            p = entry["p_values"].get(label)
            row.append(f"{p:.4g}" if isinstance(p, float) else str(p))
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_comparison_csv(comparison: dict, path: str | Path) -> Path:
    path = Path(path)
    ref = comparison["reference"]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "label", "mean", "sd", "n", f"p_vs_{ref}"])
        for key, entry in comparison["metrics"].items():
            for cell in entry["rows"]:
                p = entry["p_values"].get(cell["label"], "")
                writer.writerow(
                    [
                        key,
                        cell["label"],
                        "" if cell["mean"] is None else f"{cell['mean']:.6f}",
                        "" if cell["sd"] is None else f"{cell['sd']:.6f}",
                        "" if cell["n"] is None else cell["n"],
                        f"{p:.6g}" if isinstance(p, float) else p,
                    ]
                )
    return path


# ---------------------------------------------------------------------------
# plots


def plot_paired_dsc(
    reports: list[MetricsReport], labels: list[str], path: str | Path
) -> Path:
    """Per-case DSC of the second run against the first, with the y=x line."""
    case_ids = _check_case_sets(reports)
    a = reports[0].metric_by_case("dsc_pct")
    b = reports[1].metric_by_case("dsc_pct")
    xs = [a[cid] for cid in case_ids if a[cid] is not None and b[cid] is not None]
    ys = [b[cid] for cid in case_ids if a[cid] is not None and b[cid] is not None]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    lo = min(xs + ys, default=0.0)
    hi = max(xs + ys, default=100.0)
    pad = max(1.0, 0.05 * (hi - lo))
    span = (lo - pad, hi + pad)
    ax.plot(span, span, color="gray", lw=1, ls="--", zorder=1)
    ax.scatter(xs, ys, s=28, color="tab:blue", zorder=2)
    ax.set_xlabel(f"DSC (%), {labels[0]}")
    ax.set_ylabel(f"DSC (%), {labels[1]}")
    ax.set_xlim(span)
    ax.set_ylim(span)
    ax.set_title("Per-case DSC")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def _read_log(path: str) -> list[dict]:
    records = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_loss_curves(
    reports: list[MetricsReport], labels: list[str], path: str | Path
) -> Path | None:
    """Training loss and validation DSC per epoch, one curve per run with a log."""
    curves = []
    for label, report in zip(labels, reports):
        log_path = report.meta.get("train_log")
        if log_path and Path(log_path).is_file():
            curves.append((label, _read_log(log_path)))
    if not curves:
        return None
    fig, (ax_loss, ax_dsc) = plt.subplots(1, 2, figsize=(9, 3.6))
    for label, records in curves:
        epochs = [r["epoch"] for r in records]
        ax_loss.plot(epochs, [r["train_loss"] for r in records], label=label)
        vals = [(r["epoch"], r["val_dsc"]) for r in records if r["val_dsc"] is not None]
        if vals:
            ax_dsc.plot([v[0] for v in vals], [v[1] for v in vals], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_dsc.set_xlabel("epoch")
    ax_dsc.set_ylabel("val DSC (%)")
    ax_loss.legend()
    ax_dsc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def _mid_slices(volume: np.ndarray) -> list[tuple[str, np.ndarray]]:
    d, h, w = volume.shape
    return [
        ("transversal", volume[d // 2]),
        ("coronal", volume[:, h // 2, :]),
        ("sagittal", volume[:, :, w // 2]),
    ]


def plot_overlays(
    reports: list[MetricsReport], labels: list[str], path: str | Path
) -> Path | None:
    """Mid-slice image with ground-truth and per-run prediction contours.

    Needs the first report's manifest and each report's saved predictions;
    returns None when those files are unavailable.
    """
    manifest_path = reports[0].meta.get("manifest")
    if not manifest_path or not Path(manifest_path).is_file():
        return None
    split = reports[0].meta.get("split", "test")
    entries = [e for e in load_manifest(manifest_path) if e["split"] == split]
    if not entries:
        return None
    entry = min(entries, key=lambda e: e["case_id"])
    vol, gt = load_case(entry)

    from .data import load_volume  # local import to avoid cycle at module load

    predictions = []
    for label, report in zip(labels, reports):
        pred_dir = report.meta.get("predictions")
        if not pred_dir:
            continue
        sidecar = Path(pred_dir) / f"{entry['case_id']}.json"
        if sidecar.is_file():
            predictions.append((label, load_volume(sidecar).labels))

    colors = ["tab:orange", "tab:red", "tab:purple", "tab:brown"]
    fig, axes = plt.subplots(1, 3, figsize=(11, 4))
    for ax, (view, image) in zip(axes, _mid_slices(vol.voxels)):
        ax.imshow(image, cmap="gray", interpolation="nearest", aspect="auto")
        gt_view = dict(_mid_slices(gt.labels.astype(float)))[view]
        if gt_view.max() > 0:
            ax.contour(gt_view, levels=[0.5], colors="lime", linewidths=1.4)
        for i, (label, pred) in enumerate(predictions):
            pred_view = dict(_mid_slices(pred.astype(float)))[view]
            if pred_view.max() > 0:
                ax.contour(
                    pred_view, levels=[0.5], colors=colors[i % len(colors)], linewidths=1.1
                )
        ax.set_title(f"{entry['case_id']}, {view}")
        ax.axis("off")
    handles = [plt.Line2D([0], [0], color="lime", lw=1.4, label="ground truth")]
    handles += [
        plt.Line2D([0], [0], color=colors[i % len(colors)], lw=1.1, label=label)
        for i, (label, _) in enumerate(predictions)
    ]
    fig.legend(handles=handles, loc="lower center", ncol=len(handles), frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def generate_report(
    report_paths: list[str | Path], out_dir: str | Path, labels: list[str] | None = None
) -> dict[str, Path]:
    """Full comparison bundle: CSV + text table + plots. Returns written paths."""
    reports = [MetricsReport.load(p) for p in report_paths]
    labels = labels or default_labels(reports)
    comparison = build_comparison(reports, labels)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, Path] = {}
    outputs["csv"] = write_comparison_csv(comparison, out_dir / "comparison.csv")
    table = format_table(comparison)
    (out_dir / "comparison.txt").write_text(table)
    outputs["table"] = out_dir / "comparison.txt"
    outputs["scatter"] = plot_paired_dsc(reports, labels, out_dir / "dsc_scatter.png")
    loss_path = plot_loss_curves(reports, labels, out_dir / "loss_curves.png")
    if loss_path is not None:
        outputs["loss_curves"] = loss_path
    overlay_path = plot_overlays(reports, labels, out_dir / "overlays.png")
    if overlay_path is not None:
        outputs["overlays"] = overlay_path
    return outputs
