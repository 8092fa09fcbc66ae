"""Write run reports as JSON, flat CSV and SVG figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simulation import RunReport  # noqa: E402

FORMATS = ("csv", "json", "svg")

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",
    # stable element IDs so identical reports give identical files
    "svg.hashsalt": "edgereid",
}


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def flatten(value: Any, prefix: str = "") -> Iterable[tuple[str, Any]]:
    if isinstance(value, dict):
        if not value and prefix:
            yield prefix, None
        for key in sorted(value, key=str):
            yield from flatten(value[key], f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(value, list):
        yield prefix, ";".join(str(v) for v in value)
    else:
        yield prefix, value


def write_csv(report: RunReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["field", "value"])
        for key, value in flatten(report.to_dict()):
            writer.writerow([key, "null" if value is None else value])


def _series(report: RunReport) -> list[tuple[str, dict[str, Any]]]:
    rows = [(f"cam {cam}", report.per_camera[cam]) for cam in sorted(report.per_camera)]
    rows.append(("multi", report.multi))
    return rows


def plot_precision_recall(report: RunReport, path: Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        for label, m in _series(report):
            marker = "D" if label == "multi" else "o"
            point = ax.scatter([m["idr"]], [m["idp"]], marker=marker, s=40, label=label)
            point.set_gid(f"idp-idr-{label.replace(' ', '-')}")
        ax.set_xlim(0, 105)
        ax.set_ylim(0, 105)
        ax.set_xlabel("IDR (%)")
        ax.set_ylabel("IDP (%)")
        ax.set_title("Identity precision vs recall")
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_idf1_bars(report: RunReport, path: Path) -> None:
    series = _series(report)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(series), 3.5))
        labels = [label for label, _ in series]
        values = [m["idf1"] for _, m in series]
        colors = ["0.6"] * (len(series) - 1) + ["C0"]
        bars = ax.bar(range(len(series)), values, color=colors, width=0.6)
        for bar, label in zip(bars, labels):
            bar.set_gid(f"idf1-bar-{label.replace(' ', '-')}")
        ax.set_xticks(range(len(series)), labels)
        ax.set_ylim(0, 105)
        ax.set_ylabel("IDF1 (%)")
        ax.set_title("IDF1 per camera")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(report: RunReport, out_dir: str | Path, formats: Iterable[str] = FORMATS) -> list[Path]:
    """Write the requested formats into ``out_dir``; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out / "report.json"
            path.write_text(report_json(report), encoding="utf-8")
            written.append(path)
        elif fmt == "csv":
            path = out / "report.csv"
            write_csv(report, path)
            written.append(path)
        elif fmt == "svg":
            pr = out / "idp_idr.svg"
            bars = out / "idf1.svg"
            plot_precision_recall(report, pr)
            plot_idf1_bars(report, bars)
            written += [pr, bars]
        else:
            raise ValueError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")
    return written


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
