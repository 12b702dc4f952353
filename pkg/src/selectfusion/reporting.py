"""Report generation: CSV tables and dependency-free static SVG plots.

SVG output is plain hand-assembled XML with fixed-precision coordinates,
so identical inputs produce byte-identical files (diff-able in CI).
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "MissingArtifacts",
    "worker_threads",
    "write_csv",
    "read_csv",
    "line_plot",
    "bar_chart",
    "trajectory_plot",
    "generate_report",
]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 40, 50


class MissingArtifacts(FileNotFoundError):
    def __init__(self, missing: Sequence[str]):
        super().__init__(f"missing run artifacts: {', '.join(missing)}")
        self.missing = list(missing)


def worker_threads() -> int:
    """Worker-thread cap from SELECTFUSION_THREADS (default 1 for reproducibility)."""
    try:
        return max(1, int(os.environ.get("SELECTFUSION_THREADS", "1")))
    except ValueError:
        return 1


def write_csv(path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> List[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg_document(body: List[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Axes:
    """Maps data coordinates into the plot rectangle (y grows upward)."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray, equal: bool = False):
        x_lo, x_hi = float(np.min(xs)), float(np.max(xs))
        y_lo, y_hi = float(np.min(ys)), float(np.max(ys))
        if equal:
            span = max(x_hi - x_lo, y_hi - y_lo, 1e-9)
            x_mid, y_mid = (x_lo + x_hi) / 2, (y_lo + y_hi) / 2
            x_lo, x_hi = x_mid - span / 2, x_mid + span / 2
            y_lo, y_hi = y_mid - span / 2, y_mid + span / 2
        if x_hi - x_lo < 1e-12:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if y_hi - y_lo < 1e-12:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        self.x_lo, self.x_hi, self.y_lo, self.y_hi = x_lo, x_hi, y_lo, y_hi

    def x(self, v: float) -> float:
        frac = (v - self.x_lo) / (self.x_hi - self.x_lo)
        return MARGIN_L + frac * (WIDTH - MARGIN_L - MARGIN_R)

    def y(self, v: float) -> float:
        frac = (v - self.y_lo) / (self.y_hi - self.y_lo)
        return HEIGHT - MARGIN_B - frac * (HEIGHT - MARGIN_T - MARGIN_B)

    def frame_elements(self, title: str, xlabel: str, ylabel: str) -> List[str]:
        parts = [
            f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{WIDTH - MARGIN_L - MARGIN_R}" '
            f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" stroke="#cccccc"/>',
            f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" font-size="14" '
            f'font-family="sans-serif">{_escape(title)}</text>',
            f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif">{_escape(xlabel)}</text>',
            f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 16 {HEIGHT // 2})">{_escape(ylabel)}</text>',
        ]
        for i in range(5):
            xv = self.x_lo + (self.x_hi - self.x_lo) * i / 4
            yv = self.y_lo + (self.y_hi - self.y_lo) * i / 4
            xp, yp = self.x(xv), self.y(yv)
            parts.append(
                f'<text x="{_fmt(xp)}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle" '
                f'font-size="10" font-family="sans-serif">{xv:.3g}</text>'
            )
            parts.append(
                f'<text x="{MARGIN_L - 6}" y="{_fmt(yp + 3)}" text-anchor="end" '
                f'font-size="10" font-family="sans-serif">{yv:.3g}</text>'
            )
        return parts


def line_plot(
    path,
    series: Dict[str, Tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    equal_axes: bool = False,
) -> None:
    """Write a multi-series line plot; series maps label -> (xs, ys)."""
    all_x = np.concatenate([np.asarray(xs, dtype=float) for xs, _ in series.values()])
    all_y = np.concatenate([np.asarray(ys, dtype=float) for _, ys in series.values()])
    axes = _Axes(all_x, all_y, equal=equal_axes)
    body = axes.frame_elements(title, xlabel, ylabel)
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(axes.x(float(x)))},{_fmt(axes.y(float(y)))}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN_T + 16 + 16 * i
        body.append(
            f'<line x1="{WIDTH - 170}" y1="{ly - 4}" x2="{WIDTH - 150}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        body.append(
            f'<text x="{WIDTH - 144}" y="{ly}" font-size="11" font-family="sans-serif">'
            f"{_escape(label)}</text>"
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_svg_document(body), encoding="utf-8")


def bar_chart(
    path,
    labels: Sequence[str],
    series: Dict[str, Sequence[float]],
    title: str,
    ylabel: str,
) -> None:
    """Grouped bar chart; series maps legend label -> one value per x label."""
    n_groups = len(labels)
    n_series = max(len(series), 1)
    values = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    axes = _Axes(np.array([0.0, 1.0]), np.concatenate([[0.0], values]))
    body = axes.frame_elements(title, "", ylabel)
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w * 0.8 / n_series
    y0 = axes.y(0.0)
    for s, (label, vals) in enumerate(series.items()):
        color = PALETTE[s % len(PALETTE)]
        for g, v in enumerate(vals):
            x = MARGIN_L + g * group_w + group_w * 0.1 + s * bar_w
            yv = axes.y(float(v))
            top, height = (yv, y0 - yv) if yv <= y0 else (y0, yv - y0)
            body.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(top)}" width="{_fmt(bar_w)}" '
                f'height="{_fmt(height)}" fill="{color}"/>'
            )
        ly = MARGIN_T + 16 + 16 * s
        body.append(
            f'<rect x="{WIDTH - 170}" y="{ly - 10}" width="12" height="8" fill="{color}"/>'
        )
        body.append(
            f'<text x="{WIDTH - 152}" y="{ly - 2}" font-size="11" font-family="sans-serif">'
            f"{_escape(label)}</text>"
        )
    for g, label in enumerate(labels):
        x = MARGIN_L + g * group_w + group_w / 2
        body.append(
            f'<text x="{_fmt(x)}" y="{HEIGHT - MARGIN_B + 30}" text-anchor="middle" '
            f'font-size="9" font-family="sans-serif">{_escape(str(label))}</text>'
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_svg_document(body), encoding="utf-8")


def trajectory_plot(path, trajectories: Dict[str, np.ndarray], title: str) -> None:
    """Overlay x-y paths (equal axis scales)."""
    series = {
        name: (np.asarray(xy)[:, 0], np.asarray(xy)[:, 1]) for name, xy in trajectories.items()
    }
    line_plot(path, series, title, "x [m]", "y [m]", equal_axes=True)


def _integrate_xy(rows: List[dict], prefix: str) -> np.ndarray:
    """Planar dead-reckoning of per-frame relative poses from a predictions table."""
    x, y, yaw = 0.0, 0.0, 0.0
    pts = [(0.0, 0.0)]
    for row in rows:
        tx, ty = float(row[f"{prefix}_0"]), float(row[f"{prefix}_1"])
        x += tx * np.cos(yaw) - ty * np.sin(yaw)
        y += tx * np.sin(yaw) + ty * np.cos(yaw)
        yaw += float(row[f"{prefix}_5"])
        pts.append((x, y))
    return np.asarray(pts)


def _load_run(run_dir: Path) -> dict:
    metrics_path = run_dir / "metrics.csv"
    masks_path = run_dir / "masks.csv"
    missing = [str(p) for p in (metrics_path, masks_path) if not p.exists()]
    if missing:
        raise MissingArtifacts(missing)
    run = {
        "name": run_dir.name,
        "metrics": read_csv(metrics_path),
        "masks": read_csv(masks_path),
        "mask_report": [],
        "predictions": [],
        "fusion": "",
        "task": "",
    }
    if (run_dir / "mask_report.csv").exists():
        run["mask_report"] = read_csv(run_dir / "mask_report.csv")
    if (run_dir / "predictions.csv").exists():
        run["predictions"] = read_csv(run_dir / "predictions.csv")
    config_path = run_dir / "config.ini"
    if config_path.exists():
        import configparser

        parser = configparser.ConfigParser()
        parser.read(config_path)
        run["fusion"] = parser.get("experiment", "fusion", fallback="")
        run["task"] = parser.get("experiment", "task", fallback="")
    return run


def generate_report(run_dirs: Sequence, out_dir, warn=None) -> List[Path]:
    """Emit loss curves, mask charts, trajectory overlays, and a summary CSV.

    Multiple run directories are read concurrently (capped by
    SELECTFUSION_THREADS) and compared row-by-row in the summary table.
    Empty mask logs skip the selection chart with a warning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) > 1:
        with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
            runs = list(pool.map(_load_run, run_dirs))
    else:
        runs = [_load_run(d) for d in run_dirs]

    written: List[Path] = []
    summary_rows = []
    for run in runs:
        name = run["name"]
        epochs, losses = [], []
        test_metrics: Dict[str, str] = {}
        for row in run["metrics"]:
            if row["phase"] == "train" and row["metric"] == "train_loss":
                epochs.append(float(row["epoch"]))
                losses.append(float(row["value"]))
            elif row["phase"] == "test":
                test_metrics[row["metric"]] = row["value"]
        if epochs:
            path = out_dir / f"loss_{name}.svg"
            line_plot(path, {name: (epochs, losses)}, f"Training loss: {name}", "epoch", "loss")
            written.append(path)

        if run["masks"]:
            rates: Dict[str, List[float]] = {}
            for row in run["masks"]:
                rates.setdefault(row["modality"], []).append(float(row["rate"]))
            labels = sorted(rates)
            path = out_dir / f"selection_{name}.svg"
            bar_chart(
                path,
                labels,
                {"mean selection rate": [float(np.mean(rates[m])) for m in labels]},
                f"Feature selection rate by modality: {name}",
                "kept fraction",
            )
            written.append(path)
        elif warn is not None:
            warn(f"{name}: empty mask log, selection chart omitted")

        if run["mask_report"]:
            for table in ("turn_rate", "speed"):
                rows = [r for r in run["mask_report"] if r["table"] == table]
                if not rows:
                    continue
                buckets = sorted({r["bucket"] for r in rows})
                series = {}
                for modality in sorted({r["modality"] for r in rows}):
                    lookup = {r["bucket"]: float(r["rate_mean"]) for r in rows if r["modality"] == modality}
                    series[f"modality {modality}"] = [lookup.get(b, 0.0) for b in buckets]
                path = out_dir / f"selection_vs_{table}_{name}.svg"
                bar_chart(
                    path,
                    buckets,
                    series,
                    f"Selection rate vs {table.replace('_', ' ')}: {name}",
                    "kept fraction",
                )
                written.append(path)

        predictions = run["predictions"]
        if predictions and "pred_5" in predictions[0]:
            by_episode: Dict[str, List[dict]] = {}
            for row in predictions:
                by_episode.setdefault(row["episode"], []).append(row)
            for episode, rows in sorted(by_episode.items()):
                rows = sorted(rows, key=lambda r: int(r["frame"]))
                path = out_dir / f"trajectory_{name}_{episode}.svg"
                trajectory_plot(
                    path,
                    {
                        "ground truth": _integrate_xy(rows, "gt"),
                        "prediction": _integrate_xy(rows, "pred"),
                    },
                    f"Episode {episode}: {name}",
                )
                written.append(path)

        summary_rows.append(
            {
                "run": name,
                "task": run["task"],
                "fusion": run["fusion"],
                "t_rmse": test_metrics.get("t_rmse", ""),
                "r_rmse": test_metrics.get("r_rmse", ""),
                "drift_t_pct": test_metrics.get("drift_t_pct", ""),
                "drift_r_deg_per_100m": test_metrics.get("drift_r_deg_per_100m", ""),
                "selection_a": test_metrics.get("selection_a", ""),
                "selection_b": test_metrics.get("selection_b", ""),
            }
        )

    summary = out_dir / "summary.csv"
    write_csv(
        summary,
        [
            "run",
            "task",
            "fusion",
            "t_rmse",
            "r_rmse",
            "drift_t_pct",
            "drift_r_deg_per_100m",
            "selection_a",
            "selection_b",
        ],
        summary_rows,
    )
    written.append(summary)
    return written
