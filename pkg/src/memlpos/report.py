"""CSV and SVG output for sweep results.

Both are derived from a ``ResultsTable`` only. Floats are written with
``repr`` so reading the CSV back gives the exact same values.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .experiment import CSV_COLUMNS, ResultRow, ResultsTable

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in table.rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


class CsvSink:
    """Appends rows to ``results.csv`` as they arrive, so a failed sweep still
    leaves every completed row on disk."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_COLUMNS)
        self._fh.flush()

    def __call__(self, row: ResultRow):
        self._w.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_results_csv(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            d = dict(zip(CSV_COLUMNS, rec))
            rows.append(ResultRow(d["strategy"], d["source_loss"], d["target_loss"], d["env_type"],
                                  float(d["fraction"]), int(d["seed"]), int(d["fold"]), float(d["me_m"]),
                                  float(d["crps"]) if d["crps"] else None))
    return rows


def series_label(row: ResultRow) -> str:
    return row.strategy if row.source_loss == "none" else f"{row.strategy} ({row.source_loss})"


def chart_series(table: ResultsTable, target_loss: str, env_type: str, metric: str = "me_m"):
    """``{label: [(n_samples, mean metric), ...]}`` averaged over seeds and folds."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in table.rows:
        if r.target_loss == target_loss and r.env_type == env_type:
            acc[series_label(r)][r.fraction].append(getattr(r, metric))
    out = {}
    for label, by_frac in acc.items():
        pts = []
        for frac in sorted(by_frac):
            n = table.pool_sizes.get(frac)
            pts.append((n if n is not None else frac, float(np.mean(by_frac[frac]))))
        out[label] = pts
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def svg_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
              width: int = 640, height: int = 420) -> str:
    """Self-contained SVG line chart with one polyline per series."""
    left, right, top, bottom = 70, 190, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = 0.0, max(ys) * 1.1 if ys and max(ys) > 0 else 1.0
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{top + ph}" x2="{sx(t):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.1f}" x2="{left}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{sy(t):.1f}" x2="{left + pw}" y2="{sy(t):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(18 {top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
               f'{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        out.append(f'<polyline class="series" data-label="{escape(label)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 10 + 18 * i
        out.append(f'<line x1="{left + pw + 15}" y1="{ly}" x2="{left + pw + 35}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_and_report(table: ResultsTable, out_dir) -> list[Path]:
    """Write ``results.csv`` and one mean-error chart per (target loss, env type)."""
    if not table.rows:
        raise ValueError("empty results table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "results.csv"]
    paths[0].write_text(results_csv(table), encoding="utf-8")
    pairs = sorted({(r.target_loss, r.env_type) for r in table.rows})
    for loss, env in pairs:
        series = chart_series(table, loss, env)
        title = f"Mean error, {env} target, {loss} loss"
        p = out / f"me_{loss}_{env}.svg"
        p.write_text(svg_chart(series, title, "training samples", "mean error (m)"), encoding="utf-8")
        paths.append(p)
    return paths
