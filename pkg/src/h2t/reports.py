"""Deterministic CSV tables and SVG charts.

Emitted files are byte-stable for a fixed input: floats use fixed
formats, rows keep a sorted order, and the SVG is assembled from plain
strings (no timestamps, no generated ids).
"""

from __future__ import annotations

from pathlib import Path

CSV_COLUMNS = ("task", "method", "seed", "fold", "lr", "steps", "reg",
               "target_size", "F", "val_acc", "test_acc",
               "flops_rel_ft", "storage_rel_ft", "storage_rel_lp")


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def method_run_rows(task: str, run) -> list:
    """Rows for one MethodRun: one per CV fold plus a summary row (fold -1)
    carrying the test accuracy and cost ratios."""
    chosen = run.chosen
    base = {
        "task": task, "method": run.method, "seed": run.seed,
        "lr": chosen.get("lr"), "steps": chosen.get("steps"),
        "reg": chosen.get("reg"), "target_size": chosen.get("target_size"),
        "F": chosen.get("fraction"),
    }
    rows = []
    for fold, acc in enumerate(run.fold_val_accs):
        rows.append({**base, "fold": fold, "val_acc": acc, "test_acc": None,
                     "flops_rel_ft": None, "storage_rel_ft": None,
                     "storage_rel_lp": None})
    cost = run.cost
    rows.append({**base, "fold": -1, "val_acc": run.cv_score,
                 "test_acc": run.test_acc,
                 "flops_rel_ft": cost.flops_rel_ft if cost else None,
                 "storage_rel_ft": cost.storage_rel_ft if cost else None,
                 "storage_rel_lp": cost.storage_rel_lp if cost else None})
    return rows


def write_csv(rows: list, path, columns=CSV_COLUMNS):
    """Header is always written; an empty row list gives a header-only file."""
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> list:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _scale(vmin, vmax):
    if vmax <= vmin:
        vmax = vmin + 1.0
    return vmin, vmax


def _x(px, vmin, vmax):
    return _ML + (px - vmin) / (vmax - vmin) * (_W - _ML - _MR)


def _y(py, vmin, vmax):
    return _H - _MB - (py - vmin) / (vmax - vmin) * (_H - _MT - _MB)


def _frame(title, xlabel, ylabel) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{_W // 2}" y="{_H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{_H // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_H // 2})">{ylabel}</text>',
    ]


def svg_line_chart(series: dict, path, title="", xlabel="", ylabel=""):
    """``series`` maps a name to [(x, y)] points; one polyline per series."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    xmin, xmax = _scale(min(xs), max(xs))
    ymin, ymax = _scale(min(ys), max(ys))
    parts = _frame(title, xlabel, ylabel)
    for i, name in enumerate(sorted(series)):
        pts = series[name]
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(
            f"{_x(x, xmin, xmax):.2f},{_y(y, ymin, ymax):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 150}" y="{_MT + 16 * i + 12}" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append(f'<text x="{_ML}" y="{_H - _MB + 16}" font-size="10" '
                 f'text-anchor="middle">{xmin:.3g}</text>')
    parts.append(f'<text x="{_W - _MR}" y="{_H - _MB + 16}" font-size="10" '
                 f'text-anchor="middle">{xmax:.3g}</text>')
    parts.append(f'<text x="{_ML - 6}" y="{_H - _MB}" font-size="10" '
                 f'text-anchor="end">{ymin:.3g}</text>')
    parts.append(f'<text x="{_ML - 6}" y="{_MT + 4}" font-size="10" '
                 f'text-anchor="end">{ymax:.3g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def svg_bar_chart(values: dict, path, title="", ylabel=""):
    """One bar per (sorted) key."""
    names = sorted(values)
    ymax = max([v for v in values.values()] + [1e-9])
    parts = _frame(title, "", ylabel)
    span = _W - _ML - _MR
    width = span / max(len(names), 1)
    for i, name in enumerate(names):
        h = (values[name] / ymax) * (_H - _MT - _MB)
        x0 = _ML + i * width + 0.15 * width
        parts.append(f'<rect x="{x0:.2f}" y="{_H - _MB - h:.2f}" '
                     f'width="{0.7 * width:.2f}" height="{h:.2f}" '
                     f'fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{x0 + 0.35 * width:.2f}" y="{_H - _MB + 14}" '
                     f'font-size="10" text-anchor="middle">{name}</text>')
        parts.append(f'<text x="{x0 + 0.35 * width:.2f}" '
                     f'y="{_H - _MB - h - 4:.2f}" font-size="10" '
                     f'text-anchor="middle">{values[name]:.3f}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def count_polylines(path) -> int:
    return Path(path).read_text().count("<polyline")
