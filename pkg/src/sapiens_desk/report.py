"""Render delimited result tables into self-contained SVG charts.

Chart type is picked from the header: metric tables become labeled bar
charts, two-column bin/count tables become histograms, and anything whose
first column is a numeric axis (step, ratio, ...) becomes a line chart with
one series per remaining column. Text is converted to paths and the SVG
carries no timestamp, so identical tables render to identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import fileio  # noqa: E402
from .errors import IOFailureError  # noqa: E402

__all__ = ["render_chart", "render_all"]

_STYLE = {
    "svg.fonttype": "path",     # embed glyph outlines, no font references
    "svg.hashsalt": "fixed",    # stable internal ids
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _save(fig, out_path) -> None:
    fig.savefig(out_path, format="svg", metadata={"Date": None},
                bbox_inches="tight")
    plt.close(fig)


def render_chart(csv_path, out_path) -> Path:
    header, rows = fileio.read_csv(csv_path)
    if not rows:
        raise IOFailureError(f"{csv_path}: no data rows")
    out_path = Path(out_path)
    with plt.rc_context(_STYLE):
        if header[:3] == ["task", "metric", "value"]:
            fig, ax = plt.subplots()
            labels = [r[1] for r in rows]
            values = [float(r[2]) for r in rows]
            ax.bar(range(len(rows)), values, color="#4878d0")
            ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right")
            ax.set_ylabel("value")
            ax.set_title(rows[0][0])
            _save(fig, out_path)
        elif len(header) == 2 and not all(_is_number(r[0]) for r in rows):
            # bin/count style table; bin labels need not all be numeric
            fig, ax = plt.subplots()
            ax.bar(range(len(rows)), [float(r[1]) for r in rows],
                   color="#6acc64")
            ax.set_xticks(range(len(rows)), [r[0] for r in rows])
            ax.set_xlabel(header[0])
            ax.set_ylabel(header[1])
            _save(fig, out_path)
        elif all(_is_number(r[0]) for r in rows):
            fig, ax = plt.subplots()
            xs = [float(r[0]) for r in rows]
            for col in range(1, len(header)):
                ys = [float(r[col]) if r[col] != "" else float("nan")
                      for r in rows]
                ax.plot(xs, ys, label=header[col])
            ax.set_xlabel(header[0])
            if len(header) > 2:
                ax.legend()
            else:
                ax.set_ylabel(header[1])
            _save(fig, out_path)
        else:
            raise IOFailureError(f"{csv_path}: no chart rule for header {header}")
    return out_path


def render_all(csv_paths, out_dir, overwrite: bool = False) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for csv_path in csv_paths:
        target = out_dir / (Path(csv_path).stem + ".svg")
        fileio.ensure_fresh(target, overwrite)
        outputs.append(render_chart(csv_path, target))
    return outputs
