"""Tables (CSV, aligned text), JSON summaries and SVG heatmaps for sweep results.

Every writer is a pure function of the result, so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Any, Mapping, Sequence

from .scenario import SweepResult

INFEASIBLE_FILL = "#bfbfbf"
# Light-to-dark blue ramp; every channel decreases with the value.
RAMP_LOW = (247, 251, 255)
RAMP_HIGH = (8, 48, 107)


class GridError(ValueError):
    pass


def _is_speedup(name: str) -> bool:
    return "speedup" in name or "bound" in name


def format_value(name: str, value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if _is_speedup(name):
            s = f"{value:#.3g}"
            return s.rstrip(".")
        if name.endswith("_s"):
            return f"{value:.1f}"
        return f"{value:.4g}"
    return str(value)


def table_rows(result: SweepResult) -> tuple[list[str], list[list[str]]]:
    if not result.cells:
        raise ValueError("empty sweep result")
    axes = result.axis_names
    fields = result.value_fields()
    header = list(axes) + ["feasible"] + fields + ["reason"]
    rows = []
    for c in result.cells:
        row = [format_value(a, c.coords.get(a)) for a in axes]
        row.append("yes" if c.feasible else "no")
        row += [format_value(f, c.values.get(f)) for f in fields]
        row.append(c.reason)
        rows.append(row)
    return header, rows


def render_csv(result: SweepResult) -> str:
    header, rows = table_rows(result)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        cells = [str(v).ljust(w) if i == 0 else str(v).rjust(w) for i, (v, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def render_text(result: SweepResult) -> str:
    if result.spec.kind == "stage_replay":
        return render_stage_table(result)
    header, rows = table_rows(result)
    return _aligned(header, rows)


STAGE_ROWS = [("Data", "data_s"), ("Prepare", "prepare_s"), ("Generation", "gen_s"),
              ("Logprob", "logprob_s"), ("Training", "train_s")]


def render_stage_table(result: SweepResult) -> str:
    """Stage rows by workload AR/Spec columns, plus total, generation share and speedup."""
    header = ["Stage"]
    for c in result.cells:
        w = c.coords.get("workload", "")
        header += [f"{w} AR", f"{w} Spec"]
    rows = []
    for label, key in STAGE_ROWS:
        row = [label]
        for c in result.cells:
            row += [format_value("x_s", c.values[f"ar_{key}"]), format_value("x_s", c.values[f"spec_{key}"])]
        rows.append(row)
    total = ["Total"]
    share = ["Generation share"]
    speed = ["Step speedup"]
    for c in result.cells:
        total += [format_value("x_s", c.values["ar_total_s"]), format_value("x_s", c.values["spec_total_s"])]
        share += [f"{c.values['generation_share']:.3f}", ""]
        speed += ["", f"{c.values['step_speedup']:.3f}"]
    rows += [total, share, speed]
    return _aligned(header, rows)


def write_table(result: SweepResult, path: str | Path, fmt: str = "csv") -> Path:
    path = Path(path)
    text = render_csv(result) if fmt == "csv" else render_text(result)
    path.write_text(text)
    return path


def write_summary(result: SweepResult, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(result.summary_json())
    return path


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


def ramp_color(t: float) -> str:
    t = min(1.0, max(0.0, t))
    rgb = [round(lo + (hi - lo) * t) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _grid(result: SweepResult, x_axis: str, y_axis: str, where: Mapping[str, Any] | None = None):
    cells = {}
    selected = [c for c in result.cells if all(c.coords.get(k) == v for k, v in (where or {}).items())]
    if not selected:
        raise GridError(f"no cells match {dict(where or {})}")
    for c in selected:
        if x_axis not in c.coords or y_axis not in c.coords:
            raise GridError(f"cells lack axis {x_axis!r} or {y_axis!r}")
        key = (c.coords[x_axis], c.coords[y_axis])
        if key in cells:
            raise GridError(f"axes {x_axis} x {y_axis} do not factor the grid (duplicate cell {key})")
        cells[key] = c
    xs = sorted({k[0] for k in cells})
    ys = sorted({k[1] for k in cells})
    if len(cells) != len(xs) * len(ys):
        raise GridError(f"axes {x_axis} x {y_axis} do not factor the grid (missing cells)")
    return xs, ys, cells


def render_heatmap(result: SweepResult, x_axis: str, y_axis: str, value_field: str,
                   title: str | None = None, where: Mapping[str, Any] | None = None) -> str:
    """SVG heatmap of ``value_field``; ``where`` pins the remaining axes."""
    xs, ys, cells = _grid(result, x_axis, y_axis, where)
    vals = [c.values[value_field] for c in cells.values() if c.feasible and value_field in c.values]
    vmin, vmax = (min(vals), max(vals)) if vals else (0.0, 1.0)
    span = vmax - vmin if vmax > vmin else 1.0
    cw, ch, left, top = 56, 36, 90, 48
    width = left + cw * len(xs) + 20
    height = top + ch * len(ys) + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f"<!-- value: {value_field}; x: {x_axis}; y: {y_axis}; where: {dict(where or {})} -->",
        f"<!-- color ramp: linear RGB from {ramp_color(0)} at min={vmin:.6g} to {ramp_color(1)} "
        f"at max={vmax:.6g}; each channel decreases with the value, so a higher value is never lighter -->",
        f"<!-- gray {INFEASIBLE_FILL}: infeasible cell, no value emitted -->",
        f'<text x="{left}" y="20" font-size="14">{title or value_field}</text>',
    ]
    for j, y in enumerate(ys):
        cy = top + j * ch
        out.append(f'<text x="{left - 8}" y="{cy + ch / 2 + 4:.1f}" text-anchor="end">{y}</text>')
        for i, x in enumerate(xs):
            c = cells[(x, y)]
            cx = left + i * cw
            if c.feasible and value_field in c.values:
                v = c.values[value_field]
                t = (v - vmin) / span
                fill, label = ramp_color(t), format_value(value_field, float(v))
                ink = "#ffffff" if t > 0.5 else "#000000"
            else:
                fill, label, ink = INFEASIBLE_FILL, "", "#000000"
            out.append(f'<rect x="{cx}" y="{cy}" width="{cw}" height="{ch}" fill="{fill}" '
                       f'stroke="#ffffff" data-x="{x}" data-y="{y}" data-feasible="{int(c.feasible)}"/>')
            if label:
                out.append(f'<text x="{cx + cw / 2:.1f}" y="{cy + ch / 2 + 4:.1f}" '
                           f'text-anchor="middle" fill="{ink}">{label}</text>')
    for i, x in enumerate(xs):
        out.append(f'<text x="{left + i * cw + cw / 2:.1f}" y="{top + len(ys) * ch + 16}" '
                   f'text-anchor="middle">{x}</text>')
    out.append(f'<text x="{left + cw * len(xs) / 2:.1f}" y="{top + len(ys) * ch + 36}" '
               f'text-anchor="middle">{x_axis}</text>')
    out.append(f'<text x="14" y="{top + ch * len(ys) / 2:.1f}" '
               f'transform="rotate(-90 14 {top + ch * len(ys) / 2:.1f})" text-anchor="middle">{y_axis}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap(result: SweepResult, x_axis: str, y_axis: str, value_field: str,
                  path: str | Path, title: str | None = None, where: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.write_text(render_heatmap(result, x_axis, y_axis, value_field, title, where))
    return path
