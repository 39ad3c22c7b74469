"""Deterministic SVG plots plus the plotted series as CSV.

The SVG is written by hand (fixed canvas, no timestamps, no generated ids)
so that identical inputs produce byte-identical files and plots stay
diffable in version control.
"""

from __future__ import annotations

import csv
import os

from .errors import ValidationError
from .pipeline import read_json

WIDTH, HEIGHT = 800, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 160, 30, 50

PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]

PLOT_KINDS = ("capacity", "predictions", "features")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


class SvgCanvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" font-size="15" '
            f'font-family="sans-serif">{title}</text>',
        ]
        self.xlim = xlim
        self.ylim = ylim
        self._axes(xlabel, ylabel)

    def _sx(self, x: float) -> float:
        lo, hi = self.xlim
        span = (hi - lo) or 1.0
        return MARGIN_L + (x - lo) / span * (WIDTH - MARGIN_L - MARGIN_R)

    def _sy(self, y: float) -> float:
        lo, hi = self.ylim
        span = (hi - lo) or 1.0
        return HEIGHT - MARGIN_B - (y - lo) / span * (HEIGHT - MARGIN_T - MARGIN_B)

    def _axes(self, xlabel: str, ylabel: str) -> None:
        x0, x1 = MARGIN_L, WIDTH - MARGIN_R
        y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
        self.parts.append(
            f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" stroke="black" fill="none"/>'
        )
        for frac in (0.0, 0.5, 1.0):
            xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
            yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
            self.parts.append(
                f'<text x="{_fmt(self._sx(xv))}" y="{y0 + 18}" text-anchor="middle" '
                f'font-size="11" font-family="sans-serif">{_fmt(xv)}</text>'
            )
            self.parts.append(
                f'<text x="{x0 - 8}" y="{_fmt(self._sy(yv) + 4)}" text-anchor="end" '
                f'font-size="11" font-family="sans-serif">{_fmt(yv)}</text>'
            )
        self.parts.append(
            f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 10}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{xlabel}</text>'
        )
        self.parts.append(
            f'<text x="18" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 18 {(y0 + y1) // 2})">{ylabel}</text>'
        )

    def polyline(self, xs, ys, color: str, label: str, index: int, dashed: bool = False) -> None:
        points = " ".join(f"{_fmt(self._sx(x))},{_fmt(self._sy(y))}" for x, y in zip(xs, ys))
        dash = ' stroke-dasharray="6 3"' if dashed else ""
        self.parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>'
        )
        ly = MARGIN_T + 16 + 16 * index
        lx = WIDTH - MARGIN_R + 10
        self.parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" stroke="{color}" '
            f'stroke-width="2"{dash}/>'
        )
        self.parts.append(
            f'<text x="{lx + 28}" y="{ly}" font-size="11" font-family="sans-serif">{label}</text>'
        )

    def vline(self, x: float, color: str = "#999999") -> None:
        sx = _fmt(self._sx(x))
        self.parts.append(
            f'<line x1="{sx}" y1="{MARGIN_T}" x2="{sx}" y2="{HEIGHT - MARGIN_B}" '
            f'stroke="{color}" stroke-dasharray="3 3"/>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _limits(values):
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([("" if v is None else repr(float(v)) if isinstance(v, float) else v) for v in row])


def _series_of(stage: dict, kind: str):
    if kind == "source":
        rows = [(p[0], p[1], p[2]) for p in stage["train_pairs"] + stage["test_pairs"]]
        boundary = stage["train_pairs"][-1][0] if stage["train_pairs"] else None
    else:
        rows = [(p[0], p[1], p[2]) for p in stage["pairs"]]
        boundary = None
    rows.sort(key=lambda r: r[0])
    return rows, boundary


def plot_predictions(report_path, out_dir) -> list[str]:
    report = read_json(report_path)
    written = []
    for stage in report["stages"]:
        rows, boundary = _series_of(stage, report["kind"])
        if not rows:
            continue
        sid = stage["stage_id"]
        cycles = [r[0] for r in rows]
        truths = [r[1] for r in rows if r[1] is not None]
        preds = [r[2] for r in rows]
        canvas = SvgCanvas(
            title=f"{report['battery_id']} stage {sid}: capacity estimate vs truth",
            xlabel="cycle",
            ylabel="capacity (Ah)",
            xlim=_limits(cycles),
            ylim=_limits(truths + preds if truths else preds),
        )
        truth_rows = [(r[0], r[1]) for r in rows if r[1] is not None]
        if truth_rows:
            canvas.polyline([r[0] for r in truth_rows], [r[1] for r in truth_rows],
                            PALETTE[0], "truth", 0)
        canvas.polyline(cycles, preds, PALETTE[1], "prediction", 1, dashed=True)
        if boundary is not None:
            canvas.vline(boundary)
        base = os.path.join(out_dir, f"predictions_stage{sid}")
        with open(base + ".svg", "w", encoding="utf-8") as fh:
            fh.write(canvas.render())
        _write_csv(base + ".csv", ["cycle_index", "truth_ah", "prediction_ah"],
                   [(r[0], r[1], r[2]) for r in rows])
        written += [base + ".svg", base + ".csv"]
    if not written:
        raise ValidationError("report holds no predicted cycles to plot")
    return written


def plot_capacity(report_path, out_dir) -> list[str]:
    report = read_json(report_path)
    rows = []
    for stage in report["stages"]:
        series, _ = _series_of(stage, report["kind"])
        rows += [(c, t) for c, t, _ in series if t is not None]
    rows.sort(key=lambda r: r[0])
    if not rows:
        raise ValidationError("report holds no labeled cycles to plot")
    canvas = SvgCanvas(
        title=f"{report['battery_id']}: capacity fade",
        xlabel="cycle",
        ylabel="capacity (Ah)",
        xlim=_limits([r[0] for r in rows]),
        ylim=_limits([r[1] for r in rows]),
    )
    canvas.polyline([r[0] for r in rows], [r[1] for r in rows], PALETTE[0], "capacity", 0)
    base = os.path.join(out_dir, "capacity")
    with open(base + ".svg", "w", encoding="utf-8") as fh:
        fh.write(canvas.render())
    _write_csv(base + ".csv", ["cycle_index", "capacity_ah"], rows)
    return [base + ".svg", base + ".csv"]


def plot_features(components_path, out_dir) -> list[str]:
    components = read_json(components_path)
    written = []
    for stage_id in sorted(components, key=int):
        doc = components[stage_id]
        cycles = doc["cycle_indices"]
        cons = doc["consistency"]
        disc = doc["discrepancy"]
        values = [v for row in cons for v in row] + [v for row in disc for v in row]
        canvas = SvgCanvas(
            title=f"stage {stage_id}: per-cycle feature averages "
            f"({len(cons[0])} consistency + {len(disc[0])} discrepancy)",
            xlabel="cycle",
            ylabel="feature value",
            xlim=_limits(cycles),
            ylim=_limits(values),
        )
        for j in range(len(cons[0])):
            canvas.polyline(cycles, [row[j] for row in cons], PALETTE[j % len(PALETTE)],
                            f"S_s[{j}]", j)
        for j in range(len(disc[0])):
            canvas.polyline(cycles, [row[j] for row in disc],
                            PALETTE[(len(cons[0]) + j) % len(PALETTE)],
                            f"S_d[{j}]", len(cons[0]) + j, dashed=True)
        if doc.get("n_train"):
            canvas.vline(cycles[doc["n_train"] - 1])
        base = os.path.join(out_dir, f"features_stage{stage_id}")
        with open(base + ".svg", "w", encoding="utf-8") as fh:
            fh.write(canvas.render())
        header = (
            ["cycle_index"]
            + [f"consistency_{j}" for j in range(len(cons[0]))]
            + [f"discrepancy_{j}" for j in range(len(disc[0]))]
        )
        _write_csv(
            base + ".csv",
            header,
            [[c] + [float(v) for v in cons[i]] + [float(v) for v in disc[i]] for i, c in enumerate(cycles)],
        )
        written += [base + ".svg", base + ".csv"]
    return written


def make_plots(kind: str, input_path, out_dir) -> list[str]:
    if kind not in PLOT_KINDS:
        raise ValidationError(f"unknown plot kind {kind!r}; supported: {', '.join(PLOT_KINDS)}")
    os.makedirs(out_dir, exist_ok=True)
    if kind == "predictions":
        return plot_predictions(input_path, out_dir)
    if kind == "capacity":
        return plot_capacity(input_path, out_dir)
    return plot_features(input_path, out_dir)
