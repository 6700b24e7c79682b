"""Minimal standalone SVG line and scatter plots (paths and text only)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=64, right=150, top=36, bottom=48)


class PlotError(ValueError):
    """The requested plot lacks the series it needs."""


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    style: str = "line"  # "line" | "points"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.x.size == 0 or self.x.size != self.y.size:
            raise PlotError(f"series {self.label!r} is empty or has mismatched x/y")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise PlotError(f"series {self.label!r} has non-finite values")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_svg(series: list[Series], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    if not series:
        raise PlotError("nothing to plot")
    xs = np.concatenate([s.x for s in series])
    ys = np.concatenate([s.y for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]
    left, bottom = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<path d="M{left},{MARGIN["top"]} V{bottom} H{left + pw}" stroke="black" fill="none"/>')
    for t in _ticks(x0, x1):
        out.append(f'<path d="M{px(t):.2f},{bottom} v5" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{bottom + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<path d="M{left},{py(t):.2f} h-5" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.style == "points":
            d = " ".join(f"M{px(a):.2f},{py(b):.2f} m-2,0 a2,2 0 1,0 4,0 a2,2 0 1,0 -4,0" for a, b in zip(s.x, s.y))
            out.append(f'<path d="{d}" fill="{color}" fill-opacity="0.6" stroke="none"/>')
        else:
            order = np.argsort(s.x, kind="stable")
            d = "M" + " L".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(s.x[order], s.y[order]))
            out.append(f'<path d="{d}" stroke="{color}" stroke-width="2" fill="none"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<path d="M{lx},{ly - 4} h18" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}" font-family="sans-serif" font-size="11">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series: list[Series], **labels) -> Path:
    """Render first, then write, so a failed plot leaves no file behind."""
    text = render_svg(series, **labels)
    path = Path(path)
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# plots of experiment results


def _first_run_with(result, key: str, a2=None) -> dict:
    for r in result.runs:
        extra = r.get("extra") or {}
        if key in extra and (a2 is None or r["a2"] == a2):
            return r
    raise PlotError(f"no run in this result carries the {key!r} series")


def variance_series(result, a2=None) -> list[Series]:
    run = _first_run_with(result, "true_variance", a2)
    e = run["extra"]
    series = [Series("true variance", e["x"], e["true_variance"])]
    for key, label in (("va_variance", "VA estimate"), ("dva_variance", "DVA estimate")):
        if key in e:
            series.append(Series(label, e["x"], e[key]))
    if len(series) == 1:
        raise PlotError("run has no estimated variance series")
    return series


def estimate_series(result) -> list[Series]:
    from .experiments import aggregate

    agg = aggregate(result.rows)
    if not agg:
        raise PlotError("result has no rows")
    series = []
    for method in sorted({a["method"] for a in agg}):
        pts = [a for a in agg if a["method"] == method]
        series.append(Series(method, [a["a2"] for a in pts], [a["estimate_mean"] for a in pts]))
    a2 = sorted({a["a2"] for a in agg})
    series.append(Series("true a2", a2, a2))
    return series


def denoise_series(result, a2=None) -> list[Series]:
    from .synthdata import target_fn

    run = _first_run_with(result, "scatter", a2)
    sc = run["extra"]["scatter"]
    grid = np.linspace(min(sc["x"]), max(sc["x"]), 200)
    return [
        Series("noisy", sc["x"], sc["noisy"], "points"),
        Series("denoised", sc["x"], sc["denoised"], "points"),
        Series("true curve", grid, target_fn(grid)),
    ]


def emit_plot(result, kind: str, path, a2=None) -> Path:
    """Write one of the standard plots of an experiment result to ``path``."""
    if kind == "variance-vs-x":
        return write_svg(path, variance_series(result, a2), title="Noise variance", xlabel="x", ylabel="variance")
    if kind == "estimate-vs-a2":
        return write_svg(path, estimate_series(result), title="Estimated noise variance", xlabel="a2", ylabel="estimate")
    if kind == "denoise-scatter":
        return write_svg(path, denoise_series(result, a2), title="Denoised labels", xlabel="x", ylabel="y")
    raise PlotError(f"unknown plot kind {kind!r}")
