"""Density grids, marching-squares contours and a minimal SVG writer."""

import csv
from dataclasses import dataclass

import numpy as np

from kercop.errors import InvalidParameterError
from kercop.model import density
from kercop.numcore import gaussian_cdf, gaussian_pdf

KINDS = ("surface", "contour", "norm_contour")
UNIT_RANGE = (0.01, 0.99)
NORMAL_RANGE = (-3.0, 3.0)
DEFAULT_RESOLUTION = 100
DEFAULT_LEVEL_FRACTIONS = np.arange(1, 10) / 10.0


@dataclass
class PlotSpec:
    kind: str = "contour"
    resolution: int = DEFAULT_RESOLUTION
    levels: list | None = None
    svg_path: str | None = None
    grid_csv_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"plot kind must be one of {', '.join(KINDS)}")
        if self.resolution < 2:
            raise InvalidParameterError("resolution must be at least 2")
        if self.levels is not None and not len(self.levels):
            raise InvalidParameterError("empty contour level set")
        if any(not lv > 0 for lv in self.levels or ()):
            raise InvalidParameterError("contour levels must be positive")


def density_grid(f, kind, resolution=DEFAULT_RESOLUTION):
    """Return axes ``x``, ``y`` and values ``g[i, j]`` at ``(x[i], y[j])``.

    For ``norm_contour`` the axes are on the standard normal scale and
    ``g = c(Phi(x), Phi(y)) phi(x) phi(y)``.
    """
    lo, hi = NORMAL_RANGE if kind == "norm_contour" else UNIT_RANGE
    ax = np.linspace(lo, hi, resolution)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    if kind == "norm_contour":
        pts = np.stack([gaussian_cdf(xx), gaussian_cdf(yy)], axis=-1)
        g = density(f, pts) * gaussian_pdf(xx) * gaussian_pdf(yy)
    else:
        g = density(f, np.stack([xx, yy], axis=-1))
    return ax, ax.copy(), g


def default_levels(g):
    return list(DEFAULT_LEVEL_FRACTIONS * float(np.max(g)))


# corner bits: 1 = (i, j), 2 = (i+1, j), 4 = (i+1, j+1), 8 = (i, j+1)
# edges: 0 bottom (i..i+1 at j), 1 right (i+1, j..j+1), 2 top (j+1), 3 left (i)
_CASES = {
    0: [], 15: [],
    1: [(3, 0)], 14: [(3, 0)],
    2: [(0, 1)], 13: [(0, 1)],
    3: [(3, 1)], 12: [(3, 1)],
    4: [(1, 2)], 11: [(1, 2)],
    6: [(0, 2)], 9: [(0, 2)],
    7: [(3, 2)], 8: [(3, 2)],
    5: [(3, 0), (1, 2)], 10: [(0, 1), (2, 3)],
}


def _edge_point(x, y, g, i, j, edge, level):
    if edge == 0:
        a, b = (i, j), (i + 1, j)
    elif edge == 1:
        a, b = (i + 1, j), (i + 1, j + 1)
    elif edge == 2:
        a, b = (i, j + 1), (i + 1, j + 1)
    else:
        a, b = (i, j), (i, j + 1)
    ga, gb = g[a], g[b]
    t = 0.5 if gb == ga else (level - ga) / (gb - ga)
    return (x[a[0]] + t * (x[b[0]] - x[a[0]]), y[a[1]] + t * (y[b[1]] - y[a[1]]))


def marching_squares(x, y, g, level):
    """Contour segments of `g` at `level` with linear edge interpolation.

    Returns a list of polylines (each a (k, 2) array); segments sharing
    endpoints are chained.
    """
    above = g >= level
    segs = []
    nx, ny = g.shape
    for i in range(nx - 1):
        for j in range(ny - 1):
            code = (
                int(above[i, j]) | int(above[i + 1, j]) << 1
                | int(above[i + 1, j + 1]) << 2 | int(above[i, j + 1]) << 3
            )
            cases = _CASES[code]
            if code in (5, 10):
                centre = 0.25 * (g[i, j] + g[i + 1, j] + g[i + 1, j + 1] + g[i, j + 1])
                if (centre >= level) != (code == 5):
                    cases = [(3, 2), (0, 1)] if code == 5 else [(3, 0), (1, 2)]
            for e1, e2 in cases:
                a = _edge_point(x, y, g, i, j, e1, level)
                b = _edge_point(x, y, g, i, j, e2, level)
                # a grid value exactly at the level gives zero-length pieces
                if _key(a) != _key(b):
                    segs.append((a, b))
    return _chain(segs)


def _key(p):
    return (round(p[0], 12), round(p[1], 12))


def _chain(segs):
    key = _key
    ends = {}
    for k, (a, b) in enumerate(segs):
        ends.setdefault(key(a), []).append(k)
        ends.setdefault(key(b), []).append(k)
    used = np.zeros(len(segs), dtype=bool)
    lines = []
    for k in range(len(segs)):
        if used[k]:
            continue
        used[k] = True
        line = [segs[k][0], segs[k][1]]
        for forward in (True, False):
            while True:
                tip = line[-1] if forward else line[0]
                nxt = next((c for c in ends.get(key(tip), []) if not used[c]), None)
                if nxt is None:
                    break
                used[nxt] = True
                a, b = segs[nxt]
                new = b if key(a) == key(tip) else a
                if forward:
                    line.append(new)
                else:
                    line.insert(0, new)
        lines.append(np.array(line))
    return lines


def write_grid_csv(path, x, y, g):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for i in range(len(x)):
            for j in range(len(y)):
                w.writerow([repr(float(x[i])), repr(float(y[j])), repr(float(g[i, j]))])


_PALETTE = ("#313695", "#4575b4", "#74add1", "#abd9e9", "#fdae61", "#f46d43", "#d73027", "#a50026")


def render_svg(x, y, g, kind, levels, width=480, height=480):
    """A standalone SVG 1.1 document: contour polylines (for every kind; a
    surface is rendered as a filled-level map), axes and a level legend."""
    levels = sorted(float(lv) for lv in levels)
    margin, legend_w = 50, 120
    pw, ph = width - 2 * margin, height - 2 * margin
    x0, x1, y0, y1 = x[0], x[-1], y[0], y[-1]

    def sx(v):
        return margin + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return margin + ph - (v - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width + legend_w}" height="{height}">',
        f'<rect x="0" y="0" width="{width + legend_w}" height="{height}" fill="white"/>',
    ]
    if kind == "surface":
        nx, ny = g.shape
        top = float(np.max(g)) or 1.0
        cw, ch = pw / (nx - 1), ph / (ny - 1)
        for i in range(nx - 1):
            for j in range(ny - 1):
                val = g[i : i + 2, j : j + 2].mean() / top
                col = _PALETTE[min(int(val * len(_PALETTE)), len(_PALETTE) - 1)]
                out.append(
                    f'<rect x="{sx(x[i]):.2f}" y="{sy(y[j + 1]):.2f}" width="{cw:.2f}" '
                    f'height="{ch:.2f}" fill="{col}" stroke="none"/>'
                )
    for k, lv in enumerate(levels):
        col = _PALETTE[k % len(_PALETTE)] if kind != "surface" else "black"
        for line in marching_squares(x, y, g, lv):
            pts = " ".join(f"{sx(px):.2f},{sy(py):.2f}" for px, py in line)
            out.append(f'<polyline class="level-{k}" points="{pts}" fill="none" stroke="{col}" stroke-width="1"/>')
    out.append(
        f'<rect x="{margin}" y="{margin}" width="{pw}" height="{ph}" fill="none" stroke="black"/>'
    )
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{sx(v):.2f}" y="{margin + ph + 16}" font-size="10" text-anchor="middle">{v:.2f}</text>')
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{margin - 6}" y="{sy(v) + 3:.2f}" font-size="10" text-anchor="end">{v:.2f}</text>')
    out.append(f'<g id="legend" transform="translate({width},{margin})">')
    out.append('<text x="0" y="0" font-size="11">levels</text>')
    for k, lv in enumerate(levels):
        col = _PALETTE[k % len(_PALETTE)] if kind != "surface" else "black"
        yy = 16 + 14 * k
        out.append(f'<line x1="0" y1="{yy - 4}" x2="14" y2="{yy - 4}" stroke="{col}"/>')
        out.append(f'<text class="legend-level" x="20" y="{yy}" font-size="10">{lv:.6g}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def make_plot(f, spec):
    """Evaluate the grid, write the requested outputs and return
    ``(x, y, g, levels)``."""
    x, y, g = density_grid(f, spec.kind, spec.resolution)
    levels = default_levels(g) if spec.levels is None else list(spec.levels)
    if spec.svg_path:
        with open(spec.svg_path, "w", encoding="utf-8") as fh:
            fh.write(render_svg(x, y, g, spec.kind, levels))
    if spec.grid_csv_path:
        write_grid_csv(spec.grid_csv_path, x, y, g)
    return x, y, g, sorted(levels)
