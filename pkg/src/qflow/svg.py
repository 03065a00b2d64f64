"""Minimal SVG writers for scatter plots, heatmaps and quiver fields."""

from __future__ import annotations

from html import escape

import numpy as np

# viridis anchors
_ANCHORS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=np.float64)


def colormap(values, lo=None, hi=None) -> list[str]:
    v = np.asarray(values, dtype=np.float64)
    lo = float(np.min(v)) if lo is None else lo
    hi = float(np.max(v)) if hi is None else hi
    t = np.clip((v - lo) / (hi - lo), 0, 1) if hi > lo else np.zeros_like(v)
    pos = t * (len(_ANCHORS) - 1)
    i = np.minimum(pos.astype(int), len(_ANCHORS) - 2)
    f = (pos - i)[..., None]
    rgb = (_ANCHORS[i] * (1 - f) + _ANCHORS[i + 1] * f).round().astype(int)
    return ["#%02x%02x%02x" % tuple(c) for c in rgb.reshape(-1, 3)]


def _frame(size: int, title: str, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" '
            f'viewBox="0 0 {size} {size + 24}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>',
                      f'<text x="{size / 2}" y="16" font-size="13" text-anchor="middle" '
                      f'font-family="sans-serif">{escape(title)}</text>', *body, "</svg>\n"])


def _to_px(p, size, bounds):
    lo, hi = bounds
    x = (p[:, 0] - lo) / (hi - lo) * size
    y = 24 + (hi - p[:, 1]) / (hi - lo) * size
    return x, y


def scatter_svg(points, values=None, title="", size=480, bounds=(-1.2, 1.2), background=None, radius=1.6) -> str:
    body = []
    if background is not None:
        bx, by = _to_px(np.asarray(background), size, bounds)
        body += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1" fill="#d0d0d0"/>' for a, b in zip(bx, by)]
    pts = np.asarray(points)
    x, y = _to_px(pts, size, bounds)
    cols = colormap(values, 0.0, 1.0) if values is not None else ["#1f4e9c"] * len(pts)
    body += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{radius}" fill="{c}"/>' for a, b, c in zip(x, y, cols)]
    return _frame(size, title, body)


def heatmap_svg(values, title="", size=480) -> str:
    """``values[i, j]`` at row ``i`` (y ascending) and column ``j`` (x ascending)."""
    v = np.asarray(values)
    r, c = v.shape
    cols = colormap(v)
    cw, ch = size / c, size / r
    body = []
    for i in range(r):
        for j in range(c):
            y = 24 + (r - 1 - i) * ch
            body.append(f'<rect x="{j * cw:.2f}" y="{y:.2f}" width="{cw + 0.3:.2f}" height="{ch + 0.3:.2f}" '
                        f'fill="{cols[i * c + j]}"/>')
    return _frame(size, title, body)


def quiver_svg(xs, ys, grads, title="", size=480, bounds=(-1.0, 1.0)) -> str:
    g = np.asarray(grads)
    mag = np.linalg.norm(g, axis=-1)
    scale = 0.8 * (xs[1] - xs[0]) / mag.max() if mag.max() > 0 else 0.0
    body = []
    for i, yv in enumerate(ys):
        for j, xv in enumerate(xs):
            p = np.array([[xv, yv], [xv + scale * g[i, j, 0], yv + scale * g[i, j, 1]]])
            px, py = _to_px(p, size, bounds)
            body.append(f'<line x1="{px[0]:.2f}" y1="{py[0]:.2f}" x2="{px[1]:.2f}" y2="{py[1]:.2f}" '
                        f'stroke="#333" stroke-width="1"/>')
    return _frame(size, title, body)
