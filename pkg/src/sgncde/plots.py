"""Static SVG line charts (no plotting dependency)."""

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _ticks(lo, hi, n=5):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return np.array([0.0])
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def _panel(x0, y0, w, h, title, series, xlabel, ylabel, marker_x=None):
    """One chart panel as a list of SVG elements; ``series`` is ``[(label, x, y, dashed)]``."""
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    ys = ys[np.isfinite(ys)]
    xlo, xhi = float(xs.min()), float(xs.max())
    ylo, yhi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if yhi - ylo < 1e-12:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    if xhi - xlo < 1e-12:
        xhi = xlo + 1.0
    pad_l, pad_b, pad_t = 60, 40, 28
    pw, ph = w - pad_l - 15, h - pad_b - pad_t

    def sx(v):
        return x0 + pad_l + (v - xlo) / (xhi - xlo) * pw

    def sy(v):
        return y0 + pad_t + ph - (v - ylo) / (yhi - ylo) * ph

    out = [f'<rect x="{x0 + pad_l}" y="{y0 + pad_t}" width="{pw}" height="{ph}" '
           'fill="none" stroke="#888"/>',
           f'<text x="{x0 + pad_l + pw / 2}" y="{y0 + 18}" text-anchor="middle" '
           f'font-size="13">{escape(title)}</text>',
           f'<text x="{x0 + pad_l + pw / 2}" y="{y0 + h - 6}" text-anchor="middle" '
           f'font-size="11">{escape(xlabel)}</text>',
           f'<text x="{x0 + 12}" y="{y0 + pad_t + ph / 2}" font-size="11" text-anchor="middle" '
           f'transform="rotate(-90 {x0 + 12} {y0 + pad_t + ph / 2})">{escape(ylabel)}</text>']
    for v in _ticks(xlo, xhi):
        out.append(f'<text x="{sx(v):.1f}" y="{y0 + pad_t + ph + 14}" font-size="9" '
                   f'text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(ylo, yhi):
        out.append(f'<text x="{x0 + pad_l - 4}" y="{sy(v) + 3:.1f}" font-size="9" '
                   f'text-anchor="end">{v:.3g}</text>')
    if marker_x is not None and xlo <= marker_x <= xhi:
        out.append(f'<line x1="{sx(marker_x):.1f}" y1="{y0 + pad_t}" x2="{sx(marker_x):.1f}" '
                   f'y2="{y0 + pad_t + ph}" stroke="#aaa" stroke-dasharray="3,3"/>')
    for i, (label, x, y, dashed) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{x0 + pad_l + pw - 4}" y="{y0 + pad_t + 12 + 12 * i}" '
                   f'font-size="10" text-anchor="end" fill="{color}">{escape(label)}</text>')
    return out


def svg_figure(panels, width=720, panel_height=240):
    """Stack panels vertically. Each panel is a dict of :func:`_panel` arguments."""
    height = panel_height * len(panels)
    body = []
    for i, p in enumerate(panels):
        body += _panel(0, i * panel_height, width, panel_height, p["title"], p["series"],
                       p.get("xlabel", ""), p.get("ylabel", ""), p.get("marker_x"))
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            '<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")
