"""Dependency-free SVG line charts with confidence bands.

CSV outputs are the data contract; these charts are presentational. Each
series is a polyline with an optional shaded point-wise band.
"""

import math

PALETTE = (
    "#1b6ca8", "#d1495b", "#66a182", "#edae49", "#7d5ba6",
    "#00798c", "#8c5e58", "#3d405b", "#81b29a", "#c44536",
)


def _nice_ticks(lo, hi, target=5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo, hi = 0.0, 1.0
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    span = hi - lo
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 2.5, 5, 10):
        step = mult * mag
        if span / step <= target + 1:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * span:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _fmt_tick(v):
    if v == int(v):
        return str(int(v))
    return f"{v:g}"


class Panel:
    """One chart panel: series of (x, y) lines plus optional bands."""

    def __init__(self, title="", xlabel="", ylabel=""):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.series = []

    def add_series(self, label, x, y, band_low=None, band_high=None,
                   color=None, dashed=False):
        self.series.append({
            "label": label,
            "x": [float(v) for v in x],
            "y": [float(v) for v in y],
            "lo": None if band_low is None else [float(v) for v in band_low],
            "hi": None if band_high is None else [float(v) for v in band_high],
            "color": color,
            "dashed": dashed,
        })
        return self

    def _bounds(self):
        xs, ys = [], []
        for s in self.series:
            xs.extend(s["x"])
            ys.extend(s["y"])
            for key in ("lo", "hi"):
                if s[key] is not None:
                    ys.extend(s[key])
        if not xs:
            return 0.0, 1.0, 0.0, 1.0
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        pad = 0.05 * (y1 - y0 or 1.0)
        return x0, x1, y0 - pad, y1 + pad


def _render_panel(panel, ox, oy, width, height):
    ml, mr, mt, mb = 52, 10, 24, 36
    pw = width - ml - mr
    ph = height - mt - mb
    x0, x1, y0, y1 = panel._bounds()

    def sx(v):
        return ox + ml + (v - x0) / (x1 - x0 or 1.0) * pw

    def sy(v):
        return oy + mt + ph - (v - y0) / (y1 - y0 or 1.0) * ph

    out = []
    out.append(f'<rect x="{ox + ml}" y="{oy + mt}" width="{pw}" height="{ph}" '
               'fill="white" stroke="#999" stroke-width="1"/>')
    for tv in _nice_ticks(x0, x1):
        if tv < x0 - 1e-12 or tv > x1 + 1e-12:
            continue
        px = sx(tv)
        out.append(f'<line x1="{px:.2f}" y1="{oy + mt + ph}" x2="{px:.2f}" '
                   f'y2="{oy + mt + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{px:.2f}" y="{oy + mt + ph + 16}" '
                   f'font-size="10" text-anchor="middle">{_fmt_tick(tv)}</text>')
    for tv in _nice_ticks(y0, y1):
        if tv < y0 - 1e-12 or tv > y1 + 1e-12:
            continue
        py = sy(tv)
        out.append(f'<line x1="{ox + ml - 4}" y1="{py:.2f}" x2="{ox + ml}" '
                   f'y2="{py:.2f}" stroke="#333"/>')
        out.append(f'<text x="{ox + ml - 7}" y="{py + 3:.2f}" font-size="10" '
                   f'text-anchor="end">{_fmt_tick(tv)}</text>')
        out.append(f'<line x1="{ox + ml}" y1="{py:.2f}" x2="{ox + ml + pw}" '
                   f'y2="{py:.2f}" stroke="#eee"/>')

    for i, s in enumerate(panel.series):
        color = s["color"] or PALETTE[i % len(PALETTE)]
        if s["lo"] is not None and s["hi"] is not None:
            pts = [f"{sx(x):.2f},{sy(v):.2f}" for x, v in zip(s["x"], s["hi"])]
            pts += [f"{sx(x):.2f},{sy(v):.2f}"
                    for x, v in zip(reversed(s["x"]), reversed(s["lo"]))]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" '
                       'fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{sx(x):.2f},{sy(v):.2f}"
                       for x, v in zip(s["x"], s["y"]))
        dash = ' stroke-dasharray="5,4"' if s["dashed"] else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.6"{dash}/>')

    if panel.title:
        out.append(f'<text x="{ox + ml + pw / 2:.2f}" y="{oy + 14}" '
                   f'font-size="12" font-weight="bold" '
                   f'text-anchor="middle">{panel.title}</text>')
    if panel.xlabel:
        out.append(f'<text x="{ox + ml + pw / 2:.2f}" y="{oy + mt + ph + 30}" '
                   f'font-size="11" text-anchor="middle">{panel.xlabel}</text>')
    if panel.ylabel:
        cx, cy = ox + 13, oy + mt + ph / 2
        out.append(f'<text x="{cx}" y="{cy:.2f}" font-size="11" '
                   f'text-anchor="middle" '
                   f'transform="rotate(-90 {cx} {cy:.2f})">{panel.ylabel}</text>')
    return out


def _render_legend(labels_colors, ox, oy):
    out = []
    x = ox
    for label, color, dashed in labels_colors:
        dash = ' stroke-dasharray="5,4"' if dashed else ""
        out.append(f'<line x1="{x}" y1="{oy}" x2="{x + 18}" y2="{oy}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{x + 22}" y="{oy + 4}" font-size="11">{label}</text>')
        x += 22 + 7 * len(label) + 24
    return out


def write_chart(path, panels, ncols=2, panel_width=430, panel_height=300):
    """Write one or more panels plus a shared legend to an SVG file."""
    if isinstance(panels, Panel):
        panels = [panels]
    n = len(panels)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols

    legend = []
    seen = set()
    for p in panels:
        for i, s in enumerate(p.series):
            color = s["color"] or PALETTE[i % len(PALETTE)]
            if s["label"] and s["label"] not in seen:
                seen.add(s["label"])
                legend.append((s["label"], color, s["dashed"]))

    legend_h = 26 if legend else 0
    width = ncols * panel_width
    height = nrows * panel_height + legend_h
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}" '
           'font-family="Helvetica, Arial, sans-serif">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, p in enumerate(panels):
        r, c = divmod(i, ncols)
        out.extend(_render_panel(p, c * panel_width, r * panel_height,
                                 panel_width, panel_height))
    if legend:
        out.extend(_render_legend(legend, 16, nrows * panel_height + 14))
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))
        fh.write("\n")
