"""Deterministic SVG line plots.

Hand-rolled rather than delegated to a plotting library so that identical
inputs produce byte-identical files (diffable artifacts); fixed canvas,
fixed tick policy, no timestamps or generated ids.
"""

import math

W, H = 640, 420
ML, MR, MT, MB = 70, 20, 20, 50


def _ticks(lo, hi, target=5):
    """Nice tick positions covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / target))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if span / (step * mult) <= target + 1:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out


def _fmt(v):
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.6g}"


def line_plot(path, series, xlabel="", ylabel="", title="", vlines=(), hlines=()):
    """Write a multi-series line plot.

    series: list of (label, xs, ys, color); vlines/hlines: [(value, label)].
    """
    xs_all = [x for _, xs, _, _ in series for x in xs]
    ys_all = [y for _, _, ys, _ in series for y in ys]
    if not xs_all:
        xlo, xhi, ylo, yhi = 0.0, 1.0, 0.0, 1.0
    else:
        xlo, xhi = min(xs_all), max(xs_all)
        ylo, yhi = min(ys_all), max(ys_all)
        for v, _ in vlines:
            xlo, xhi = min(xlo, v), max(xhi, v)
        for v, _ in hlines:
            ylo, yhi = min(ylo, v), max(yhi, v)
        if xhi == xlo:
            xhi = xlo + 1.0
        if yhi == ylo:
            yhi = ylo + 1.0
        pad = 0.04
        xlo, xhi = xlo - pad * (xhi - xlo), xhi + pad * (xhi - xlo)
        ylo, yhi = ylo - pad * (yhi - ylo), yhi + pad * (yhi - ylo)

    def X(x):
        return ML + (x - xlo) / (xhi - xlo) * (W - ML - MR)

    def Y(y):
        return H - MB - (y - ylo) / (yhi - ylo) * (H - MT - MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" '
        'fill="none" stroke="black" stroke-width="1"/>',
    ]
    for tx in _ticks(xlo, xhi):
        px = X(tx)
        parts.append(f'<line x1="{px:.2f}" y1="{H - MB}" x2="{px:.2f}" y2="{H - MB + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.2f}" y="{H - MB + 18}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{_fmt(tx)}</text>')
    for ty in _ticks(ylo, yhi):
        py = Y(ty)
        parts.append(f'<line x1="{ML - 5}" y1="{py:.2f}" x2="{ML}" y2="{py:.2f}" stroke="black"/>')
        parts.append(f'<text x="{ML - 8}" y="{py + 4:.2f}" font-size="11" '
                     f'text-anchor="end" font-family="sans-serif">{_fmt(ty)}</text>')
    for v, label in hlines:
        py = Y(v)
        parts.append(f'<line x1="{ML}" y1="{py:.2f}" x2="{W - MR}" y2="{py:.2f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
        if label:
            parts.append(f'<text x="{W - MR - 4}" y="{py - 4:.2f}" font-size="11" '
                         f'text-anchor="end" font-family="sans-serif">{label}</text>')
    for v, label in vlines:
        px = X(v)
        parts.append(f'<line x1="{px:.2f}" y1="{MT}" x2="{px:.2f}" y2="{H - MB}" '
                     'stroke="crimson" stroke-dasharray="5 3"/>')
        if label:
            parts.append(f'<text x="{px + 4:.2f}" y="{MT + 14}" font-size="11" '
                         f'font-family="sans-serif" fill="crimson">{label}</text>')
    for li, (label, xs, ys, color) in enumerate(series):
        if len(xs):
            pts = " ".join(f"{X(x):.2f},{Y(y):.2f}" for x, y in zip(xs, ys))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if label:
            ly = MT + 14 + 15 * li
            parts.append(f'<line x1="{W - MR - 120}" y1="{ly - 4}" x2="{W - MR - 95}" '
                         f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
            parts.append(f'<text x="{W - MR - 90}" y="{ly}" font-size="11" '
                         f'font-family="sans-serif">{label}</text>')
    if xlabel:
        parts.append(f'<text x="{(ML + W - MR) / 2}" y="{H - 12}" font-size="12" '
                     f'text-anchor="middle" font-family="sans-serif">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{(MT + H - MB) / 2}" font-size="12" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'transform="rotate(-90 16 {(MT + H - MB) / 2})">{ylabel}</text>')
    if title:
        parts.append(f'<text x="{(ML + W - MR) / 2}" y="14" font-size="12" '
                     f'text-anchor="middle" font-family="sans-serif">{title}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
