"""Minimal deterministic SVG rendering for harness outputs.  Display only."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import numpy as np

_W, _H, _PAD = 480, 320, 40
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _write(path, body: str, width: int = _W, height: int = _H) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n{body}</svg>\n'
    )
    return path


def _ramp(v: float) -> str:
    # white to dark blue
    v = min(max(v, 0.0), 1.0)
    r = int(round(255 * (1 - 0.9 * v)))
    g = int(round(255 * (1 - 0.7 * v)))
    return f"#{r:02x}{g:02x}ff"


def heatmap_svg(path, matrix: np.ndarray, title: str = "") -> Path:
    m = np.asarray(matrix, dtype=float)
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    rows, cols = m.shape
    cw, ch = (_W - 2 * _PAD) / cols, (_H - 2 * _PAD) / rows
    parts = [f'<text x="{_PAD}" y="{_PAD - 10}" font-size="14">{title}</text>\n']
    for i in range(rows):
        # first row (smallest q) at the bottom
        y = _H - _PAD - (i + 1) * ch
        for j in range(cols):
            fill = _ramp((m[i, j] - lo) / span) if np.isfinite(m[i, j]) else "#000000"
            parts.append(f'<rect x="{_PAD + j * cw:.3f}" y="{y:.3f}" width="{cw:.3f}" height="{ch:.3f}" fill="{fill}"/>\n')
    return _write(path, "".join(parts))


def curves_svg(path, xs: Sequence[float], curves: Mapping[str, Sequence[float]]) -> Path:
    xs = np.asarray(xs, dtype=float)
    ys = np.concatenate([np.asarray(v, dtype=float) for v in curves.values()]) if curves else np.zeros(1)
    lo, hi = float(ys.min()), float(ys.max())
    span_y = hi - lo or 1.0
    span_x = float(xs.max() - xs.min()) or 1.0

    def sx(x):
        return _PAD + (x - xs.min()) / span_x * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - (y - lo) / span_y * (_H - 2 * _PAD)

    parts = []
    for k, (name, vals) in enumerate(curves.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y in zip(xs, vals))
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>\n')
        parts.append(f'<text x="{_W - _PAD - 90}" y="{_PAD + 14 * k}" font-size="11" fill="{color}">{name}</text>\n')
    return _write(path, "".join(parts))


def histogram_svg(path, *hists: Dict[int, int], labels: Sequence[str] = ("o2o", "o2m")) -> Path:
    top = max((max(h) for h in hists if h), default=0)
    peak = max((max(h.values()) for h in hists if h), default=1) or 1
    n = len(hists)
    bw = (_W - 2 * _PAD) / (top + 1) / max(n, 1)
    parts = []
    for k, h in enumerate(hists):
        color = _COLORS[k % len(_COLORS)]
        for b, c in sorted(h.items()):
            height = c / peak * (_H - 2 * _PAD)
            x = _PAD + (b * n + k) * bw
            parts.append(f'<rect x="{x:.3f}" y="{_H - _PAD - height:.3f}" width="{bw:.3f}" height="{height:.3f}" fill="{color}"/>\n')
        if k < len(labels):
            parts.append(f'<text x="{_W - _PAD - 60}" y="{_PAD + 14 * k}" font-size="11" fill="{color}">{labels[k]}</text>\n')
    return _write(path, "".join(parts))
