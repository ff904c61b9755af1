"""Artifact writing: atomic files, run manifests and small hand-built SVG figures.

CSV is the source of truth; the SVGs are only views of it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

MANIFEST_SCHEMA = 1


def tool_version() -> str:
    from . import __version__

    return __version__


def atomic_write(path, data: str | bytes) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir, command: str, config: Mapping, inputs: Mapping[str, str] | None = None,
                   outputs: Sequence[str] = ()) -> Path:
    """Record what produced a directory of artifacts. No timestamps, so reruns compare byte for byte."""
    out_dir = Path(out_dir)
    ins = {}
    for name, p in sorted((inputs or {}).items()):
        if p is not None and Path(p).is_file():
            ins[name] = {"path": str(p), "sha256": file_hash(p)}
    outs = {}
    for name in sorted(outputs):
        p = out_dir / name
        if p.is_file():
            outs[name] = file_hash(p)
    doc = {
        "schema": MANIFEST_SCHEMA,
        "tool_version": tool_version(),
        "command": command,
        "config": dict(config),
        "config_hash": config_hash(config),
        "inputs": ins,
        "outputs": outs,
    }
    return atomic_write(out_dir / "manifest.json", json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


# colours --------------------------------------------------------------------

def diverging(value: float, limit: float) -> str:
    """Blue (negative) through white to red (positive); grey for NaN."""
    if not math.isfinite(value):
        return "#cccccc"
    t = 0.0 if limit <= 0 else max(-1.0, min(1.0, value / limit))
    if t < 0:
        r, g, b = 1 + t, 1 + t, 1.0
    else:
        r, g, b = 1.0, 1 - t, 1 - t
    return "#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255))


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def svg_heatmap(grid: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str],
                title: str = "", cell: int = 36) -> str:
    """One ``<rect class="cell">`` per matrix entry, values in the tooltip."""
    grid = np.asarray(grid, dtype=float)
    n_rows, n_cols = grid.shape
    finite = grid[np.isfinite(grid)]
    limit = float(np.abs(finite).max()) if finite.size else 1.0
    left, top = 60, 40
    w, h = left + n_cols * cell + 20, top + n_rows * cell + 50
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">']
    if title:
        out.append(f'<text x="{left}" y="20" font-size="13">{escape(title)}</text>')
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{left + j * cell + cell / 2}" y="{top - 6}" text-anchor="middle">{escape(lab)}</text>')
    for i in range(n_rows):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(row_labels[i])}</text>')
        for j in range(n_cols):
            v = grid[i, j]
            x = left + j * cell
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{diverging(v, limit)}" stroke="#ffffff"><title>{escape(row_labels[i])}/{escape(col_labels[j])}: '
                f'{v:.4g}</title></rect>'
            )
    out.append(f'<text x="{left}" y="{h - 15}">scale: -{_fmt(limit)} (blue) .. +{_fmt(limit)} (red)</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def effect_heatmap(effects, n_layers: int, n_heads: int, title: str = "causal effect") -> str:
    """Layers down the side, heads across, MLPs in the last column."""
    return svg_heatmap(
        effects.grid(n_layers, n_heads),
        [f"L{i}" for i in range(n_layers)],
        [str(j) for j in range(n_heads)] + ["mlp"],
        title,
    )


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lines(series: Mapping[str, Sequence[float]], x: Sequence[float] | None = None,
              title: str = "", y_range: tuple[float, float] | None = None,
              width: int = 420, height: int = 260) -> str:
    """Simple multi-series line chart with a legend."""
    names = list(series)
    n = max((len(series[k]) for k in names), default=0)
    xs = list(range(n)) if x is None else list(x)
    ys = [v for k in names for v in series[k] if math.isfinite(v)]
    lo, hi = y_range if y_range else ((min(ys), max(ys)) if ys else (0.0, 1.0))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    if x1 <= x0:
        x1 = x0 + 1
    L, T, R, B = 50, 30, 110, 35
    pw, ph = width - L - R, height - T - B

    def px(v):
        return L + (v - x0) / (x1 - x0) * pw

    def py(v):
        return T + (hi - v) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">']
    if title:
        out.append(f'<text x="{L}" y="18" font-size="13">{escape(title)}</text>')
    out.append(f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#888888"/>')
    for v in (lo, hi):
        out.append(f'<text x="{L - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    for v in xs:
        out.append(f'<text x="{px(v):.1f}" y="{T + ph + 14}" text-anchor="middle">{_fmt(v)}</text>')
    for k, name in enumerate(names):
        colour = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(xv):.1f},{py(yv):.1f}" for xv, yv in zip(xs, series[name]) if math.isfinite(yv))
        out.append(f'<polyline class="series" fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{L + pw + 8}" y="{T + 12 + 14 * k}" fill="{colour}">{escape(name)}</text>')
    out.append("</svg>\n")
    return "\n".join(out)
