"""File-based visual artifacts: per-component geospatial activation maps
(CSV + SVG scatter) and the clustered region heatmap (SVG grid).

No plotting dependencies; SVG is emitted directly with fixed 6-decimal
formatting so identical inputs produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interp import Location, NmfFactors
from .matcore import InputError, check_matrix


@dataclass
class MapPoint:
    lng: float
    lat: float
    raw: float
    normalized: float


@dataclass
class MapLayer:
    points: list[MapPoint]
    component: int
    raw_min: float
    raw_max: float


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def make_map_layer(f: NmfFactors, locations: list[Location],
                   component: int) -> MapLayer:
    if not 0 <= component < f.k:
        raise InputError(f"component {component} out of range for k={f.k}")
    if len(locations) != f.l.shape[1]:
        raise InputError("make_map_layer: locations do not match loading columns")
    raw = f.l[component]
    norm = _normalize(raw)
    points = [MapPoint(lng=loc.lng, lat=loc.lat, raw=float(raw[i]),
                       normalized=float(norm[i]))
              for i, loc in enumerate(locations)]
    return MapLayer(points=points, component=component,
                    raw_min=float(raw.min()), raw_max=float(raw.max()))


def export_map_csv(f: NmfFactors, locations: list[Location], component: int,
                   path) -> None:
    """One row per location, in location index order: lng,lat,activation,normalized."""
    layer = make_map_layer(f, locations, component)
    with open(path, "w") as fh:
        fh.write("lng,lat,activation,normalized\n")
        for p in layer.points:
            fh.write(f"{p.lng:.17g},{p.lat:.17g},{p.raw:.17g},{p.normalized:.6f}\n")


def export_map_svg(layer: MapLayer, path, radius: float = 6.0,
                   color: str = "#1f5fa8", canvas: float = 400.0) -> None:
    """Scatter of locations; fill opacity tracks normalized activation
    (floored at 0.05 so every point stays visible)."""
    if not layer.points:
        raise InputError("export_map_svg: empty layer")
    lngs = np.array([p.lng for p in layer.points])
    lats = np.array([p.lat for p in layer.points])
    lng_lo, lng_hi = float(lngs.min()), float(lngs.max())
    lat_lo, lat_hi = float(lats.min()), float(lats.max())
    span_lng = max(lng_hi - lng_lo, 1e-9)
    span_lat = max(lat_hi - lat_lo, 1e-9)
    pad_lng, pad_lat = 0.05 * span_lng, 0.05 * span_lat
    w = canvas
    h = canvas * (span_lat + 2 * pad_lat) / (span_lng + 2 * pad_lng)
    sx = w / (span_lng + 2 * pad_lng)
    sy = h / (span_lat + 2 * pad_lat)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.6f}" '
        f'height="{h:.6f}" viewBox="0 0 {w:.6f} {h:.6f}">',
        f'<title>component {layer.component} activation</title>',
    ]
    for p in layer.points:
        cx = (p.lng - (lng_lo - pad_lng)) * sx
        cy = h - (p.lat - (lat_lo - pad_lat)) * sy  # north up
        opacity = max(p.normalized, 0.05)
        lines.append(
            f'<circle cx="{cx:.6f}" cy="{cy:.6f}" r="{radius:.6f}" '
            f'fill="{color}" fill-opacity="{opacity:.6f}"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_heatmap_svg(agg, row_order: list[int], col_order: list[int],
                       row_labels: list[str], col_labels: list[str], path,
                       cell: float = 36.0, color: str = "#b42318") -> None:
    """k x R grid, min-max normalized fill over the whole matrix, arranged per
    the provided cluster orders; axis labels along left and top."""
    agg = check_matrix(agg, "agg")
    k, r = agg.shape
    if sorted(row_order) != list(range(k)) or sorted(col_order) != list(range(r)):
        raise InputError("export_heatmap_svg: orders must be permutations")
    if len(row_labels) != k or len(col_labels) != r:
        raise InputError("export_heatmap_svg: label counts must match shape")
    lo, hi = float(agg.min()), float(agg.max())
    span = hi - lo
    margin = 90.0
    w = margin + r * cell
    h = margin + k * cell
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.6f}" '
        f'height="{h:.6f}" viewBox="0 0 {w:.6f} {h:.6f}">',
        '<title>clustered region heatmap</title>',
    ]
    for ci, c in enumerate(col_order):
        x = margin + (ci + 0.5) * cell
        lines.append(
            f'<text x="{x:.6f}" y="{margin - 8.0:.6f}" font-size="11" '
            f'text-anchor="middle">{col_labels[c]}</text>')
    for ri, rr in enumerate(row_order):
        y = margin + (ri + 0.65) * cell
        lines.append(
            f'<text x="{margin - 8.0:.6f}" y="{y:.6f}" font-size="11" '
            f'text-anchor="end">{row_labels[rr]}</text>')
        for ci, c in enumerate(col_order):
            val = 0.5 if span <= 0 else (float(agg[rr, c]) - lo) / span
            x = margin + ci * cell
            y0 = margin + ri * cell
            lines.append(
                f'<rect x="{x:.6f}" y="{y0:.6f}" width="{cell:.6f}" '
                f'height="{cell:.6f}" fill="{color}" '
                f'fill-opacity="{val:.6f}" stroke="#ffffff"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
