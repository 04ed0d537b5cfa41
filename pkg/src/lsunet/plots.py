"""Dependency-free chart output: SVG line charts and PGM grayscale images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataValidationError

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo
    if span <= 0:
        span = 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def line_chart_svg(series: list[tuple[str, list[float], list[float]]], title: str,
                   width: int = 640, height: int = 400) -> str:
    """Renders named (xs, ys) series as one SVG document."""
    if not series or any(len(xs) == 0 for _, xs, _ in series):
        raise DataValidationError("cannot chart empty series")
    margin = 50
    all_x = [v for _, xs, _ in series for v in xs]
    all_y = [v for _, _, ys in series for v in ys if np.isfinite(v)]
    if not all_y:
        raise DataValidationError("no finite values to chart")
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        xp = margin + frac * (width - 2 * margin)
        yp = height - margin - frac * (height - 2 * margin)
        parts.append(f'<text x="{xp:.1f}" y="{height - margin + 18}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{xv:.4g}</text>')
        parts.append(f'<text x="{margin - 6}" y="{yp:.1f}" text-anchor="end" '
                     f'font-size="11" font-family="sans-serif">{yv:.4g}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        px = _scale(xs, x_lo, x_hi, margin, width - margin)
        py = _scale(ys, y_lo, y_hi, height - margin, margin)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = margin + 16 * i
        parts.append(f'<line x1="{width - margin - 110}" y1="{ly}" x2="{width - margin - 90}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin - 84}" y="{ly + 4}" font-size="11" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_pgm(path, image: np.ndarray) -> None:
    """Writes a 2-D array scaled to [0, 255] as binary PGM (P5)."""
    if image.ndim != 2:
        raise DataValidationError(f"PGM output needs a 2-D array, got shape {image.shape}")
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def parse_run_tsv(text: str) -> dict[str, list[float]]:
    """Parses run history TSV into named columns."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataValidationError("run history is empty")
    header = lines[0].split("\t")
    if header[0] != "epoch":
        raise DataValidationError("run history is missing its header line")
    rows = lines[1:]
    if not rows:
        raise DataValidationError("run history has a header but no epochs")
    cols: dict[str, list[float]] = {name: [] for name in header}
    for ln in rows:
        parts = ln.split("\t")
        if len(parts) != len(header):
            raise DataValidationError(f"malformed run history row: {ln!r}")
        for name, val in zip(header, parts):
            try:
                cols[name].append(float(val))
            except ValueError as e:
                raise DataValidationError(f"non-numeric value {val!r} in column {name}") from e
    return cols


def export_run_charts(run_tsv_text: str, out_dir) -> list[Path]:
    """Writes loss/miou/dsc/sigma SVG charts for a run history."""
    cols = parse_run_tsv(run_tsv_text)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = cols["epoch"]
    written = []
    charts = [
        ("loss.svg", "training loss", [("train_loss", epochs, cols["train_loss"])]),
        ("miou.svg", "eval mIoU", [("eval_miou", epochs, cols["eval_miou"])]),
        ("dsc.svg", "eval DSC", [("eval_dsc", epochs, cols["eval_dsc"])]),
        ("sigma.svg", "loss weights sigma",
         [(f"sigma_{i}", epochs, cols[f"sigma_{i}"]) for i in range(6)]),
    ]
    for filename, title, series in charts:
        path = out / filename
        path.write_text(line_chart_svg(series, title))
        written.append(path)
    return written
