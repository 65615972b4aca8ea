"""Artifact writers: JSON (full precision), display CSV tables and SVG scatter plots."""

from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from html import escape
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import RateSummary
from .evaluate import ValidationReport


def jsonable(obj):
    """Recursively convert numpy values to builtins; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    # repr-based float formatting in json gives the shortest round-trip form.
    return json.dumps(jsonable(obj), indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> Path:
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def rates_csv(summaries: Sequence[RateSummary], digits: int = 2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Area", "N", "Mean", "Std. Dev.", "Min", "Max"])
    for s in summaries:
        area = "All Regions" if s.group == "all" else s.group
        w.writerow([area, s.n] + [f"{v:.{digits}f}" for v in (s.mean, s.sd, s.min, s.max)])
    return buf.getvalue()


def forecast_csv(reports: Iterable[ValidationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Model", "Mean Absolute Error", "Root Mean Square Error", "Mean Prediction Bias"])
    for r in reports:
        w.writerow([r.model_label, f"{r.mae:.3f}", f"{r.rmse:.3f}", f"{r.mpb:.3f}"])
    return buf.getvalue()


def _nice_max(value: float) -> float:
    if value <= 0:
        return 1.0
    exp = 10 ** math.floor(math.log10(value))
    for m in (1, 2, 2.5, 5, 10):
        if m * exp >= value:
            return m * exp
    return 10 * exp


def scatter_svg(report: ValidationReport, size: int = 420, timestamp: bool = False) -> str:
    """Predicted vs observed crashes with the 45-degree mean-equivalence line."""
    obs = [o for _, o, _ in report.pairs]
    pred = [p for _, _, p in report.pairs]
    top = _nice_max(max(obs + pred + [0.0]))
    left, right, upper, lower = 56, 16, 36, 48
    w = h = size
    pw, ph = w - left - right, h - upper - lower

    def sx(v):
        return left + pw * v / top

    def sy(v):
        return upper + ph * (1 - v / top)

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if timestamp:
        out.append(f"<!-- generated {datetime.now(timezone.utc).isoformat(timespec='seconds')} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">')
    out.append(f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>')
    out.append(
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">'
        f"{escape(report.model_label)}</text>"
    )
    out.append(f'<rect x="{left}" y="{upper}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    for k in range(6):
        v = top * k / 5
        label = f"{v:g}"
        out.append(f'<line x1="{sx(v):.2f}" y1="{upper + ph}" x2="{sx(v):.2f}" y2="{upper + ph + 4}" stroke="#444"/>')
        out.append(
            f'<text x="{sx(v):.2f}" y="{upper + ph + 16}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
        out.append(f'<line x1="{left - 4}" y1="{sy(v):.2f}" x2="{left}" y2="{sy(v):.2f}" stroke="#444"/>')
        out.append(
            f'<text x="{left - 6}" y="{sy(v) + 3:.2f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{h - 10}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="11">Observed crashes</text>'
    )
    out.append(
        f'<text x="14" y="{upper + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {upper + ph / 2:.1f})">Predicted crashes</text>'
    )
    out.append(
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(top):.2f}" y2="{sy(top):.2f}" stroke="red" '
        f'stroke-width="1.5"/>'
    )
    for o, p in zip(obs, pred):
        out.append(f'<circle cx="{sx(o):.2f}" cy="{sy(p):.2f}" r="2.5" fill="#1f5fa8" fill-opacity="0.6"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def slug(label: str) -> str:
    keep = "".join(c.lower() if c.isalnum() else "_" for c in label)
    return "_".join(filter(None, keep.split("_"))) or "model"
