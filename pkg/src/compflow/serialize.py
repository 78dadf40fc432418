"""Deterministic text artifacts: trajectory CSV, sweep CSV/JSON, SVG plots.

All floats are written with shortest round-trip precision (Python repr), so
parse(write(x)) == x bitwise and identical runs produce byte-identical
files. CSV follows RFC-4180 conventions ('.' decimal separator, comma
delimiter, \\n line ends); trajectory files carry their run metadata as
leading ``# key=value`` comment lines.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .dynamics import Trajectory
from .errors import ConfigurationError

__all__ = [
    "fmt_float",
    "trajectory_to_csv",
    "trajectory_from_csv",
    "json_dumps",
    "svg_loglog",
]


def fmt_float(value) -> str:
    return repr(float(value))


def _meta_value(text: str):
    if text == "None":
        return None
    try:
        as_float = float(text)
    except ValueError:
        return text
    if as_float.is_integer() and "." not in text and "e" not in text.lower():
        return int(text)
    return as_float


def trajectory_to_csv(traj: Trajectory) -> str:
    """Columns time, x_0..x_{n-1}[, y_0..y_{m-1}]; meta as # comments."""
    n = traj.states_x.shape[1]
    header = ["time"] + [f"x_{i}" for i in range(n)]
    if traj.states_y is not None:
        header += [f"y_{i}" for i in range(traj.states_y.shape[1])]
    lines = [f"# {key}={traj.meta[key]}" for key in sorted(traj.meta)]
    lines.append(",".join(header))
    for i, t in enumerate(traj.times):
        row = [fmt_float(t)] + [fmt_float(v) for v in traj.states_x[i]]
        if traj.states_y is not None:
            row += [fmt_float(v) for v in traj.states_y[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def trajectory_from_csv(text: str) -> Trajectory:
    meta = {}
    rows = []
    header: Optional[list] = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = _meta_value(value.strip())
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([float(v) for v in line.split(",")])
    if header is None or not rows:
        raise ConfigurationError("trajectory CSV has no data rows")
    data = np.asarray(rows)
    n = sum(1 for c in header if c.startswith("x_"))
    m = sum(1 for c in header if c.startswith("y_"))
    return Trajectory(
        times=data[:, 0],
        states_x=data[:, 1:1 + n],
        states_y=data[:, 1 + n:1 + n + m] if m else None,
        meta=meta,
    )


def json_dumps(payload) -> str:
    """Canonical JSON: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# minimal hand-rolled SVG (log-log scatter with fitted line), byte-stable


def svg_loglog(xs: Sequence[float], ys: Sequence[float],
               slope: Optional[float] = None, intercept: Optional[float] = None,
               title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 480) -> str:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ConfigurationError("log-log plot needs positive data")
    lx, ly = np.log10(xs), np.log10(ys)
    pad = 0.05
    x_lo, x_hi = lx.min(), lx.max()
    y_lo, y_hi = ly.min(), ly.max()
    x_span = max(x_hi - x_lo, 1e-9)
    y_span = max(y_hi - y_lo, 1e-9)
    x_lo, x_hi = x_lo - pad * x_span, x_hi + pad * x_span
    y_lo, y_hi = y_lo - pad * y_span, y_hi + pad * y_span
    margin = 60

    def px(v):
        return margin + (v - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(v):
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="black"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width // 2}" y="24" text-anchor="middle" '
            f'font-family="monospace" font-size="14">{title}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{width // 2}" y="{height - 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="12">{xlabel}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{height // 2}" text-anchor="middle" '
            f'font-family="monospace" font-size="12" '
            f'transform="rotate(-90 16 {height // 2})">{ylabel}</text>'
        )
    if slope is not None and intercept is not None:
        # fitted line in log10 space: log10 y = slope*log10 x + intercept/ln(10)
        b10 = intercept / np.log(10.0)
        p1 = (px(x_lo), py(slope * x_lo + b10))
        p2 = (px(x_hi), py(slope * x_hi + b10))
        parts.append(
            f'<line x1="{p1[0]:.2f}" y1="{p1[1]:.2f}" x2="{p2[0]:.2f}" '
            f'y2="{p2[1]:.2f}" stroke="#888888" stroke-dasharray="6,4"/>'
        )
        parts.append(
            f'<text x="{width - margin}" y="{margin - 8}" text-anchor="end" '
            f'font-family="monospace" font-size="12">slope={slope:.4f}</text>'
        )
    for xv, yv in zip(lx, ly):
        parts.append(
            f'<circle cx="{px(xv):.2f}" cy="{py(yv):.2f}" r="4" fill="#1f5fbf"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
