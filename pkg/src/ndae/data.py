"""Trajectory containers, measurement noise, error metrics and file formats."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .nn import make_rng


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """Uniformly sampled states of a semi-explicit DAE.

    Row ``k`` of ``X``, ``Y`` and ``U`` holds the differential state,
    algebraic state and input at ``times[k]``.
    """

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    U: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        n = self.times.shape[0]
        arrs = []
        for name in ("X", "Y", "U"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim == 1:
                a = a.reshape(n, -1) if n else a.reshape(0, 0)
            if a.ndim != 2 or a.shape[0] != n:
                raise ValueError(f"{name} has {a.shape[0] if a.ndim else 0} rows, expected {n}")
            arrs.append(a)
        self.X, self.Y, self.U = arrs
        if n >= 2:
            d = np.diff(self.times)
            if np.any(d <= 0):
                raise ValueError("times must be strictly increasing")
            if np.max(np.abs(d - d[0])) > 1e-12 * max(1.0, abs(self.times[-1])):
                raise ValueError("times must be uniformly spaced")

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def dt(self) -> float:
        if len(self) < 2:
            return float(self.meta.get("dt", 0.0))
        return float((self.times[-1] - self.times[0]) / (len(self) - 1))

    @property
    def n_x(self) -> int:
        return self.X.shape[1]

    @property
    def n_y(self) -> int:
        return self.Y.shape[1]

    @property
    def n_u(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "Trajectory":
        return Trajectory(self.times.copy(), self.X.copy(), self.Y.copy(), self.U.copy(),
                          json.loads(json.dumps(self.meta)))

    def equals(self, other: "Trajectory") -> bool:
        return (np.array_equal(self.times, other.times) and np.array_equal(self.X, other.X)
                and np.array_equal(self.Y, other.Y) and np.array_equal(self.U, other.U))


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = math.inf
    seed: int = 0
    channels: str = "xy"

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite or +inf (no noise)")
        if self.channels not in ("x", "y", "xy"):
            raise ValueError(f"channels must be one of 'x', 'y', 'xy', got {self.channels!r}")


def noise_variance(signal: np.ndarray, snr_db: float) -> np.ndarray:
    """Per-column variance giving the requested SNR against mean squared signal."""
    power = np.mean(np.asarray(signal) ** 2, axis=0)
    return power / 10.0 ** (snr_db / 10.0)


def add_noise(traj: Trajectory, spec: NoiseSpec) -> Trajectory:
    """Return a copy with additive Gaussian white noise on the selected states.

    Inputs ``U`` are never perturbed.
    """
    if len(traj) == 0:
        raise ValueError("cannot add noise to an empty trajectory")
    out = traj.copy()
    if spec.snr_db == math.inf:
        return out
    rng = make_rng(spec.seed)
    for group in ("x", "y"):
        if group not in spec.channels:
            continue
        sig = getattr(out, group.upper())
        if sig.shape[1] == 0:
            continue
        sd = np.sqrt(noise_variance(sig, spec.snr_db))
        sig += rng.standard_normal(sig.shape) * sd
    out.meta["noise"] = {"snr_db": spec.snr_db, "seed": spec.seed, "channels": spec.channels}
    return out


def mse(a: Trajectory, b: Trajectory, group: str = "both") -> float:
    """Mean over samples and channels of squared differences."""
    if len(a) != len(b):
        raise ValueError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if group == "x":
        d = a.X - b.X
    elif group == "y":
        d = a.Y - b.Y
    elif group == "both":
        d = np.hstack([a.X - b.X, a.Y - b.Y])
    else:
        raise ValueError(f"group must be 'x', 'y' or 'both', got {group!r}")
    return float(np.mean(d ** 2))


# -- CSV ---------------------------------------------------------------------

def _header(traj: Trajectory) -> list[str]:
    return (["t"] + [f"x{i + 1}" for i in range(traj.n_x)]
            + [f"y{i + 1}" for i in range(traj.n_y)] + [f"u{i + 1}" for i in range(traj.n_u)])


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_csv(traj: Trajectory, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.hstack([traj.times[:, None], traj.X, traj.Y, traj.U])
    lines = [",".join(_header(traj))]
    for row in body:
        lines.append(",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    meta = dict(traj.meta)
    meta.setdefault("dt", traj.dt)
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_csv(path: str | Path) -> Trajectory:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise TrajectoryFormatError(f"{path}: line 1: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if not header or header[0] != "t":
        raise TrajectoryFormatError(f"{path}: line 1: header must start with 't'")
    counts = {"x": 0, "y": 0, "u": 0}
    order = []
    for name in header[1:]:
        kind = name[:1]
        if kind not in counts or name[1:] != str(counts[kind] + 1):
            raise TrajectoryFormatError(f"{path}: line 1: unexpected column {name!r}")
        order.append(kind)
        counts[kind] += 1
    if order != sorted(order, key="xyu".index):
        raise TrajectoryFormatError(f"{path}: line 1: columns must be ordered t, x..., y..., u...")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        toks = line.split(",")
        if len(toks) != len(header):
            raise TrajectoryFormatError(
                f"{path}: line {lineno}: expected {len(header)} columns, got {len(toks)}")
        try:
            vals = [float(t) for t in toks]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}: line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise TrajectoryFormatError(f"{path}: line {lineno}: non-finite value")
        rows.append(vals)
    body = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    nx, ny = counts["x"], counts["y"]
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    return Trajectory(body[:, 0], body[:, 1:1 + nx], body[:, 1 + nx:1 + nx + ny],
                      body[:, 1 + nx + ny:], meta)


# -- reports and plots ---------------------------------------------------------

def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def write_svg_lineplot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
                       path: str | Path, title: str = "", xlabel: str = "",
                       ylabel: str = "", dashed: Sequence[str] = ()) -> None:
    """Write an SVG 1.1 line chart with one polyline per ``(label, xs, ys)``."""
    if not series:
        raise ValueError("no series to plot")
    for label, xs, ys in series:
        if len(xs) == 0 or len(xs) != len(ys):
            raise ValueError(f"series {label!r} is empty or has mismatched lengths")
    W, H = 640, 420
    left, right, top, bottom = 70, 150, 40, 55
    allx = np.concatenate([np.asarray(s[1], float) for s in series])
    ally = np.concatenate([np.asarray(s[2], float) for s in series])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = W - left - right, H - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        yv = y0 + (y1 - y0) * i / 5
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{xv:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                   f'font-size="11">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{H - 12}" text-anchor="middle" '
               f'font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(float(a)):.2f},{sy(float(b)):.2f}" for a, b in zip(xs, ys))
        dash = ' stroke-dasharray="6,4"' if label in dashed else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} '
                   f'points="{pts}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 36}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
