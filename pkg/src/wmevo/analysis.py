"""Post-hoc analyses: hidden-state variance profile, latent traces, fitness plots."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .model import LATENT_SIZE
from .rollout import RolloutResult, Traces

TRACE_COLUMNS = (
    ["t"] + [f"z_{i}" for i in range(LATENT_SIZE)] + ["a_steer", "a_gas", "a_brake", "hbar", "car_x", "car_y"]
)
LOG_COLUMNS = (
    "generation",
    "best_single",
    "elite_avg",
    "elite_std",
    "pop_mean",
    "pop_std",
    "rollouts",
    "frames",
    "wall_time_s",
)


class UsageError(ValueError):
    pass


class LogParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def hidden_variance(hbar) -> np.ndarray:
    """Min-max normalized ``(mean(hbar) - hbar_t)**2``; all zeros when flat."""
    x = np.asarray(hbar, dtype=np.float64).ravel()
    if x.size == 0:
        raise UsageError("hidden_variance needs a non-empty trace")
    raw = (x.mean() - x) ** 2
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


# -- latent traces ---------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def export_latents(result: RolloutResult, path) -> Path:
    """Write one CSV row per frame: latent code, action, mean hidden state, car position."""
    tr = result.traces
    if tr is None:
        raise UsageError("rollout was run without trace recording")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in range(len(tr.hidden_means)):
            row = [str(t)]
            row += [_fmt(v) for v in tr.latents[t]]
            row += [_fmt(v) for v in tr.actions[t]]
            row.append(_fmt(tr.hidden_means[t]))
            row += [_fmt(v) for v in tr.positions[t]]
            w.writerow(row)
    return path


def read_latents(path) -> Traces:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRACE_COLUMNS:
        raise UsageError(f"{path}: not a latent trace file")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(TRACE_COLUMNS))
    return Traces(
        latents=data[:, 1 : 1 + LATENT_SIZE].astype(np.float32),
        hidden_means=data[:, 1 + LATENT_SIZE + 3],
        actions=data[:, 1 + LATENT_SIZE : 1 + LATENT_SIZE + 3],
        positions=data[:, -2:],
    )


def write_variance(profile, path, positions=None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "sigma", "car_x", "car_y"] if positions is not None else ["t", "sigma"])
        for t, v in enumerate(profile):
            row = [str(t), _fmt(v)]
            if positions is not None:
                row += [_fmt(positions[t][0]), _fmt(positions[t][1])]
            w.writerow(row)
    return path


# -- fitness plot ----------------------------------------------------------------


def read_generation_log(path) -> dict[str, np.ndarray]:
    """Parse a generation log CSV; malformed lines raise :class:`LogParseError`."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise LogParseError(path, 1, "empty log")
    header = lines[0].split(",")
    missing = [c for c in ("generation", "best_single", "elite_avg") if c not in header]
    if missing:
        raise LogParseError(path, 1, f"header lacks {', '.join(missing)}")
    cols = {c: [] for c in header}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise LogParseError(path, lineno, f"expected {len(header)} fields, got {len(parts)}")
        for name, val in zip(header, parts):
            if name == "wall_time_s" and val == "":
                val = "nan"
            try:
                cols[name].append(float(val))
            except ValueError:
                raise LogParseError(path, lineno, f"bad value {val!r} in column {name}") from None
    if not cols["generation"]:
        raise LogParseError(path, len(lines) + 1, "log has no generation rows")
    return {k: np.array(v) for k, v in cols.items()}


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def emit_fitness_plot(log_path, out_path, width: int = 640, height: int = 400) -> Path:
    """Self-contained SVG of elite average and best single fitness per generation."""
    log = read_generation_log(log_path)
    gen = log["generation"]
    series = [("elite_avg", "#1f77b4"), ("best_single", "#d62728")]
    ys = np.concatenate([log[s] for s, _ in series])
    ys = ys[np.isfinite(ys)]
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    x0, x1 = float(gen.min()), float(gen.max())
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0

    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">generation</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {top + ph / 2})">fitness</text>'
    )
    for i, (name, color) in enumerate(series):
        pts = [(px(g), py(v)) for g, v in zip(gen, log[name]) if np.isfinite(v)]
        if len(pts) == 1:
            out.append(f'<circle cx="{pts[0][0]:.2f}" cy="{pts[0][1]:.2f}" r="3" fill="{color}"/>')
        elif pts:
            d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 15 + 16 * i
        out.append(f'<line x1="{left + 10}" y1="{ly - 4}" x2="{left + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + 35}" y="{ly}">{name}</text>')
    out.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(out) + "\n")
    return out_path

