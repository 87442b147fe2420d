"""CSV and SVG artifact writers for runs, oracles, and studies.

CSV files carry a `# schema: mfos.<name>.v1` comment on the first line and
are otherwise plain RFC-4180 output from the stdlib writer.  SVG charts are
generated directly (line charts, grouped bars, grid heatmaps); they aim at
data fidelity, not at reproducing any particular plotting style.  Nothing
here embeds timestamps, so re-running a seeded command reproduces files
byte for byte.
"""

from __future__ import annotations

import csv
import io
import math
import os

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
_HEAT_STOPS = ((0.0, (13, 8, 135)), (0.25, (126, 3, 168)), (0.5, (204, 71, 120)),
               (0.75, (248, 149, 64)), (1.0, (240, 249, 33)))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def write_csv(path: str, schema: str, header: list, rows: list) -> None:
    """Rows of already-ordered values under a versioned schema comment."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: mfos.{schema}.v1\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> tuple:
    """(schema line, header, rows as strings) back from `write_csv` output."""
    with open(path, newline="") as fh:
        schema = fh.readline().strip()
        rows = list(csv.reader(fh))
    return schema, rows[0], rows[1:]


def write_train_report_csv(path: str, reports) -> None:
    """One DA report or a list of per-stage DP reports."""
    if not isinstance(reports, (list, tuple)):
        evals = dict(reports.evals)
        rows = [(i + 1, loss, evals.get(i + 1)) for i, loss in enumerate(reports.train_losses)]
        write_csv(path, "train_report", ["iteration", "train_loss", "test_loss"], rows)
        return
    rows = []
    for rep in reports:
        evals = dict(rep.evals)
        rows.extend((rep.stage, i + 1, loss, evals.get(i + 1)) for i, loss in enumerate(rep.train_losses))
    write_csv(path, "train_report_dp", ["stage", "iteration", "train_loss", "test_loss"], rows)


def write_evolution_csv(path: str, env, trajectory) -> None:
    """Per-time stopped/alive/marginal masses of one rollout."""
    rows = []
    for t, dist in enumerate(trajectory.distributions):
        for x in range(env.space.n):
            rows.append((t, env.space.labels[x], dist.stopped[x], dist.alive[x], dist.stopped[x] + dist.alive[x]))
    write_csv(path, "evolution", ["time", "state", "stopped", "alive", "marginal"], rows)


def write_study_csv(path: str, study) -> None:
    rows = [(r["n_agents"], r["time"], r["mean_l2"], r["mean_tv"], r["mean_cost_gap"]) for r in study.rows()]
    rows.append(("slope", "", study.slope, "", ""))
    write_csv(path, "convergence_study", ["n_agents", "time", "mean_l2", "mean_tv", "mean_cost_gap"], rows)


def write_rules_csv(path: str, env, rules, value: float) -> None:
    """Stopping rules (one row per step and state) with the oracle value."""
    rows = []
    for step, rule in enumerate(rules):
        rule = np.atleast_1d(np.asarray(rule, dtype=float))
        for x in range(env.space.n):
            prob = rule[x] if rule.size == env.space.n else rule[0]
            rows.append((step, env.space.labels[x], prob, value))
    write_csv(path, "oracle_rules", ["step", "state", "stop_probability", "value"], rows)


# ---------------------------------------------------------------------------
# SVG charts


def _svg_open(width: int, height: int, title: str) -> io.StringIO:
    buf = io.StringIO()
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
              f'viewBox="0 0 {width} {height}" font-family="Helvetica,Arial,sans-serif">\n')
    buf.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    if title:
        buf.write(f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>\n')
    return buf


def _save(buf: io.StringIO, path: str) -> None:
    buf.write("</svg>\n")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def _ticks(lo: float, hi: float, log: bool) -> list:
    if log:
        lo_d, hi_d = math.floor(lo), math.ceil(hi)
        if hi_d - lo_d > 8:
            step = math.ceil((hi_d - lo_d) / 8)
            return [float(d) for d in range(lo_d, hi_d + 1, step)]
        return [float(d) for d in range(lo_d, hi_d + 1)]
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step) * step
    out = []
    while first <= hi + 1e-12:
        out.append(first)
        first += step
    return out or [lo]


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(v)}" if v == int(v) else f"{10 ** v:.2g}"
    return f"{v:.4g}"


def svg_line_chart(path: str, series: list, title: str = "", xlabel: str = "", ylabel: str = "",
                   log_x: bool = False, log_y: bool = False, width: int = 640, height: int = 420) -> None:
    """series: list of (label, xs, ys); non-finite and non-positive-on-log points are dropped."""
    left, right, top, bottom = 62, 16, 36, 56
    pw, ph = width - left - right, height - top - bottom
    pts_all = []
    clean = []
    for label, xs, ys in series:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        keep = np.isfinite(xs) & np.isfinite(ys)
        if log_x:
            keep &= xs > 0
        if log_y:
            keep &= ys > 0
        xs, ys = xs[keep], ys[keep]
        if log_x:
            xs = np.log10(xs)
        if log_y:
            ys = np.log10(ys)
        clean.append((label, xs, ys))
        pts_all.append(np.stack([xs, ys], axis=1) if xs.size else np.empty((0, 2)))
    all_pts = np.concatenate(pts_all) if pts_all else np.empty((0, 2))
    if all_pts.size == 0:
        all_pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    x_lo, x_hi = float(all_pts[:, 0].min()), float(all_pts[:, 0].max())
    y_lo, y_hi = float(all_pts[:, 1].min()), float(all_pts[:, 1].max())
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + (abs(y_lo) or 1) * 0.1
    pad = 0.04 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return top + ph - (v - y_lo) / (y_hi - y_lo) * ph

    buf = _svg_open(width, height, title)
    buf.write(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>\n')
    for tx in _ticks(x_lo, x_hi, log_x):
        if x_lo - 1e-9 <= tx <= x_hi + 1e-9:
            buf.write(f'<line x1="{sx(tx):.1f}" y1="{top + ph}" x2="{sx(tx):.1f}" y2="{top + ph + 4}" stroke="#333"/>\n')
            buf.write(f'<text x="{sx(tx):.1f}" y="{top + ph + 17}" text-anchor="middle" font-size="10">{_tick_label(tx, log_x)}</text>\n')
    for ty in _ticks(y_lo, y_hi, log_y):
        if y_lo - 1e-9 <= ty <= y_hi + 1e-9:
            buf.write(f'<line x1="{left - 4}" y1="{sy(ty):.1f}" x2="{left}" y2="{sy(ty):.1f}" stroke="#333"/>\n')
            buf.write(f'<text x="{left - 7}" y="{sy(ty) + 3:.1f}" text-anchor="end" font-size="10">{_tick_label(ty, log_y)}</text>\n')
    if xlabel:
        buf.write(f'<text x="{left + pw / 2:.0f}" y="{height - 18}" text-anchor="middle" font-size="11">{xlabel}</text>\n')
    if ylabel:
        buf.write(f'<text x="16" y="{top + ph / 2:.0f}" text-anchor="middle" font-size="11" '
                  f'transform="rotate(-90 16 {top + ph / 2:.0f})">{ylabel}</text>\n')
    for i, (label, xs, ys) in enumerate(clean):
        color = PALETTE[i % len(PALETTE)]
        if xs.size:
            d = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
            buf.write(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>\n')
            if xs.size <= 40:
                for x, y in zip(xs, ys):
                    buf.write(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.4" fill="{color}"/>\n')
        ly = top + 14 + 14 * i
        buf.write(f'<line x1="{left + pw - 120}" y1="{ly - 4}" x2="{left + pw - 100}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>\n')
        buf.write(f'<text x="{left + pw - 95}" y="{ly}" font-size="10">{label}</text>\n')
    _save(buf, path)


def svg_bar_chart(path: str, categories, groups: list, title: str = "", ylabel: str = "",
                  width: int = 640, height: int = 420) -> None:
    """Grouped bars: ``groups`` is a list of (label, values aligned with categories)."""
    left, right, top, bottom = 56, 16, 36, 52
    pw, ph = width - left - right, height - top - bottom
    n_cat, n_grp = len(categories), len(groups)
    vmax = max(1e-12, max(float(np.max(vals)) for _, vals in groups))
    slot = pw / max(n_cat, 1)
    bar = slot * 0.8 / max(n_grp, 1)
    buf = _svg_open(width, height, title)
    buf.write(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#333"/>\n')
    for ty in _ticks(0, vmax, False):
        y = top + ph - ty / vmax * ph
        buf.write(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="#333"/>\n')
        buf.write(f'<text x="{left - 7}" y="{y + 3:.1f}" text-anchor="end" font-size="10">{ty:.3g}</text>\n')
    for c, cat in enumerate(categories):
        x0 = left + c * slot + slot * 0.1
        for g, (label, vals) in enumerate(groups):
            v = float(vals[c])
            hgt = max(0.0, v) / vmax * ph
            buf.write(f'<rect x="{x0 + g * bar:.1f}" y="{top + ph - hgt:.1f}" width="{bar:.1f}" height="{hgt:.1f}" '
                      f'fill="{PALETTE[g % len(PALETTE)]}"/>\n')
        buf.write(f'<text x="{left + c * slot + slot / 2:.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{cat}</text>\n')
    for g, (label, _) in enumerate(groups):
        ly = top + 14 + 14 * g
        buf.write(f'<rect x="{left + pw - 118}" y="{ly - 9}" width="10" height="10" fill="{PALETTE[g % len(PALETTE)]}"/>\n')
        buf.write(f'<text x="{left + pw - 104}" y="{ly}" font-size="10">{label}</text>\n')
    if ylabel:
        buf.write(f'<text x="14" y="{top + ph / 2:.0f}" text-anchor="middle" font-size="11" '
                  f'transform="rotate(-90 14 {top + ph / 2:.0f})">{ylabel}</text>\n')
    _save(buf, path)


def _heat_color(v: float) -> str:
    v = min(1.0, max(0.0, v))
    for (a, ca), (b, cb) in zip(_HEAT_STOPS, _HEAT_STOPS[1:]):
        if v <= b:
            t = 0.0 if b == a else (v - a) / (b - a)
            r, g, bl = (round(x + t * (y - x)) for x, y in zip(ca, cb))
            return f"rgb({r},{g},{bl})"
    return "rgb(240,249,33)"


def svg_heatmaps(path: str, panels: list, title: str = "", cell: int = 22) -> None:
    """Side-by-side grid heatmaps: ``panels`` is a list of (label, 2-d array).

    Each panel normalizes independently to its own max (annotated), so both
    near-uniform and concentrated distributions stay readable.
    """
    gap, top, margin = 26, 44, 14
    heights = [p[1].shape[0] for p in panels]
    widths = [p[1].shape[1] for p in panels]
    width = margin * 2 + sum(w * cell for w in widths) + gap * (len(panels) - 1)
    height = top + max(heights) * cell + 34
    buf = _svg_open(width, height, title)
    x0 = margin
    for label, grid in panels:
        grid = np.asarray(grid, dtype=float)
        vmax = float(grid.max())
        scale = vmax if vmax > 0 else 1.0
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                buf.write(f'<rect x="{x0 + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                          f'fill="{_heat_color(grid[i, j] / scale)}" stroke="#222" stroke-width="0.4"/>\n')
        buf.write(f'<text x="{x0 + grid.shape[1] * cell / 2:.0f}" y="{top - 8}" text-anchor="middle" font-size="11">'
                  f'{label} (max {vmax:.3g})</text>\n')
        x0 += grid.shape[1] * cell + gap
    _save(buf, path)
