"""Report emission: results.csv, curves.csv and a dependency-free SVG plot."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Mapping

from pstdet.evaluation import EvalCurve
from pstdet.io import atomic_write_text

RESULT_FIELDS = ("seed", "arm", "lamr", "tp", "fp", "fn", "misleading_removed_frac", "clean_removed_frac")
CURVE_FIELDS = ("arm", "threshold", "fppi", "mr")

# plot geometry, in px
_W, _H = 480, 360
_L, _R, _T, _B = 60, 20, 20, 50
_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def results_csv(rows) -> str:
    return _csv(RESULT_FIELDS, rows)


def curves_csv(curves: Mapping[str, EvalCurve]) -> str:
    rows = []
    for arm in sorted(curves):
        c = curves[arm]
        rows.extend({"arm": arm, "threshold": t, "fppi": f, "mr": m} for t, f, m in zip(c.thresholds, c.fppi, c.mr))
    return _csv(CURVE_FIELDS, rows)


def curves_svg(curves: Mapping[str, EvalCurve], fppi_range: tuple[float, float] = (1e-2, 1e0)) -> str:
    """Miss rate against FPPI on a log x axis, one polyline per arm.

    Points with zero FPPI sit on the left edge; the linear y axis spans
    miss rates 0 to 1.
    """
    lo, hi = math.log10(fppi_range[0]), math.log10(fppi_range[1])
    pw, ph = _W - _L - _R, _H - _T - _B

    def px(f: float) -> float:
        lf = lo if f <= 0 else min(max(math.log10(f), lo), hi)
        return _L + (lf - lo) / (hi - lo) * pw

    def py(m: float) -> float:
        return _T + (1.0 - m) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    for e in range(math.ceil(lo), math.floor(hi) + 1):
        x = px(10.0**e)
        out.append(f'<line x1="{x:.2f}" y1="{_T}" x2="{x:.2f}" y2="{_T + ph}" stroke="#ccc"/>')
        out.append(f'<text x="{x:.2f}" y="{_T + ph + 16}" font-size="11" text-anchor="middle">1e{e}</text>')
    for k in range(6):
        m = k / 5
        y = py(m)
        out.append(f'<line x1="{_L}" y1="{y:.2f}" x2="{_L + pw}" y2="{y:.2f}" stroke="#eee"/>')
        out.append(f'<text x="{_L - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{m:.1f}</text>')
    out.append(f'<rect x="{_L}" y="{_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{_L + pw / 2:.2f}" y="{_H - 12}" font-size="12" text-anchor="middle">false positives per image</text>')
    out.append(f'<text x="14" y="{_T + ph / 2:.2f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {_T + ph / 2:.2f})">miss rate</text>')
    for k, arm in enumerate(sorted(curves)):
        c = curves[arm]
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{px(f):.2f},{py(m):.2f}" for f, m in zip(c.fppi, c.mr))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = _T + 16 + 16 * k
        out.append(f'<line x1="{_L + pw - 150}" y1="{ly - 4}" x2="{_L + pw - 130}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_L + pw - 124}" y="{ly}" font-size="11">{arm} lamr {100 * c.lamr:.2f}%</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report, out_dir: str | Path) -> list[Path]:
    """Write results.csv, curves.csv, curves.svg and summary.json; returns the paths.

    ``report`` may be partial or empty; empty reports give header-only CSVs
    and an SVG with bare axes.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    rows = [r.row() for r in report.results]
    curves = {}
    for arm in sorted({r.arm for r in report.results}):
        c = report.pooled_curve(arm)
        if c is not None:
            curves[arm] = c
    fppi_range = report.config.fppi_range
    files = {
        "results.csv": results_csv(rows),
        "curves.csv": curves_csv(curves),
        "curves.svg": curves_svg(curves, fppi_range),
        "summary.json": json.dumps({"arms": report.summary(), "misleading": {str(k): v for k, v in sorted(report.misleading.items())}}, indent=1, sort_keys=True) + "\n",
    }
    paths = []
    for name, text in files.items():
        p = out / name
        try:
            atomic_write_text(p, text)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        paths.append(p)
    return paths
