"""Search reports: energy/accuracy scatter (SVG), Pareto-front CSV, tau summary."""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence
from xml.sax.saxutils import escape

from .evolution import FitnessRecord, kendall_tau, pareto_front
from .space import format_candidate

TOP_FRACTION = 0.2


def top_accuracy(records: Sequence[FitnessRecord], fraction: float = TOP_FRACTION) -> set[int]:
    """Indices of the ``ceil(fraction * n)`` most accurate records (ties by
    evaluation order)."""
    n = len(records)
    k = max(1, math.ceil(fraction * n - 1e-9)) if n else 0
    order = sorted(range(n), key=lambda i: (-records[i].accuracy, i))
    return set(order[:k])


def front_csv(front: Sequence[FitnessRecord]) -> str:
    """Rows ``candidate,fr,energy_joules,accuracy`` in front order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "fr", "energy_joules", "accuracy"])
    for r in front:
        w.writerow([format_candidate(r.candidate), "" if r.fr is None else repr(r.fr),
                    repr(r.energy), repr(r.accuracy)])
    return buf.getvalue()


def tau_summary(records: Sequence[FitnessRecord]) -> float:
    """Kendall tau between accuracy and energy over ``records``."""
    return kendall_tau([r.accuracy for r in records], [r.energy for r in records])


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def scatter_svg(records: Sequence[FitnessRecord], width: int = 640, height: int = 480,
                title: str = "searched candidates") -> str:
    """One circle per record (energy on x, accuracy on y).  The most accurate
    20% are filled red, the Pareto front is drawn as a polyline."""
    if len(records) < 2:
        raise ValueError("a scatter report needs at least two records")
    left, right, top, bottom = 70, 20, 40, 50
    es = [r.energy for r in records]
    acs = [r.accuracy for r in records]
    e0, e1 = min(es), max(es)
    a0, a1 = min(acs), max(acs)
    if e1 == e0:
        e0, e1 = e0 - 0.5 * abs(e0 or 1.0), e1 + 0.5 * abs(e1 or 1.0)
    if a1 == a0:
        a0, a1 = a0 - 0.01, a1 + 0.01
    pw, ph = width - left - right, height - top - bottom

    def xy(e, a):
        return left + (e - e0) / (e1 - e0) * pw, top + (1.0 - (a - a0) / (a1 - a0)) * ph

    best = top_accuracy(records)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle" font-size="13">energy (J)</text>',
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {top + ph / 2})">accuracy</text>',
        f'<text x="{left}" y="{height - 30}" font-size="10">{_fmt(e0)}</text>',
        f'<text x="{left + pw}" y="{height - 30}" font-size="10" text-anchor="end">{_fmt(e1)}</text>',
        f'<text x="{left - 4}" y="{top + ph}" font-size="10" text-anchor="end">{_fmt(a0)}</text>',
        f'<text x="{left - 4}" y="{top + 10}" font-size="10" text-anchor="end">{_fmt(a1)}</text>',
        '<g class="points">',
    ]
    for i, r in enumerate(records):
        x, y = xy(r.energy, r.accuracy)
        cls, fill = ("top", "#d62728") if i in best else ("rest", "#1f77b4")
        label = escape(format_candidate(r.candidate))
        out.append(f'<circle class="{cls}" cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{fill}" '
                   f'fill-opacity="0.7"><title>{label}</title></circle>')
    out.append("</g>")
    pts = " ".join("%.2f,%.2f" % xy(r.energy, r.accuracy) for r in pareto_front(records))
    out.append(f'<polyline class="front" points="{pts}" fill="none" stroke="#2ca02c" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
