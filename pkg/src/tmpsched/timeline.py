"""Trace exporters: Chrome trace-event JSON and a standalone SVG timeline."""

from __future__ import annotations

import json
from html import escape
from pathlib import Path

from .schedule import Stream

ROW = {Stream.COMPUTE: 0, Stream.COMM: 1}
COLORS = {
    "ForwardCompute": "#4e79a7",
    "RecomputeCompute": "#f28e2b",
    "BackwardCompute": "#59a14f",
    "AllReduce": "#e15759",
    "AllGather": "#b07aa1",
}


def chrome_events(trace) -> list[dict]:
    """Complete ("X") events in microseconds; exact seconds ride along in ``args``."""
    return [
        {
            "name": e.name or str(e.op_id),
            "cat": e.kind,
            "ph": "X",
            "ts": e.start * 1e6,
            "dur": (e.end - e.start) * 1e6,
            "pid": 0,
            "tid": ROW[e.stream],
            "args": {"op_id": e.op_id, "start_s": e.start, "end_s": e.end, "stream": e.stream.value},
        }
        for e in trace
    ]


def read_chrome_trace(path: str | Path) -> list[tuple[int, float, float]]:
    """(op_id, start, end) triples back from an exported file."""
    with open(path) as fh:
        events = json.load(fh)
    return [(ev["args"]["op_id"], ev["args"]["start_s"], ev["args"]["end_s"]) for ev in events]


def svg_timeline(trace, width: int = 1200, row_height: int = 28) -> str:
    end = max((e.end for e in trace), default=0.0)
    scale = (width - 90) / end if end > 0 else 0.0
    height = 2 * row_height + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">',
        f'<text x="4" y="{20 + row_height * 0.6:.1f}">compute</text>',
        f'<text x="4" y="{20 + row_height * 1.6:.1f}">comm</text>',
    ]
    for e in trace:
        x = 80 + e.start * scale
        w = max((e.end - e.start) * scale, 0.5)
        y = 20 + ROW[e.stream] * row_height
        fill = COLORS.get(e.kind, "#999999")
        parts.append(
            f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{row_height - 4}" fill="{fill}" stroke="#222" '
            f'stroke-width="0.3"><title>{escape(e.name)} {e.start:.6g}-{e.end:.6g}s</title></rect>'
        )
    parts.append(f'<text x="80" y="{height - 6}">0 s</text>')
    parts.append(f'<text x="{width - 10}" y="{height - 6}" text-anchor="end">{end:.6g} s</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_trace(result, path: str | Path) -> list[Path]:
    """Write ``path`` (Chrome trace JSON) and a sibling ``.svg``; returns both paths."""
    path = Path(path)
    svg = path.with_suffix(".svg")
    with open(path, "w") as fh:
        json.dump(chrome_events(result.trace), fh, indent=1)
        fh.write("\n")
    with open(svg, "w") as fh:
        fh.write(svg_timeline(result.trace))
    return [path, svg]
