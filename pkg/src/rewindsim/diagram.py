"""Text timing diagrams: one row per µop, one column per cycle."""

from __future__ import annotations

from .sim import Trace, UopRecord

LEGEND = (
    "legend: . waiting  1-9 executing in stage k (first cell = issue)  "
    "- done, awaiting retire  R retired  X squashed"
)


def _glyphs(r: UopRecord, start: int, end: int) -> str:
    cells = []
    stages = r.stage_entries
    for c in range(start, end):
        g = " "
        if c < r.dispatch_cycle:
            g = " "
        elif r.squash_cycle is not None and c == r.squash_cycle:
            g = "X"
        elif r.squash_cycle is not None and c > r.squash_cycle:
            g = " "
        elif r.retire_cycle is not None and c == r.retire_cycle:
            g = "R"
        elif r.retire_cycle is not None and c > r.retire_cycle:
            g = " "
        elif r.issue_cycle is None or c < r.issue_cycle:
            g = "."
        elif r.complete_cycle is not None and c >= r.complete_cycle:
            g = "-"
        elif stages:
            k = sum(1 for e in stages if e <= c)
            g = str(min(k, 9))
        else:
            g = "1"
        cells.append(g)
    return "".join(cells)


def render_diagram(trace: Trace, width: int = 100) -> str:
    """Render ``trace`` as text, paging cycles into blocks that fit ``width``."""
    if not trace.records:
        return LEGEND + "\n"
    label_w = max(len(f"{r.seq:>3} {r.op.value}") for r in trace.records) + 1
    span = max(8, width - label_w - 1)
    last = trace.total_cycles + 1
    out = [LEGEND]
    for start in range(0, last, span):
        end = min(last, start + span)
        ruler = "".join(str(c % 10) if c % 10 == 0 or c == start else " " for c in range(start, end))
        out.append(f"{'cycle ' + str(start):<{label_w}}|{ruler}")
        for r in trace.records:
            label = f"{r.seq:>3} {r.op.value}"
            out.append(f"{label:<{label_w}}|{_glyphs(r, start, end)}")
    return "\n".join(out) + "\n"
