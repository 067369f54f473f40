"""Plain-text SVG timeline: ground truth lane above, predictions lane below."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH = 960
MARGIN = 60
ROW_H = 18
LANE_GAP = 30


def _rows(intervals):
    """Greedy row packing so overlapping bars in a lane do not cover each other."""
    ends: list[float] = []
    out = []
    for s, e in intervals:
        for r, last in enumerate(ends):
            if s >= last:
                ends[r] = e
                out.append(r)
                break
        else:
            ends.append(e)
            out.append(len(ends) - 1)
    return out, max(1, len(ends))


def render_timeline(video_id: str, instances, detections, max_predictions: int = 20) -> str:
    """SVG with bar x-extents proportional to seconds.

    ``instances`` carry start_s/end_s/label; ``detections`` additionally a
    score. Only the ``max_predictions`` best detections are drawn.
    """
    dets = sorted(detections, key=lambda d: (-d.score, d.start_s))[:max_predictions]
    gts = sorted(instances, key=lambda i: (i.start_s, i.end_s))
    horizon = max([i.end_s for i in gts] + [d.end_s for d in dets] + [1e-9])
    scale = (WIDTH - 2 * MARGIN) / horizon

    def x(t: float) -> str:
        return f"{MARGIN + t * scale:.2f}"

    def w(s: float, e: float) -> str:
        return f"{max((e - s) * scale, 0.5):.2f}"

    gt_rows, n_gt = _rows([(i.start_s, i.end_s) for i in gts])
    pred_order = sorted(dets, key=lambda d: (d.start_s, -d.score))
    pred_rows, n_pred = _rows([(d.start_s, d.end_s) for d in pred_order])
    gt_top = 40
    pred_top = gt_top + n_gt * ROW_H + LANE_GAP
    height = pred_top + (n_pred * ROW_H if dets else 0) + 40

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}" font-family="monospace" font-size="10">',
        f'<text x="{MARGIN}" y="20" font-size="13">{escape(video_id)}</text>',
        f'<text x="4" y="{gt_top + 12}">GT</text>',
    ]
    for inst, r in zip(gts, gt_rows):
        y = gt_top + r * ROW_H
        color = PALETTE[inst.label % len(PALETTE)]
        parts.append(
            f'<rect x="{x(inst.start_s)}" y="{y}" width="{w(inst.start_s, inst.end_s)}" '
            f'height="{ROW_H - 4}" fill="{color}"/>'
        )
        parts.append(f'<text x="{x(inst.start_s)}" y="{y + 11}" fill="#fff">c{inst.label}</text>')
    if dets:
        parts.append(f'<text x="4" y="{pred_top + 12}">PRED</text>')
    for d, r in zip(pred_order, pred_rows):
        y = pred_top + r * ROW_H
        color = PALETTE[d.label % len(PALETTE)]
        parts.append(
            f'<rect x="{x(d.start_s)}" y="{y}" width="{w(d.start_s, d.end_s)}" '
            f'height="{ROW_H - 4}" fill="{color}" fill-opacity="{0.3 + 0.7 * d.score:.2f}"/>'
        )
        parts.append(
            f'<text x="{x(d.start_s)}" y="{y + 11}">c{d.label} {d.score:.2f}</text>'
        )
    axis_y = height - 20
    parts.append(
        f'<line x1="{MARGIN}" y1="{axis_y}" x2="{WIDTH - MARGIN}" y2="{axis_y}" stroke="#000"/>'
    )
    parts.append(f'<text x="{MARGIN}" y="{axis_y + 14}">0s</text>')
    parts.append(
        f'<text x="{WIDTH - MARGIN}" y="{axis_y + 14}" text-anchor="end">{horizon:.1f}s</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
