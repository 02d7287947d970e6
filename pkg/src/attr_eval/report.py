"""CSV tables, ranking tables and SVG charts for evaluation results."""

from __future__ import annotations

import html
from dataclasses import dataclass

from .metrics import AucSummary, EvalCurve

CURVE_HEADER = "metric,method,model,level,accuracy,ci_low,ci_high,n_images,normalized"
AUC_HEADER = "metric,method,model,auc,ci_low,ci_high,normalized"
RANKING_HEADER = "model,metric,rank,method,auc"

# ascending AUC is better for these; Insertion is the opposite
ASCENDING = {"deletion": True, "evalattai": True, "insertion": False}

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def fmt(v: float) -> str:
    return format(float(v), ".9g")


def _bool(b: bool) -> str:
    return "true" if b else "false"


def curves_csv(curves: list[EvalCurve]) -> str:
    lines = [CURVE_HEADER]
    for c in curves:
        for p in c.points:
            lines.append(",".join([c.metric, c.method, c.model, fmt(p.level), fmt(p.accuracy),
                                   fmt(p.ci_low), fmt(p.ci_high), str(c.n_images), _bool(c.normalized)]))
    return "\n".join(lines) + "\n"


def auc_csv(aucs: list[AucSummary], normalized: bool = True) -> str:
    lines = [AUC_HEADER]
    for a in aucs:
        lines.append(",".join([a.metric, a.method, a.model, fmt(a.auc), fmt(a.ci_low), fmt(a.ci_high),
                               _bool(normalized)]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# rankings


@dataclass
class RankingTable:
    columns: dict[tuple[str, str], list[tuple[str, float]]]  # (model, metric) -> [(method, auc)]

    def order(self, model: str, metric: str) -> list[str]:
        return [m for m, _ in self.columns[(model, metric)]]


def rank_methods(aucs: dict[str, float], metric: str) -> list[str]:
    """Best first; ties alphabetical."""
    sign = 1.0 if ASCENDING[metric] else -1.0
    return sorted(aucs, key=lambda m: (sign * aucs[m], m))


def build_ranking(aucs: list[AucSummary]) -> RankingTable:
    grouped: dict[tuple[str, str], dict[str, float]] = {}
    for a in aucs:
        grouped.setdefault((a.model, a.metric), {})[a.method] = a.auc
    return RankingTable({key: [(m, vals[m]) for m in rank_methods(vals, key[1])] for key, vals in grouped.items()})


def ranking_csv(table: RankingTable) -> str:
    lines = [RANKING_HEADER]
    for (model, metric), col in table.columns.items():
        for rank, (method, value) in enumerate(col, 1):
            lines.append(f"{model},{metric},{rank},{method},{fmt(value)}")
    return "\n".join(lines) + "\n"


def ranking_markdown(table: RankingTable) -> str:
    """One table per metric: ranks down, models across."""
    out = []
    metrics = list(dict.fromkeys(metric for _, metric in table.columns))
    for metric in metrics:
        models = [m for (m, k) in table.columns if k == metric]
        depth = max(len(table.columns[(m, metric)]) for m in models)
        out.append(f"### {metric}\n")
        out.append("| rank | " + " | ".join(models) + " |")
        out.append("|---|" + "---|" * len(models))
        for r in range(depth):
            cells = []
            for m in models:
                col = table.columns[(m, metric)]
                cells.append(f"{col[r][0]} ({col[r][1]:.3f})" if r < len(col) else "")
            out.append(f"| {r + 1} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def emit_ranking_table(aucs: list[AucSummary]) -> tuple[RankingTable, str, str]:
    table = build_ranking(aucs)
    return table, ranking_csv(table), ranking_markdown(table)


# --------------------------------------------------------------------------
# svg


def _n(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xmin, xmax, ymin, ymax, width=640, height=400, left=60, right=170, top=40, bottom=50):
        if xmax == xmin:
            xmax = xmin + 1.0
        if ymax == ymin:
            ymax = ymin + 1.0
        self.xmin, self.xmax, self.ymin, self.ymax = xmin, xmax, ymin, ymax
        self.width, self.height = width, height
        self.left, self.right, self.top, self.bottom = left, right, top, bottom

    def x(self, v):
        return self.left + (v - self.xmin) / (self.xmax - self.xmin) * (self.width - self.left - self.right)

    def y(self, v):
        return self.height - self.bottom - (v - self.ymin) / (self.ymax - self.ymin) * (self.height - self.top - self.bottom)


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / n for i in range(n + 1)]


def _axes(f: _Frame, title, xlabel, ylabel, xticks=None):
    e = html.escape
    x0, x1 = f.left, f.width - f.right
    y0, y1 = f.height - f.bottom, f.top
    parts = [
        f'<text x="{_n(f.width / 2)}" y="20" text-anchor="middle" font-size="14">{e(title)}</text>',
        f'<line x1="{_n(x0)}" y1="{_n(y0)}" x2="{_n(x1)}" y2="{_n(y0)}" stroke="black"/>',
        f'<line x1="{_n(x0)}" y1="{_n(y0)}" x2="{_n(x0)}" y2="{_n(y1)}" stroke="black"/>',
        f'<text x="{_n((x0 + x1) / 2)}" y="{_n(f.height - 12)}" text-anchor="middle" font-size="12">{e(xlabel)}</text>',
        f'<text x="15" y="{_n((y0 + y1) / 2)}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {_n((y0 + y1) / 2)})">{e(ylabel)}</text>',
    ]
    for t in _ticks(f.ymin, f.ymax):
        y = f.y(t)
        parts.append(f'<line x1="{_n(x0 - 4)}" y1="{_n(y)}" x2="{_n(x0)}" y2="{_n(y)}" stroke="black"/>')
        parts.append(f'<text x="{_n(x0 - 6)}" y="{_n(y + 4)}" text-anchor="end" font-size="10">{t:.2f}</text>')
    for t in (xticks if xticks is not None else _ticks(f.xmin, f.xmax)):
        x = f.x(t)
        parts.append(f'<line x1="{_n(x)}" y1="{_n(y0)}" x2="{_n(x)}" y2="{_n(y0 + 4)}" stroke="black"/>')
        parts.append(f'<text x="{_n(x)}" y="{_n(y0 + 16)}" text-anchor="middle" font-size="10">{t:g}</text>')
    return parts


def _legend(f: _Frame, labels):
    parts = []
    x = f.width - f.right + 15
    for i, label in enumerate(labels):
        y = f.top + 10 + 18 * i
        colour = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{_n(x)}" y="{_n(y - 8)}" width="12" height="10" fill="{colour}"/>')
        parts.append(f'<text x="{_n(x + 18)}" y="{_n(y + 1)}" font-size="11">{html.escape(label)}</text>')
    return parts


def _document(f: _Frame, body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{f.width}" height="{f.height}" '
            f'viewBox="0 0 {f.width} {f.height}" font-family="sans-serif">')
    bg = f'<rect x="0" y="0" width="{f.width}" height="{f.height}" fill="white"/>'
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head, bg, *body, "</svg>"]) + "\n"


def line_chart(curves: list[EvalCurve], title: str = "", xlabel: str = "level", ylabel: str = "accuracy") -> str:
    """Accuracy curves with per-point error bars."""
    if not curves:
        raise ValueError("need at least one curve")
    xs = [p.level for c in curves for p in c.points]
    ys = [v for c in curves for p in c.points for v in (p.accuracy, p.ci_low, p.ci_high)]
    if not xs:
        raise ValueError("curves have no points")
    ymax = max(1.0, max(ys))
    f = _Frame(min(xs), max(xs), 0.0, ymax)
    levels = sorted(set(xs))
    body = _axes(f, title, xlabel, ylabel, levels if len(levels) <= 12 else None)
    for i, c in enumerate(curves):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_n(f.x(p.level))},{_n(f.y(p.accuracy))}" for p in c.points)
        body.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for p in c.points:
            x, lo, hi = f.x(p.level), f.y(p.ci_low), f.y(p.ci_high)
            body.append(f'<line class="errorbar" x1="{_n(x)}" y1="{_n(lo)}" x2="{_n(x)}" y2="{_n(hi)}" stroke="{colour}"/>')
            body.append(f'<line x1="{_n(x - 3)}" y1="{_n(lo)}" x2="{_n(x + 3)}" y2="{_n(lo)}" stroke="{colour}"/>')
            body.append(f'<line x1="{_n(x - 3)}" y1="{_n(hi)}" x2="{_n(x + 3)}" y2="{_n(hi)}" stroke="{colour}"/>')
    body += _legend(f, [c.method or f"curve {i}" for i, c in enumerate(curves)])
    return _document(f, body)


def bar_chart(aucs: list[AucSummary], title: str = "", ylabel: str = "AUC") -> str:
    """One bar per summary with its interval as an error bar."""
    if not aucs:
        raise ValueError("need at least one AUC")
    ymax = max(1.0, max(a.ci_high for a in aucs))
    f = _Frame(0.0, float(len(aucs)), 0.0, ymax)
    body = _axes(f, title, "method", ylabel, xticks=[])
    slot = (f.x(1.0) - f.x(0.0))
    for i, a in enumerate(aucs):
        colour = PALETTE[i % len(PALETTE)]
        x = f.x(i) + 0.15 * slot
        w = 0.7 * slot
        y = f.y(a.auc)
        body.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(f.y(0.0) - y)}" fill="{colour}"/>')
        cx = x + w / 2
        body.append(f'<line class="errorbar" x1="{_n(cx)}" y1="{_n(f.y(a.ci_low))}" x2="{_n(cx)}" '
                    f'y2="{_n(f.y(a.ci_high))}" stroke="black"/>')
        body.append(f'<text x="{_n(cx)}" y="{_n(f.y(0.0) + 16)}" text-anchor="middle" font-size="10">'
                    f'{html.escape(a.method)}</text>')
    body += _legend(f, [a.method for a in aucs])
    return _document(f, body)


def emit_svg_chart(items, kind: str = "line", title: str = "") -> str:
    if kind == "line":
        return line_chart(list(items), title)
    if kind == "bar":
        return bar_chart(list(items), title)
    raise ValueError(f"unknown chart kind {kind!r}")
