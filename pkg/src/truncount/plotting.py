"""Box plots of replicate estimates and interval widths as standalone SVG.

Each figure carries the statistics it draws in a ``<desc>`` element, so the
numbers can be checked without reading pixels.
"""
from __future__ import annotations

import io
import json

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.cbook import boxplot_stats
from matplotlib.figure import Figure
from matplotlib.patches import Patch

PANEL_INCHES = (8.0, 5.0)
DPI = 100
COLOURS = {"ht": "#4c72b0", "gc": "#dd8452", "gz": "#55a868"}
ORDER = ("ht", "gc", "gz")


def _panel(ax, title, groups, n_true):
    stats_out = []
    bxp, positions, colours, ticks, labels = [], [], [], [], []
    pos = 1.0
    for prop, by_est in groups.items():
        keys = [k for k in ORDER if k in by_est] + sorted(k for k in by_est if k not in ORDER)
        start = pos
        for key in keys:
            st = boxplot_stats(by_est[key], whis=1.5)[0]
            st["label"] = key
            bxp.append(st)
            positions.append(pos)
            colours.append(COLOURS.get(key, "#8172b3"))
            stats_out.append({
                "outlier_proportion": prop,
                "estimator": key,
                "median": float(st["med"]),
                "q1": float(st["q1"]),
                "q3": float(st["q3"]),
                "whislo": float(st["whislo"]),
                "whishi": float(st["whishi"]),
                "n_fliers": int(len(st["fliers"])),
                "n": len(by_est[key]),
            })
            pos += 1.0
        ticks.append((start + pos - 1.0) / 2)
        labels.append(f"{100 * prop:.1f}%")
        pos += 0.8
    artists = ax.bxp(bxp, positions=positions, widths=0.6, patch_artist=True,
                     flierprops={"marker": "o", "markersize": 3},
                     medianprops={"color": "black"})
    for box, colour in zip(artists["boxes"], colours):
        box.set_facecolor(colour)
    if n_true is not None and n_true == n_true:
        ax.axhline(n_true, linestyle="--", color="black", linewidth=1)
    if len(groups) > 1:
        ax.set_xticks(ticks, labels)
        ax.set_xlabel("proportion of outliers")
        shown = dict.fromkeys(s["label"] for s in bxp)
        ax.legend(handles=[Patch(facecolor=COLOURS.get(k, "#8172b3"), label=k) for k in shown],
                  loc="upper left")
    else:
        ax.set_xticks(positions, [s["label"] for s in bxp])
    ax.set_title(title)
    return stats_out


def boxplot_figure(panels) -> tuple[str, list]:
    """Render ``panels`` side by side.

    ``panels`` is a list of ``(title, {proportion: {estimator: values}},
    reference_line_or_None)``. Returns the SVG text and the per-box
    statistics embedded in it.
    """
    fig = Figure(figsize=(PANEL_INCHES[0] * len(panels), PANEL_INCHES[1]), dpi=DPI)
    FigureCanvasSVG(fig)
    axes = fig.subplots(1, len(panels), squeeze=False)[0]
    stats = [_panel(ax, *panel) for ax, panel in zip(axes, panels)]
    fig.tight_layout()
    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "truncount", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    svg = buf.getvalue()
    desc = '<desc id="boxplot-stats">' + json.dumps(stats, sort_keys=True) + "</desc>"
    head_end = svg.index(">", svg.index("<svg")) + 1
    return svg[:head_end] + "\n" + desc + svg[head_end:], stats


def read_stats(svg: str) -> list:
    """Statistics embedded by :func:`boxplot_figure`."""
    start = svg.index('<desc id="boxplot-stats">') + len('<desc id="boxplot-stats">')
    return json.loads(svg[start:svg.index("</desc>", start)])
