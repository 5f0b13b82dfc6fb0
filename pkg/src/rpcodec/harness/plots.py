"""RP-curve plots: one SVG per (task, metric), one series per system."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..bdmetrics import monotonicity_report  # noqa: E402

log = logging.getLogger(__name__)


def _slug(s):
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in s)


def plot_rp(report, out_dir):
    """Write the plots and return their paths.

    Turning points are drawn as red crosses and listed in the SVG
    ``Description`` metadata as JSON ``{"turning_points": {codec: [...]}}``.
    """
    curves = list(report.curves)
    if not curves:
        log.warning("empty report: no RP plots written")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = {}
    for c in curves:
        groups.setdefault((c.task_id, c.metric_name), []).append(c)
    paths = []
    for (task, metric), cs in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        marks = {}
        for c in sorted(cs, key=lambda c: c.codec_id):
            ax.plot(c.bpp, c.quality, marker="o", ms=3, lw=1.2, label=c.codec_id)
            tps = monotonicity_report(c).turning_points
            marks[c.codec_id] = [{"index": t.index, "direction": t.direction, "bpp": c.bpp[t.index]} for t in tps]
            if tps:
                ax.plot([c.bpp[t.index] for t in tps], [c.quality[t.index] for t in tps], "x", color="red", ms=8, mew=2)
        ax.set_xlabel("bpp")
        ax.set_ylabel(f"{metric} ({cs[0].orientation.replace('_', ' ')})")
        ax.set_title(task)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"rp_{_slug(task)}_{_slug(metric)}.svg"
        meta = {"Title": f"{task} {metric}", "Description": json.dumps({"turning_points": marks}, sort_keys=True)}
        fig.savefig(path, format="svg", metadata=meta)
        plt.close(fig)
        paths.append(path)
    return paths


def read_plot_metadata(path):
    """The JSON stored in a plot's ``Description`` metadata."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    for el in root.iter():
        if el.tag.endswith("description") and el.text:
            return json.loads(el.text)
    return {}
