"""Comparison tables and accuracy charts built from metrics CSVs."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .trainer import METRICS_FIELDS, MetricsRecord


def mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def sample_std(values) -> float:
    """Sample standard deviation (n - 1 denominator); 0.0 for a single value."""
    values = list(values)
    if len(values) < 2:
        return 0.0
    m = mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1))


@dataclass
class ArmSummary:
    framework: str
    accuracies: list[float]
    mean: float
    std: float
    increment: float = 0.0
    rectified_fraction: float | None = None


@dataclass
class ComparisonReport:
    name: str
    seeds: list[int]
    baseline_arm: str
    arms: dict[str, ArmSummary] = field(default_factory=dict)
    dispersion: str = "sample standard deviation"

    @property
    def best_arm(self) -> str:
        return max(self.arms, key=lambda a: self.arms[a].mean)

    def to_json(self) -> str:
        d = asdict(self)
        d["best_arm"] = self.best_arm
        return json.dumps(d, indent=2) + "\n"

    def to_markdown(self) -> str:
        best = self.best_arm
        show_rect = any(a.rectified_fraction is not None for a in self.arms.values())
        head = ["Arm", "Framework", "Test accuracy (%)", f"Increment (arm - {self.baseline_arm})"]
        if show_rect:
            head.append("Rectified fraction")
        lines = [f"# {self.name}", "",
                 f"Mean ± {self.dispersion} over {len(self.seeds)} seeds {self.seeds}. Best arm in bold.", "",
                 "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for arm, s in self.arms.items():
            acc = f"{100 * s.mean:.2f} ± {100 * s.std:.2f}"
            if arm == best:
                acc = f"**{acc}**"
            row = [arm, s.framework, acc, f"{100 * s.increment:+.2f}"]
            if show_rect:
                row.append("" if s.rectified_fraction is None else f"{s.rectified_fraction:.4f}")
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"


def summarize(name: str, seeds, baseline_arm: str, cells: dict[str, dict]) -> ComparisonReport:
    """Build a report from ``{arm: {"framework": str, "runs": [(final_acc, [MetricsRecord])]}}``."""
    report = ComparisonReport(name, list(seeds), baseline_arm)
    for arm, cell in cells.items():
        accs = [acc for acc, _ in cell["runs"]]
        summary = ArmSummary(cell["framework"], accs, mean(accs), sample_std(accs))
        if cell["framework"] == "drkd":
            rows = [r.rectified_fraction for _, recs in cell["runs"] for r in recs]
            summary.rectified_fraction = mean(rows) if rows else 0.0
        report.arms[arm] = summary
    base = report.arms[baseline_arm].mean
    for arm, s in report.arms.items():
        s.increment = 0.0 if arm == baseline_arm else s.mean - base
    return report


# -- charts -------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def accuracy_svg(series: dict[str, list[MetricsRecord]], title: str = "Test accuracy") -> str:
    """Line chart of test accuracy against epoch, one polyline per series."""
    w, h = 640, 400
    left, right, top, bottom = 60, 170, 40, 50
    pw, ph = w - left - right, h - top - bottom
    max_epoch = max((r.epoch for recs in series.values() for r in recs), default=0)
    accs = [r.test_accuracy for recs in series.values() for r in recs]
    lo = math.floor(10 * min(accs, default=0.0)) / 10
    hi = max(math.ceil(10 * max(accs, default=1.0)) / 10, lo + 0.1)

    def sx(epoch):
        return left + (pw * epoch / max_epoch if max_epoch else pw / 2)

    def sy(acc):
        return top + ph * (1 - (acc - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<g class="axes" stroke="black"><line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}"/>'
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}"/></g>',
           '<g class="ticks" font-size="11">']
    for i in range(6):
        acc = lo + (hi - lo) * i / 5
        out.append(f'<text x="{left - 6}" y="{sy(acc) + 4:.1f}" text-anchor="end">{100 * acc:.0f}%</text>')
    step = max(1, math.ceil(max_epoch / 10)) if max_epoch else 1
    for e in range(0, max_epoch + 1, step):
        out.append(f'<text x="{sx(e):.1f}" y="{top + ph + 16}" text-anchor="middle">{e}</text>')
    out.append('</g>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{h - 10}" text-anchor="middle" font-size="12">epoch</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">test accuracy</text>')
    legend = ['<g class="legend" font-size="12">']
    for i, (label, recs) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(r.epoch):.2f},{sy(r.test_accuracy):.2f}" for r in recs)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        y = top + 10 + 20 * i
        legend.append(f'<g class="legend-entry"><rect x="{left + pw + 15}" y="{y - 9}" width="12" height="12" '
                      f'fill="{color}"/><text x="{left + pw + 32}" y="{y + 1}">{escape(label)}</text></g>')
    legend.append('</g>')
    out.extend(legend)
    out.append('</svg>')
    return "\n".join(out) + "\n"


def series_labels(paths) -> list[str]:
    """Readable unique labels: parent directory for ``metrics.csv`` files, else the stem."""
    labels = []
    for p in map(Path, paths):
        base = p.parent.name if p.stem == "metrics" and p.parent.name else p.stem
        label, k = base, 2
        while label in labels:
            label, k = f"{base}-{k}", k + 1
        labels.append(label)
    return labels


def merged_csv(series: dict[str, list[MetricsRecord]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("series",) + METRICS_FIELDS)
    for label, recs in series.items():
        for r in recs:
            w.writerow([label] + [repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()
