"""Leakage progression, original-vs-mitigated differences, verdict distributions.

The leakage proportion of entity ``i`` towards entity ``j`` at one block is the
fraction of ``i``'s mask tokens with at least one above-threshold score into
the target set of ``j``:

* ``IMG_TXT`` -- target is ``j``'s text; the threshold ``mu + beta1 * sigma``
  uses the same population as mask extraction (all image tokens x ``j``'s
  text), so a row counts as leaking when it looks like ``j``'s own region.
* ``IMG_IMG`` -- target is ``j``'s mask; the threshold ``mu + beta2 * sigma``
  is taken over the ``mask_i x mask_j`` cross block.
* ``BOTH`` -- a row counts if it leaks through either channel.

Thresholds are recomputed on every block.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attn import block_stats
from .evalkit.verdict import REPORT_ORDER, Label
from .masking import EntityLayout, EntityMaskSet
from .toy import Channel, RunTrace

EPS = 1e-9

CATEGORY_NAMES = {
    Label.MAJOR_IMPROVE: "Major mitigation",
    Label.MINOR_IMPROVE: "Minor mitigation",
    Label.NO_CHANGE: "No change",
    Label.MINOR_DEGRADE: "Minor degradation",
    Label.MAJOR_DEGRADE: "Major degradation",
}
CATEGORY_COLORS = {
    Label.MAJOR_IMPROVE: "#1a9850",
    Label.MINOR_IMPROVE: "#91cf60",
    Label.NO_CHANGE: "#bdbdbd",
    Label.MINOR_DEGRADE: "#fc8d59",
    Label.MAJOR_DEGRADE: "#d73027",
}

# Published ablation distributions (percent, report order).
PUBLISHED_ABLATION = (
    ("DeLeaker", (46.07, 9.76, 25.36, 5.83, 12.98)),
    ("W/O Image-Image(-)", (46.31, 10.12, 26.67, 4.29, 12.62)),
    ("W/O Image-Text(-)", (42.98, 7.62, 27.98, 6.07, 15.36)),
    ("W/O Image-Text(+)", (25.00, 7.98, 43.93, 7.02, 16.07)),
    ("With Text-Text(-)", (41.79, 8.93, 27.26, 7.02, 15.00)),
    ("Only Image-Image(-)", (11.90, 5.95, 61.90, 7.86, 12.38)),
    ("Only Image-Text(-)", (25.12, 8.57, 47.62, 5.83, 12.86)),
    ("Only Image-Text(+)", (41.55, 9.64, 31.19, 5.12, 12.50)),
)


def _row_exceeds(block: np.ndarray, threshold: float) -> np.ndarray:
    return (block > threshold).any(axis=1)


def leaking_rows(avg_scores: np.ndarray, masks: EntityMaskSet, layout: EntityLayout,
                 pair: tuple[int, int], channel: Channel, image_offset: int,
                 beta1: float = 0.9, beta2: float = 2.0) -> np.ndarray:
    """Boolean flag per token of ``mask_i``: does it attend to entity ``j``?"""
    i, j = pair
    channel = Channel(channel)
    rows = masks.tokens(i, image_offset)
    if rows.size == 0:
        raise ValueError(f"mask of entity {i} is empty")
    hit = np.zeros(rows.size, dtype=bool)
    if channel in (Channel.IMG_TXT, Channel.BOTH):
        txt = layout.text(j)
        n_img = masks.grid[0] * masks.grid[1]
        img = np.arange(image_offset, image_offset + n_img)
        mu, sigma = block_stats(avg_scores[np.ix_(img, txt)])
        hit |= _row_exceeds(avg_scores[np.ix_(rows, txt)], mu + beta1 * sigma)
    if channel in (Channel.IMG_IMG, Channel.BOTH):
        cols = masks.tokens(j, image_offset)
        if cols.size:
            blk = avg_scores[np.ix_(rows, cols)]
            mu, sigma = block_stats(blk)
            hit |= _row_exceeds(blk, mu + beta2 * sigma)
    return hit


def leakage_proportion(avg_scores: np.ndarray, masks: EntityMaskSet, layout: EntityLayout,
                       pair: tuple[int, int], channel: Channel, image_offset: int,
                       beta1: float = 0.9, beta2: float = 2.0) -> float:
    return float(np.mean(leaking_rows(avg_scores, masks, layout, pair, channel,
                                      image_offset, beta1, beta2)))


@dataclass(frozen=True)
class LeakageTrace:
    """values[step, block, p] for the unordered entity pairs ``pairs[p]``."""

    values: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    label: str
    channel: Channel = Channel.IMG_TXT
    pair_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != len(self.pairs):
            raise ValueError("values must have shape (steps, blocks, n_pairs)")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("leakage proportions must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channel", Channel(self.channel))
        if not self.pair_names:
            object.__setattr__(self, "pair_names", tuple(f"{a}:{b}" for a, b in self.pairs))

    @property
    def per_block(self) -> np.ndarray:
        """Pair-averaged leakage, shape (steps, blocks)."""
        return self.values.mean(axis=2)

    def flat(self) -> np.ndarray:
        """Pair-averaged leakage in global-block order."""
        return self.per_block.reshape(-1)


def pair_leakage(trace: RunTrace, masks: EntityMaskSet, layout: EntityLayout,
                 channel: Channel = Channel.IMG_TXT, beta1: float = 0.9, beta2: float = 2.0,
                 label: str | None = None) -> LeakageTrace:
    """Per block and unordered pair, the larger of the two directed proportions.

    Measured on the raw (pre-intervention) head-averaged fields.
    """
    if not masks.frozen:
        raise ValueError("leakage is measured against frozen masks")
    c = trace.config
    n = len(layout)
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    out = np.zeros((c.steps, c.blocks_per_step, len(pairs)))
    for g, avg in trace.iter_averaged():
        s, b = divmod(g, c.blocks_per_step)
        for p, (i, j) in enumerate(pairs):
            vals = []
            for a, bb in ((i, j), (j, i)):
                if masks.masks[a].size:
                    vals.append(leakage_proportion(avg, masks, layout, (a, bb), channel,
                                                   c.text_tokens, beta1, beta2))
            out[s, b, p] = max(vals) if vals else 0.0
    names = tuple(f"{layout.names[i]}:{layout.names[j]}" for i, j in pairs)
    return LeakageTrace(out, pairs, label or trace.label, channel, names)


@dataclass(frozen=True)
class RelativeDifference:
    values: np.ndarray  # (steps, blocks)
    floored: np.ndarray  # True where the original mean fell below EPS

    def window(self, lo: int, hi: int) -> np.ndarray:
        return self.values.reshape(-1)[lo:hi]


def relative_difference(orig: LeakageTrace, mitigated: LeakageTrace) -> RelativeDifference:
    """(mean_mitigated - mean_orig) / max(mean_orig, EPS); negative means less leakage."""
    if orig.values.shape != mitigated.values.shape or orig.pairs != mitigated.pairs:
        raise ValueError("traces differ in dimensions or pairs")
    mo, mm = orig.per_block, mitigated.per_block
    floored = mo < EPS
    return RelativeDifference((mm - mo) / np.maximum(mo, EPS), floored)


def run_mean_reduction(orig: np.ndarray, mitigated: np.ndarray) -> float:
    """Relative reduction of the overall mean, ``1 - mean(mitigated) / mean(orig)``."""
    mo = float(np.mean(orig))
    return 1.0 - float(np.mean(mitigated)) / max(mo, EPS)


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class VerdictDistribution:
    counts: tuple[int, ...]  # in REPORT_ORDER
    percentages: tuple[float, ...]
    failed: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts)

    def as_dict(self) -> dict:
        return {CATEGORY_NAMES[c]: p for c, p in zip(REPORT_ORDER, self.percentages)}


def _as_label(v) -> Label | None:
    if isinstance(v, Label):
        return v
    if isinstance(v, str):
        return Label[v]
    return getattr(v, "label", None)


def distribution_summary(verdicts: Iterable) -> VerdictDistribution:
    """Counts and 2-decimal percentages per category; FAILED cases counted apart.

    Rounding uses largest remainders, so the percentages always sum to 100.00.
    """
    labels = [_as_label(v) for v in verdicts]
    failed = sum(1 for lab in labels if lab is None)
    labels = [lab for lab in labels if lab is not None]
    if not labels:
        raise ValueError("no verdicts to summarise")
    counts = tuple(sum(1 for lab in labels if lab == c) for c in REPORT_ORDER)
    return VerdictDistribution(counts, _rounded_percentages(counts), failed)


def _rounded_percentages(counts: Sequence[int]) -> tuple[float, ...]:
    """Percentages in hundredths, largest-remainder rounded so they total exactly 100."""
    n = sum(counts)
    units = [k * 10000 // n for k in counts]
    rema = [k * 10000 % n for k in counts]
    for i in sorted(range(len(counts)), key=lambda i: -rema[i])[:10000 - sum(units)]:
        units[i] += 1
    return tuple(u / 100 for u in units)


def distribution_from_percentages(percentages: Sequence[float]) -> VerdictDistribution:
    """Wrap published percentages (report order); counts are unknown and set to 0."""
    if len(percentages) != 5:
        raise ValueError("need five percentages")
    pct = tuple(round(float(p), 2) for p in percentages)
    if round(abs(sum(pct) - 100.0), 9) > 0.01:
        raise ValueError(f"percentages sum to {sum(pct):.2f}, not 100")
    return VerdictDistribution((0,) * 5, pct)


# ---------------------------------------------------------------- emitters


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def leakage_csv(traces: Sequence[LeakageTrace]) -> str:
    rows = []
    for t in traces:
        S, B, P = t.values.shape
        for s in range(S):
            for b in range(B):
                for p in range(P):
                    rows.append((t.label, s, b, t.pair_names[p], t.channel.value,
                                 _fmt(t.values[s, b, p])))
    return _csv_text(("run_label", "step", "block", "pair", "channel", "value"), rows)


def relative_difference_csv(diff: RelativeDifference, label: str = "") -> str:
    S, B = diff.values.shape
    rows = [(label, s, b, _fmt(diff.values[s, b]), int(diff.floored[s, b]))
            for s in range(S) for b in range(B)]
    return _csv_text(("run_label", "step", "block", "relative_difference", "floored"), rows)


def distribution_csv(rows: Sequence[tuple[str, VerdictDistribution]]) -> str:
    header = ["method"] + [CATEGORY_NAMES[c] for c in REPORT_ORDER] + ["n", "failed"]
    out = [[name] + [f"{p:.2f}" for p in d.percentages] + [d.total, d.failed] for name, d in rows]
    return _csv_text(header, out)


def _esc(s: str) -> str:
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def distribution_svg(rows: Sequence[tuple[str, VerdictDistribution]], width: int = 600,
                     bar_height: int = 24) -> str:
    """Standalone horizontal stacked-bar chart, one bar per method."""
    label_w, pad, legend_h = 160, 8, 28
    bar_w = width - label_w - pad
    height = legend_h + len(rows) * (bar_height + pad) + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    x = pad
    for c in REPORT_ORDER:
        parts.append(f'<rect x="{x}" y="{pad}" width="10" height="10" fill="{CATEGORY_COLORS[c]}"/>')
        parts.append(f'<text x="{x + 14}" y="{pad + 9}">{_esc(CATEGORY_NAMES[c])}</text>')
        x += 14 + 7 * len(CATEGORY_NAMES[c]) + 10
    for r, (name, d) in enumerate(rows):
        y = legend_h + pad + r * (bar_height + pad)
        parts.append(f'<text x="{pad}" y="{y + bar_height * 0.65:.1f}">{_esc(name)}</text>')
        x0 = float(label_w)
        for c, p in zip(REPORT_ORDER, d.percentages):
            w = bar_w * p / 100.0
            parts.append(f'<rect class="segment" x="{x0:.3f}" y="{y}" width="{w:.3f}" '
                         f'height="{bar_height}" fill="{CATEGORY_COLORS[c]}">'
                         f'<title>{_esc(CATEGORY_NAMES[c])}: {p:.2f}%</title></rect>')
            x0 += w
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def relative_difference_svg(series: Sequence[tuple[str, np.ndarray]], window=None,
                            width: int = 600, height: int = 240) -> str:
    """Line chart of per-block relative differences (one polyline per run)."""
    pad = 30
    allv = np.concatenate([np.asarray(v, float).ravel() for _, v in series]) if series else np.zeros(1)
    lo, hi = min(float(allv.min()), -1.0), max(float(allv.max()), 0.1)
    n = max(len(np.ravel(v)) for _, v in series) if series else 1

    def xy(k, v):
        x = pad + (width - 2 * pad) * k / max(n - 1, 1)
        y = pad + (height - 2 * pad) * (hi - v) / (hi - lo)
        return f"{x:.2f},{y:.2f}"

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    if window is not None:
        a, b = (xy(window[0], hi), xy(window[1] - 1, lo))
        (ax, ay), (bx, by) = (map(float, a.split(",")), map(float, b.split(",")))
        parts.append(f'<rect x="{ax:.2f}" y="{ay:.2f}" width="{bx - ax:.2f}" height="{by - ay:.2f}" '
                     f'fill="#eeeeee"/>')
    zero = xy(0, 0.0).split(",")[1]
    parts.append(f'<line x1="{pad}" x2="{width - pad}" y1="{zero}" y2="{zero}" stroke="#000"/>')
    for r, (name, v) in enumerate(series):
        pts = " ".join(xy(k, x) for k, x in enumerate(np.ravel(v)))
        color = palette[r % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"><title>{_esc(name)}</title></polyline>')
        parts.append(f'<text x="{pad + 4}" y="{height - 6 - 12 * r}" fill="{color}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
