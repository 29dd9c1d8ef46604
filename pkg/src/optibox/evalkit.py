"""Metrics and reports for grounding and refinement runs.

Percentages are reported to two decimals with half-away-from-zero rounding.
Every evaluation asserts the structural ceiling: the fraction of queries
whose *selected proposal* reaches the IoU threshold can never exceed the
fraction of queries that have any qualifying proposal at all (the proposal
upper bound). Refined boxes are free to leave their proposal, so the bound
is asserted on selection accuracy, which is the quantity it governs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import iou
from .refinement import NO_MASK, refine_box

# Reference results from the original full-scale Flickr30k Entities
# experiments (detection backbone + full corpus — far beyond desk scale).
# Kept for display next to desk-scale numbers, never as targets.
REFERENCE_FULL_SCALE = {
    "accuracy_full_supervision": 67.04,
    "accuracy_annotation_3.12pct": 58.55,
    "accuracy_annotation_50pct": 65.85,
    "proposal_upper_bound": 84.00,
    "median_iou_before_refinement": 0.6008,
    "median_iou_after_refinement": 0.6617,
    "median_delta_iou_all_features": 0.200,
    "median_delta_iou_drop_visual": 0.106,
    "median_delta_iou_drop_box": 0.197,
    "median_delta_iou_drop_query": 0.105,
    "median_delta_iou_drop_global": 0.198,
}

DEFAULT_BUCKETS = ((0.3, 0.5), (0.5, 0.7), (0.7, 1.0))
REPORT_BUCKETS = ((0.0, 0.3),) + DEFAULT_BUCKETS


def round_pct(x):
    """Round to 2 decimals, halves away from zero."""
    return math.floor(abs(x) * 100.0 + 0.5) / 100.0 * (1 if x >= 0 else -1)


def _pct(hits, total):
    return round_pct(100.0 * hits / total)


def accuracy_at_iou(predicted, gts, threshold=0.5, strict=False):
    """Percentage of aligned (prediction, gt) pairs reaching the threshold."""
    if len(predicted) != len(gts):
        raise ValueError(
            f"prediction/gt length mismatch: {len(predicted)} vs {len(gts)}"
        )
    if not predicted:
        raise ValueError("accuracy over zero pairs is undefined")
    hits = 0
    for p, g in zip(predicted, gts):
        v = iou(p, g)
        hits += (v > threshold) if strict else (v >= threshold)
    return _pct(hits, len(predicted))


def proposal_upper_bound(records, threshold=0.5):
    """Percentage of queries with at least one qualifying proposal."""
    covered = 0
    total = 0
    for rec in records:
        for q in rec.queries:
            total += 1
            if any(iou(p, q.gt) >= threshold for p in rec.proposals):
                covered += 1
    if total == 0:
        raise ValueError("no queries to bound")
    return _pct(covered, total)


def median_iou(boxes, gts):
    if len(boxes) != len(gts):
        raise ValueError("box/gt length mismatch")
    if not boxes:
        raise ValueError("median over zero values is undefined")
    return float(np.median([iou(b, g) for b, g in zip(boxes, gts)]))


def median_delta_iou(pairs, gts):
    """Median of IoU(after, gt) - IoU(before, gt) over aligned lists."""
    if len(pairs) != len(gts):
        raise ValueError("pair/gt length mismatch")
    if not pairs:
        raise ValueError("median over zero values is undefined")
    deltas = [iou(after, g) - iou(before, g) for (before, after), g in zip(pairs, gts)]
    return float(np.median(deltas))


def _bucket_index(buckets, value):
    last = len(buckets) - 1
    for i, (lo, hi) in enumerate(buckets):
        if lo <= value < hi or (i == last and value == hi):
            return i
    return None


def iou_histogram(pairs, gts, buckets=DEFAULT_BUCKETS):
    """Counts of before- and after-IoU per bucket.

    Buckets are left-closed [lo, hi), except the last which also includes
    its upper edge. Values outside every bucket are not counted.
    """
    edges = [e for b in buckets for e in b]
    if edges != sorted(edges):
        raise ValueError(f"bucket edges must be sorted, got {buckets}")
    hist = {b: [0, 0] for b in buckets}
    for (before, after), g in zip(pairs, gts):
        bi = _bucket_index(buckets, iou(before, g))
        ai = _bucket_index(buckets, iou(after, g))
        if bi is not None:
            hist[buckets[bi]][0] += 1
        if ai is not None:
            hist[buckets[ai]][1] += 1
    return {b: tuple(c) for b, c in hist.items()}


def fine_histogram(pairs, gts, width=0.05):
    """Fixed-width bin counts over [0, 1] for external plotting."""
    n_bins = int(round(1.0 / width))
    before = np.zeros(n_bins, dtype=np.int64)
    after = np.zeros(n_bins, dtype=np.int64)
    for (b, a), g in zip(pairs, gts):
        bi = min(int(iou(b, g) / width), n_bins - 1)
        ai = min(int(iou(a, g) / width), n_bins - 1)
        before[bi] += 1
        after[ai] += 1
    return [
        (round(i * width, 10), round((i + 1) * width, 10), int(before[i]), int(after[i]))
        for i in range(n_bins)
    ]


def write_histogram_csv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write("bucket_low,bucket_high,count_before,count_after\n")
        for lo, hi, cb, ca in rows:
            f.write(f"{lo:g},{hi:g},{cb},{ca}\n")


@dataclass
class MetricsReport:
    accuracy: float  # percent, of the final (possibly refined) boxes
    selection_accuracy: float  # percent, of the selected proposals
    upper_bound: float  # percent
    median_iou: float
    median_delta_iou: float  # None when nothing was refined
    histogram: dict  # bucket -> (count_before, count_after)
    n_samples: int

    def to_text(self):
        lines = [
            f"samples: {self.n_samples}",
            f"accuracy: {self.accuracy:.2f}",
            f"selection_accuracy: {self.selection_accuracy:.2f}",
            f"proposal_upper_bound: {self.upper_bound:.2f}",
            f"median_iou: {self.median_iou:.6f}",
        ]
        if self.median_delta_iou is not None:
            lines.append(f"median_delta_iou: {self.median_delta_iou:.6f}")
        buckets = sorted(self.histogram.items())
        for k, ((lo, hi), (cb, ca)) in enumerate(buckets):
            close = "]" if k == len(buckets) - 1 else ")"
            lines.append(f"iou_bucket[{lo:g},{hi:g}{close}: before={cb} after={ca}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        delta = "" if self.median_delta_iou is None else f"{self.median_delta_iou:.6f}"
        return (
            "accuracy,selection_accuracy,upper_bound,median_iou,"
            "median_delta_iou,n_samples\n"
            f"{self.accuracy:.2f},{self.selection_accuracy:.2f},"
            f"{self.upper_bound:.2f},{self.median_iou:.6f},{delta},{self.n_samples}\n"
        )

    def save(self, text_path, csv_path=None):
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(self.to_text())
        if csv_path is not None:
            with open(csv_path, "w", encoding="utf-8") as f:
                f.write(self.to_csv())


def evaluate(records, model, *, refiner=None, threshold=0.5, mask=NO_MASK):
    """Ground every query; optionally refine; fold the metrics.

    Asserts selection accuracy <= proposal upper bound (the structural
    relation between a selector and its proposal set) on every call.
    """
    from .grounder import ground  # local import: grounder pulls heavier deps

    selected, finals, gts = [], [], []
    for rec in records:
        for q in rec.queries:
            box_sel, out = ground(q.ids, rec, model)
            box_final = box_sel
            if refiner is not None:
                box_final = refine_box(
                    box_sel,
                    rec.features[out.selected],
                    rec.gmap,
                    q.ids,
                    refiner,
                    bounds=(rec.width, rec.height),
                    mask=mask,
                )
            selected.append(box_sel)
            finals.append(box_final)
            gts.append(q.gt)

    sel_acc = accuracy_at_iou(selected, gts, threshold)
    acc = accuracy_at_iou(finals, gts, threshold)
    ub = proposal_upper_bound(records, threshold)
    assert sel_acc <= ub + 1e-9, (
        f"selection accuracy {sel_acc} exceeded the proposal upper bound {ub}"
    )
    pairs = list(zip(selected, finals))
    report = MetricsReport(
        accuracy=acc,
        selection_accuracy=sel_acc,
        upper_bound=ub,
        median_iou=median_iou(finals, gts),
        median_delta_iou=(
            median_delta_iou(pairs, gts) if refiner is not None else None
        ),
        histogram=iou_histogram(pairs, gts, REPORT_BUCKETS),
        n_samples=len(finals),
    )
    return report


def ablation_report(
    train_records, val_records, test_records, config, masks, model_factory, seeds=(0,)
):
    """Median ΔIoU per input-ablation mask, retraining once per (mask, seed).

    ``masks`` is an ordered mapping name -> FeatureMask; ``model_factory``
    builds a fresh refiner from a seed. Returns rows of
    (name, mean-over-seeds median ΔIoU).
    """
    from .train import train_optibox_independent

    rows = []
    for name, mask in masks.items():
        values = []
        for seed in seeds:
            cfg = config.replace(seed=seed)
            model = model_factory(seed)
            model, _history, test_stats = train_optibox_independent(
                train_records, val_records, test_records, cfg, model, mask=mask
            )
            values.append(test_stats["median_delta_iou"])
        rows.append((name, float(np.mean(values))))
    return rows
