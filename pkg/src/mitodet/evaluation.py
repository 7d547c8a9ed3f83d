"""Detection scoring: greedy centroid matching, precision/recall/F1, and the
Mann-Whitney U comparison of unpaired score sets.

Matching follows the detection-challenge convention: detections are visited
in descending score and each claims the nearest still-unclaimed ground-truth
object within the matching radius. The radius is physical (micrometres), so
results do not depend on scanner resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Detection, ObjectRecord, read_manifest
from .errors import RejectedInputError

Point = tuple[float, float]

# Exact Mann-Whitney enumeration is used up to this pooled sample size.
EXACT_ENUMERATION_LIMIT = 12


@dataclass(frozen=True)
class MatchResult:
    """Counts and pairs from matching detections against ground truth."""

    n_tp: int
    n_fp: int
    n_fn: int
    pairs: tuple[tuple[Detection, Point], ...]
    radius_um: float

    def __post_init__(self):
        if self.n_tp != len(self.pairs):
            raise RejectedInputError("n_tp must equal the number of matched pairs")


def match(
    detections: Sequence[Detection],
    truths: Sequence[Point],
    radius_um: float,
) -> MatchResult:
    """Greedily match detections to ground-truth centroids.

    Detections are processed in descending score (ties broken by centroid
    coordinates); each takes the nearest unmatched truth within radius_um
    (equidistant truths broken by coordinates). Leftover detections are FP,
    leftover truths FN.
    """
    if radius_um <= 0:
        raise RejectedInputError(f"radius_um must be > 0, got {radius_um}")
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].centroid_um),
    )
    available = set(range(len(truths)))
    pairs = []
    for det_index in order:
        det = detections[det_index]
        dx, dy = det.centroid_um
        best = None
        for t_index in available:
            tx, ty = truths[t_index]
            dist = math.hypot(tx - dx, ty - dy)
            if dist > radius_um:
                continue
            key = (dist, tx, ty)
            if best is None or key < best[0]:
                best = (key, t_index)
        if best is not None:
            t_index = best[1]
            available.discard(t_index)
            pairs.append((det, tuple(truths[t_index])))
    n_tp = len(pairs)
    return MatchResult(
        n_tp=n_tp,
        n_fp=len(detections) - n_tp,
        n_fn=len(truths) - n_tp,
        pairs=tuple(pairs),
        radius_um=radius_um,
    )


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(m: MatchResult) -> tuple[float, float, float]:
    """(precision, recall, f1) with 0-denominator conventions mapped to 0."""
    p = m.n_tp / (m.n_tp + m.n_fp) if m.n_tp + m.n_fp else 0.0
    r = m.n_tp / (m.n_tp + m.n_fn) if m.n_tp + m.n_fn else 0.0
    return p, r, f1_score(p, r)


class UMethod(str, Enum):
    EXACT = "exact"
    NORMAL_APPROX = "normal_approx"


@dataclass(frozen=True)
class UTestResult:
    u_statistic: float
    p_value: float
    method: UMethod


def _midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(
    a: Sequence[float], b: Sequence[float], alternative: str = "two-sided"
) -> UTestResult:
    """Mann-Whitney U test for two unpaired score samples.

    U is computed for sample `a` from mid-rank sums. The p-value comes from
    full enumeration of rank assignments when the pooled size is at most
    EXACT_ENUMERATION_LIMIT and there are no ties, otherwise from the
    tie-corrected normal approximation with continuity correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise RejectedInputError(f"unknown alternative {alternative!r}")
    n, m = len(a), len(b)
    if n < 1 or m < 1:
        raise RejectedInputError("both samples must be nonempty")
    pooled = list(a) + list(b)
    ranks = _midranks(pooled)
    rank_sum_a = sum(ranks[:n])
    u = rank_sum_a - n * (n + 1) / 2.0

    has_ties = len(set(pooled)) < len(pooled)
    total = n + m
    if total <= EXACT_ENUMERATION_LIMIT and not has_ties:
        # Under H0 every assignment of the n "a" ranks among 1..n+m is equally
        # likely; enumerate them all.
        base = n * (n + 1) / 2.0
        u_values = [sum(comb) - base for comb in combinations(range(1, total + 1), n)]
        count_le = sum(1 for v in u_values if v <= u)
        count_ge = sum(1 for v in u_values if v >= u)
        n_total = len(u_values)
        if alternative == "greater":
            p = count_ge / n_total
        elif alternative == "less":
            p = count_le / n_total
        else:
            p = min(1.0, 2.0 * min(count_le, count_ge) / n_total)
        return UTestResult(u_statistic=u, p_value=p, method=UMethod.EXACT)

    mu = n * m / 2.0
    tie_term = 0.0
    seen: dict[float, int] = {}
    for v in pooled:
        seen[v] = seen.get(v, 0) + 1
    for t in seen.values():
        tie_term += t**3 - t
    variance = (n * m / 12.0) * ((total + 1) - tie_term / (total * (total - 1)))
    if variance <= 0:
        # All pooled values identical: no evidence either way.
        return UTestResult(u_statistic=u, p_value=1.0, method=UMethod.NORMAL_APPROX)
    sigma = math.sqrt(variance)
    if alternative == "greater":
        p = _normal_sf((u - mu - 0.5) / sigma)
    elif alternative == "less":
        p = _normal_sf(-(u - mu + 0.5) / sigma)
    else:
        z = (abs(u - mu) - 0.5) / sigma
        p = min(1.0, 2.0 * _normal_sf(max(z, 0.0)))
    return UTestResult(u_statistic=u, p_value=p, method=UMethod.NORMAL_APPROX)


@dataclass(frozen=True)
class GroupScore:
    """Aggregated detection metrics for one tumour-type group."""

    group: str
    n_tp: int
    n_fp: int
    n_fn: int
    precision: float
    recall: float
    f1: float


def _image_group(records: Sequence[ObjectRecord]) -> str:
    types = [r.tumour_type for r in records if r.tumour_type]
    if not types:
        return "unknown"
    # An image is expected to carry one tumour type; take the most common.
    counts: dict[str, int] = {}
    for t in types:
        counts[t] = counts.get(t, 0) + 1
    return max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0]


def score_run(
    detections_by_image: Mapping[str, Sequence[Detection]],
    truth_records: Sequence[ObjectRecord],
    radius_um: float,
) -> list[GroupScore]:
    """Match per image, aggregate counts per tumour-type group.

    Images are grouped by the tumour_type of their ground-truth records
    (missing types fall under "unknown"); an "overall" row sums everything.
    Detections on images with no truth records count as false positives in
    the "unknown" group.
    """
    truths_by_image: dict[str, list[ObjectRecord]] = {}
    for record in truth_records:
        truths_by_image.setdefault(record.image_path, []).append(record)

    counts: dict[str, list[int]] = {}
    images = set(truths_by_image) | set(detections_by_image)
    for image in sorted(images):
        records = truths_by_image.get(image, [])
        group = _image_group(records)
        truths = [
            (r.centroid_px[0] * r.grid.mpp, r.centroid_px[1] * r.grid.mpp)
            for r in records
        ]
        result = match(list(detections_by_image.get(image, [])), truths, radius_um)
        bucket = counts.setdefault(group, [0, 0, 0])
        bucket[0] += result.n_tp
        bucket[1] += result.n_fp
        bucket[2] += result.n_fn

    scores = []
    total = [0, 0, 0]
    for group in sorted(counts):
        tp, fp, fn = counts[group]
        total[0] += tp
        total[1] += fp
        total[2] += fn
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        scores.append(GroupScore(group, tp, fp, fn, p, r, f1_score(p, r)))
    tp, fp, fn = total
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    scores.append(GroupScore("overall", tp, fp, fn, p, r, f1_score(p, r)))
    return scores


@dataclass
class MetricsTable:
    """Per-group metrics with mean and sd across model runs."""

    radius_um: float
    groups: list[str]
    per_run: list[dict[str, GroupScore]]
    summary: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": "omg-metrics/1",
            "radius_um": self.radius_um,
            "n_runs": len(self.per_run),
            "groups": {
                group: {
                    metric: {"mean": mean, "sd": sd}
                    for metric, (mean, sd) in metrics.items()
                }
                for group, metrics in self.summary.items()
            },
        }


def summarize_runs(
    run_scores: Sequence[Sequence[GroupScore]], radius_um: float
) -> MetricsTable:
    """Combine per-run group scores into a mean +/- sd table (sd is 0 for a
    single run, sample sd otherwise)."""
    per_run = [{s.group: s for s in scores} for scores in run_scores]
    groups = sorted({g for run in per_run for g in run})
    summary: dict[str, dict[str, tuple[float, float]]] = {}
    for group in groups:
        summary[group] = {}
        for metric in ("precision", "recall", "f1"):
            values = [
                getattr(run[group], metric) for run in per_run if group in run
            ]
            mean = float(np.mean(values))
            sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            summary[group][metric] = (mean, sd)
    return MetricsTable(radius_um=radius_um, groups=groups, per_run=per_run, summary=summary)


def render_metrics_table(table: MetricsTable) -> str:
    """Plain-text table: one row per tumour-type group plus overall."""
    header = f"{'Tumour type':<24}{'Precision':>16}{'Recall':>16}{'F1':>16}"
    lines = [header, "-" * len(header)]
    ordered = [g for g in table.groups if g != "overall"]
    if "overall" in table.groups:
        ordered.append("overall")
    for group in ordered:
        metrics = table.summary[group]
        cells = [
            f"{metrics[m][0]:.2f} ± {metrics[m][1]:.2f}"
            for m in ("precision", "recall", "f1")
        ]
        lines.append(f"{group:<24}{cells[0]:>16}{cells[1]:>16}{cells[2]:>16}")
    return "\n".join(lines)


def evaluate_run(
    detection_files: Sequence[str | Path],
    truth_manifest: str | Path,
    radius_um: float = 7.5,
) -> MetricsTable:
    """Score one or more detection files (model runs) against a truth manifest."""
    from .pipeline import read_detections

    truth_records = read_manifest(truth_manifest)
    run_scores = []
    for path in detection_files:
        by_image: dict[str, list[Detection]] = {}
        for image, det in read_detections(path):
            by_image.setdefault(image, []).append(det)
        run_scores.append(score_run(by_image, truth_records, radius_um))
    return summarize_runs(run_scores, radius_um)
