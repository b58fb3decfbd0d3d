"""Evaluation suite: overlap scores, surface and skeleton distances, area
reproducibility statistics, scan-rescan session aggregation, and majority-vote
label fusion.

Metrics that lose meaning on degenerate inputs (conformity without true
positives, distances for empty masks) return an `Undefined` sentinel carrying
the reason instead of NaN or infinity.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CordsegError, ShapeError
from .pipeline import GM, WM, LABEL_NAMES, LabelMap, boundary_pixels


class MetricError(CordsegError):
    """Metric preconditions violated (too few values, zero mean, ...)."""


class Undefined:
    """Sentinel for a metric without a defined value."""

    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason

    def __repr__(self):
        return f"Undefined({self.reason!r})"

    def __eq__(self, other):
        return isinstance(other, Undefined) and other.reason == self.reason


MetricValue = "float | Undefined"


def is_defined(value) -> bool:
    return not isinstance(value, Undefined)


# ---------------------------------------------------------------------------
# overlap


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_mask(obj, cls: int | None) -> np.ndarray:
    if isinstance(obj, LabelMap):
        obj = obj.classes
    arr = np.asarray(obj)
    if cls is None:
        return arr.astype(bool)
    return arr == cls


def confusion(auto, ref, cls: int | None = None) -> ConfusionCounts:
    """Exact pixel counts of a binary (or one-vs-rest) comparison."""
    a = _as_mask(auto, cls)
    r = _as_mask(ref, cls)
    if a.shape != r.shape:
        raise ShapeError(f"extent mismatch: {a.shape} vs {r.shape}")
    tp = int(np.count_nonzero(a & r))
    fp = int(np.count_nonzero(a & ~r))
    fn = int(np.count_nonzero(~a & r))
    tn = a.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


@dataclass(frozen=True)
class OverlapMetrics:
    dsc: float
    jaccard: float
    conformity: "float | Undefined"
    tpr: "float | Undefined"
    tnr: "float | Undefined"
    precision: "float | Undefined"


def overlap_metrics(counts: ConfusionCounts) -> OverlapMetrics:
    """DSC, Jaccard, conformity, TPR, TNR, precision from pixel counts.

    Empty-vs-empty comparisons score DSC = J = 1; conformity needs TP > 0.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if tp + fp + fn == 0:
        dsc, jaccard = 1.0, 1.0
    else:
        dsc = 2.0 * tp / (2.0 * tp + fp + fn)
        jaccard = tp / (tp + fp + fn)
    conformity = ((1.0 - (fp + fn) / tp) * 100.0 if tp > 0
                  else Undefined("conformity needs at least one true positive"))
    tpr = (100.0 * tp / (tp + fn) if tp + fn > 0
           else Undefined("no positives in reference"))
    tnr = (100.0 * tn / (tn + fp) if tn + fp > 0
           else Undefined("no negatives in reference"))
    precision = (100.0 * tp / (tp + fp) if tp + fp > 0
                 else Undefined("no positives in prediction"))
    return OverlapMetrics(dsc, jaccard, conformity, tpr, tnr, precision)


def dsc(auto, ref, cls: int | None = None) -> float:
    return overlap_metrics(confusion(auto, ref, cls)).dsc


# ---------------------------------------------------------------------------
# distances


def _scaled_points(mask: np.ndarray, spacing_mm) -> np.ndarray:
    pts = np.argwhere(mask).astype(np.float64)
    pts[:, 0] *= spacing_mm[0]
    pts[:, 1] *= spacing_mm[1]
    return pts


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each src point the Euclidean distance to the closest dst point."""
    dr = src[:, 0:1] - dst[None, :, 0]
    dc = src[:, 1:2] - dst[None, :, 1]
    return np.sqrt(dr * dr + dc * dc).min(axis=1)


def surface_distances(auto, ref, spacing_mm=(1.0, 1.0)):
    """(mean surface distance, Hausdorff distance) in mm between mask
    boundaries (4-connectivity boundary extraction)."""
    a = _as_mask(auto, None)
    r = _as_mask(ref, None)
    if a.shape != r.shape:
        raise ShapeError(f"extent mismatch: {a.shape} vs {r.shape}")
    if not a.any() or not r.any():
        u = Undefined("surface distance needs two nonempty masks")
        return u, u
    pa = _scaled_points(boundary_pixels(a), spacing_mm)
    pr = _scaled_points(boundary_pixels(r), spacing_mm)
    d_ar = _nearest_distances(pa, pr)
    d_ra = _nearest_distances(pr, pa)
    hd = max(float(d_ar.max()), float(d_ra.max()))
    md = 0.5 * (float(d_ar.mean()) + float(d_ra.mean()))
    return md, hd


def zhang_suen_skeleton(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to a 1-px skeleton (two-subiteration thinning)."""
    img = np.asarray(mask, dtype=np.uint8).copy()

    def neighbors(padded):
        # P2..P9 clockwise starting north.
        return (padded[:-2, 1:-1], padded[:-2, 2:], padded[1:-1, 2:],
                padded[2:, 2:], padded[2:, 1:-1], padded[2:, :-2],
                padded[1:-1, :-2], padded[:-2, :-2])

    while True:
        changed = False
        for step in (0, 1):
            padded = np.pad(img, 1)
            p2, p3, p4, p5, p6, p7, p8, p9 = neighbors(padded)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = sum(ring[:8])
            transitions = sum((ring[i] == 0) & (ring[i + 1] == 1) for i in range(8))
            if step == 0:
                extra = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                extra = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            kill = (img == 1) & (b >= 2) & (b <= 6) & (transitions == 1) & extra
            if kill.any():
                img[kill] = 0
                changed = True
        if not changed:
            return img.astype(bool)


def skeleton_distances(auto, ref, spacing_mm=(1.0, 1.0)):
    """(skeletonized Hausdorff, skeletonized median distance) in mm between
    the thinned point sets of the two masks."""
    a = _as_mask(auto, None)
    r = _as_mask(ref, None)
    if a.shape != r.shape:
        raise ShapeError(f"extent mismatch: {a.shape} vs {r.shape}")
    sa = zhang_suen_skeleton(a)
    sr = zhang_suen_skeleton(r)
    if not sa.any() or not sr.any():
        u = Undefined("skeleton is empty")
        return u, u
    pa = _scaled_points(sa, spacing_mm)
    pr = _scaled_points(sr, spacing_mm)
    pooled = np.concatenate([_nearest_distances(pa, pr), _nearest_distances(pr, pa)])
    return float(np.max(pooled)), float(np.median(pooled))


# ---------------------------------------------------------------------------
# areas


def area(mask, spacing_mm=(1.0, 1.0)) -> float:
    """Pixel count times the pixel area in mm^2."""
    m = _as_mask(mask, None)
    return float(np.count_nonzero(m)) * spacing_mm[0] * spacing_mm[1]


def rsd(values) -> float:
    """Relative standard deviation (coefficient of variation) in percent,
    sample standard deviation with n-1 divisor."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise MetricError(f"RSD needs at least 2 values, got {values.size}")
    mean = values.mean()
    if mean == 0.0:
        raise MetricError("RSD undefined for zero mean")
    return 100.0 * float(values.std(ddof=1)) / float(mean)


# ---------------------------------------------------------------------------
# per-slice reports


TABLE3_METRICS = ("dsc", "md", "hd", "shd", "smd", "tpr", "tnr", "precision",
                  "jaccard", "conformity")


@dataclass
class SliceMetrics:
    subject: str
    scan: int
    slice_index: int
    cls: int
    dsc: float
    jaccard: float
    conformity: "float | Undefined"
    tpr: "float | Undefined"
    tnr: "float | Undefined"
    precision: "float | Undefined"
    md: "float | Undefined"
    hd: "float | Undefined"
    shd: "float | Undefined"
    smd: "float | Undefined"
    area_mm2: float

    def value(self, metric: str):
        return getattr(self, "area_mm2" if metric == "area" else metric)


def evaluate_pair(auto: LabelMap, ref: LabelMap, classes=(GM, WM)) -> list[SliceMetrics]:
    """All per-class metrics for one automatic/reference segmentation pair."""
    if auto.classes.shape != ref.classes.shape:
        raise ShapeError(f"extent mismatch: {auto.classes.shape} vs {ref.classes.shape}")
    spacing = ref.spacing_mm
    out = []
    for cls in classes:
        counts = confusion(auto.classes, ref.classes, cls)
        ov = overlap_metrics(counts)
        md, hd = surface_distances(auto.classes == cls, ref.classes == cls, spacing)
        shd, smd = skeleton_distances(auto.classes == cls, ref.classes == cls, spacing)
        out.append(SliceMetrics(
            ref.subject_id, ref.scan_index, ref.slice_index, cls,
            ov.dsc, ov.jaccard, ov.conformity, ov.tpr, ov.tnr, ov.precision,
            md, hd, shd, smd, area(auto.classes == cls, spacing)))
    return out


def mean_std(values) -> tuple[float, float]:
    vals = [v for v in values if is_defined(v)]
    if not vals:
        return math.nan, math.nan
    if len(vals) == 1:
        return float(vals[0]), 0.0
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


def write_report_csv(rows: list[SliceMetrics], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "scan", "slice", "class"]
                        + list(TABLE3_METRICS) + ["area_mm2"])
        for row in rows:
            record = [row.subject, row.scan, row.slice_index,
                      LABEL_NAMES.get(row.cls, row.cls)]
            for metric in TABLE3_METRICS:
                v = row.value(metric)
                record.append("undef" if isinstance(v, Undefined) else f"{v:.6f}")
            record.append(f"{row.area_mm2:.6f}")
            writer.writerow(record)


def table3_summary(rows: list[SliceMetrics], cls: int = GM) -> dict[str, tuple[float, float]]:
    """Challenge-style mean +- std of the ten metrics for one class."""
    subset = [r for r in rows if r.cls == cls]
    return {m: mean_std([r.value(m) for r in subset]) for m in TABLE3_METRICS}


def write_table3_csv(summaries: dict[str, dict], path) -> None:
    """summaries: method name -> table3_summary dict."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + [f"{name} {part}" for name in summaries
                                      for part in ("mean", "std")])
        for metric in TABLE3_METRICS:
            record = [metric]
            for name in summaries:
                mean, std = summaries[name][metric]
                record += [f"{mean:.4f}", f"{std:.4f}"]
            writer.writerow(record)


# ---------------------------------------------------------------------------
# scan-rescan sessions


@dataclass
class PairStats:
    subject: str
    slice_index: int
    scans: tuple[int, int]
    cls: int
    dsc: float
    hd: "float | Undefined"
    rsd_area: "float | Undefined"


@dataclass
class SessionStats:
    intra: list[PairStats] = field(default_factory=list)
    inter: list[PairStats] = field(default_factory=list)
    skipped: list[tuple[str, int, str]] = field(default_factory=list)

    def block(self, which: str, cls: int) -> dict[str, tuple[float, float]]:
        rows = [p for p in (self.intra if which == "intra" else self.inter)
                if p.cls == cls]
        return {
            "dsc": mean_std([p.dsc for p in rows]),
            "hd": mean_std([p.hd for p in rows]),
            "rsd": mean_std([p.rsd_area for p in rows]),
        }


def session_stats(segmentations: dict[tuple[str, int], dict[int, LabelMap]],
                  repositioned_scan: int = 3,
                  classes=(GM, WM)) -> SessionStats:
    """Scan-rescan precision: pairwise DSC/HD/area-RSD per anatomical slice.

    Intra-session pairs come from the scans acquired without repositioning;
    inter-session pairs couple each of them with the repositioned scan.
    Slices missing a scan are skipped with a warning.
    """
    stats = SessionStats()
    for (subject, slice_index), by_scan in sorted(segmentations.items()):
        scans = sorted(by_scan)
        stay = [s for s in scans if s != repositioned_scan]
        if len(scans) < 2 or repositioned_scan not in scans or len(stay) < 2:
            reason = f"has scans {scans}, need {stay} plus scan {repositioned_scan}"
            stats.skipped.append((subject, slice_index, reason))
            warnings.warn(f"session_stats: skipping {subject} slice {slice_index}: {reason}")
            continue
        intra_pairs = [(stay[i], stay[j]) for i in range(len(stay))
                       for j in range(i + 1, len(stay))]
        inter_pairs = [(s, repositioned_scan) for s in stay]
        for which, pairs in (("intra", intra_pairs), ("inter", inter_pairs)):
            for s1, s2 in pairs:
                m1, m2 = by_scan[s1], by_scan[s2]
                for cls in classes:
                    a = m1.classes == cls
                    b = m2.classes == cls
                    _, hd = surface_distances(a, b, m1.spacing_mm)
                    areas = [area(a, m1.spacing_mm), area(b, m2.spacing_mm)]
                    try:
                        pair_rsd = rsd(areas)
                    except MetricError:
                        pair_rsd = Undefined("zero mean area")
                    entry = PairStats(subject, slice_index, (s1, s2), cls,
                                      dsc(a, b), hd, pair_rsd)
                    (stats.intra if which == "intra" else stats.inter).append(entry)
    return stats


def write_table1_csv(blocks: dict[str, dict], path) -> None:
    """Accuracy / intra-session / inter-session summary in the scan-rescan
    table layout. blocks: method -> {class -> {"accuracy": {...}, "intra":
    {...}, "inter": {...}}} with metric -> (mean, std) leaves."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "method",
                         "acc_dsc_mean", "acc_dsc_std", "acc_hd_mean", "acc_hd_std",
                         "intra_dsc_mean", "intra_dsc_std", "intra_hd_mean", "intra_hd_std",
                         "intra_rsd_mean", "intra_rsd_std",
                         "inter_dsc_mean", "inter_dsc_std", "inter_hd_mean", "inter_hd_std",
                         "inter_rsd_mean", "inter_rsd_std"])
        for method, per_class in blocks.items():
            for cls, section in per_class.items():
                record = [LABEL_NAMES.get(cls, cls), method]
                acc = section.get("accuracy", {})
                record += [_fmt(acc.get("dsc")), _fmt(acc.get("hd"))]
                for which in ("intra", "inter"):
                    blk = section.get(which, {})
                    record += [_fmt(blk.get("dsc")), _fmt(blk.get("hd")), _fmt(blk.get("rsd"))]
                writer.writerow([x for pair in record for x in pair])


def _fmt(pair) -> tuple[str, str]:
    if pair is None:
        return "", ""
    mean, std = pair
    fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"
    return fmt(mean), fmt(std)


# ---------------------------------------------------------------------------
# majority voting


def majority_vote(label_maps: list[np.ndarray], threshold: int = 2,
                  num_classes: int = 3) -> np.ndarray:
    """Per-pixel consensus: a foreground class wins where its votes strictly
    exceed the threshold; competing classes resolve by vote count, then by
    the lower class index; everything else is background."""
    if not label_maps:
        raise MetricError("majority_vote needs at least one label map")
    arrays = [lm.classes if isinstance(lm, LabelMap) else np.asarray(lm)
              for lm in label_maps]
    shape = arrays[0].shape
    for i, arr in enumerate(arrays):
        if arr.shape != shape:
            raise ShapeError(f"label map {i} extent {arr.shape} != {shape}")
    votes = np.zeros((num_classes - 1,) + shape, dtype=np.int32)
    for arr in arrays:
        for cls in range(1, num_classes):
            votes[cls - 1] += arr == cls
    eligible = votes > threshold
    masked = np.where(eligible, votes, -1)
    best = masked.argmax(axis=0)            # ties pick the lower class index
    out = np.where(eligible.any(axis=0), best.astype(np.uint8) + 1, 0).astype(np.uint8)
    return out
