"""Keypoint evaluation suite.

Covers the similarity-based detection metrics (OKS, mAP/mAR with greedy
matching and 101-point precision interpolation) plus the regression-style
metrics used for cropped-part benchmarks (NME, PCK, AUC, EPE), and the
procedure that derives per-keypoint falloff constants from repeated
annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

# Number of evenly spaced recall points used to interpolate precision.
PR_RECALL_POINTS = 101


class MetricError(ValueError):
    """Raised for undefined metric evaluations (e.g. no labeled joints)."""


@dataclass(frozen=True)
class OksParams:
    """Falloff constants and match thresholds for keypoint similarity.

    ``sigmas`` are the per-keypoint constants k_i.  ``scale`` optionally
    pins the instance scale s; when None, s is derived from each ground
    truth's box area as sqrt(area).
    """

    sigmas: tuple
    thresholds: tuple = DEFAULT_THRESHOLDS
    scale: Optional[float] = None

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size == 0 or np.any(s <= 0):
            raise MetricError("sigmas must be a non-empty 1-D array of positives")
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0) or np.any(t > 1) or np.any(np.diff(t) <= 0):
            raise MetricError("thresholds must be strictly increasing in (0, 1]")
        if self.scale is not None and self.scale <= 0:
            raise MetricError("scale must be positive")

    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=np.float64)


@dataclass
class PoseResult:
    """One pose instance: predicted or ground truth.

    ``visibility`` follows the 0/1/2 labeling convention; any nonzero value
    counts as labeled.  ``subset`` optionally restricts evaluation to a part
    (boolean per joint); joints outside the subset are excluded from every
    sum.  ``area`` is the instance box area, used to derive the scale s.
    """

    keypoints: np.ndarray  # (K, 2)
    visibility: np.ndarray  # (K,)
    score: float = 1.0
    area: Optional[float] = None
    subset: Optional[np.ndarray] = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.visibility = np.asarray(self.visibility)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise MetricError(f"keypoints must be (K, 2), got {self.keypoints.shape}")
        k = len(self.keypoints)
        if self.visibility.shape != (k,):
            raise MetricError(f"visibility must be ({k},), got {self.visibility.shape}")
        if not np.isin(self.visibility, (0, 1, 2)).all():
            raise MetricError("visibility values must be in {0, 1, 2}")
        if self.subset is not None:
            self.subset = np.asarray(self.subset, dtype=bool)
            if self.subset.shape != (k,):
                raise MetricError(f"subset mask must be ({k},)")
        if self.area is not None and self.area < 0:
            raise MetricError("area must be non-negative")


def _gt_scale(gt: PoseResult, params: OksParams) -> float:
    if params.scale is not None:
        return params.scale
    if gt.area is None or gt.area <= 0:
        raise MetricError("ground truth needs a positive area (or params.scale)")
    return float(np.sqrt(gt.area))


def oks(pred: PoseResult, gt: PoseResult, params: OksParams) -> float:
    """Similarity = mean over labeled joints of exp(-d^2 / (2 s^2 k^2))."""
    k = len(gt.keypoints)
    if len(pred.keypoints) != k:
        raise MetricError("prediction and ground truth keypoint counts differ")
    sigmas = params.sigma_array()
    if sigmas.shape != (k,):
        raise MetricError(f"params carry {sigmas.size} sigmas for {k} joints")
    active = gt.visibility > 0
    if gt.subset is not None:
        active = active & gt.subset
    n_active = int(active.sum())
    if n_active == 0:
        raise MetricError("OKS undefined: no labeled joints in the active subset")
    s = _gt_scale(gt, params)
    d2 = ((pred.keypoints - gt.keypoints) ** 2).sum(axis=1)
    e = d2 / (2.0 * s**2 * sigmas**2)
    return float(np.exp(-e[active]).sum() / n_active)


# --------------------------------------------------------------------------
# mAP / mAR
# --------------------------------------------------------------------------


def _greedy_match(det_order, oks_table, threshold):
    """Match detections (in score order) to the best unmatched GT."""
    n_gt = oks_table.shape[1]
    gt_taken = np.zeros(n_gt, dtype=bool)
    match = {}
    for di in det_order:
        best, best_oks = -1, threshold
        for gi in range(n_gt):
            if gt_taken[gi]:
                continue
            if oks_table[di, gi] >= best_oks:
                best, best_oks = gi, oks_table[di, gi]
        if best >= 0:
            gt_taken[best] = True
            match[di] = best
    return match


def _ap_from_matches(scored_flags, n_gt):
    """101-point interpolated AP from (score, is_tp) pairs."""
    if n_gt == 0:
        return float("nan"), float("nan")
    if not scored_flags:
        return 0.0, 0.0
    scored_flags = sorted(scored_flags, key=lambda p: -p[0])
    tp = np.cumsum([f for _, f in scored_flags])
    fp = np.cumsum([not f for _, f in scored_flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    grid = np.linspace(0.0, 1.0, PR_RECALL_POINTS)
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    ap = float(interp.mean())
    ar = float(recall[-1])
    return ap, ar


def map_mar(detections: dict, ground_truths: dict, params: OksParams) -> dict:
    """COCO-style keypoint AP/AR.

    ``detections`` and ``ground_truths`` map image id to lists of
    :class:`PoseResult`.  Per threshold: detections are visited in score
    order and greedily matched (within their image) to the unmatched ground
    truth with the highest similarity at or above the threshold.  AP uses the
    101-point interpolated precision-recall integral over the pooled
    detections; AR is the final recall.  Ground truths with no labeled
    joints are ignored.
    """
    image_ids = sorted(ground_truths)
    per_image = []
    n_gt = 0
    for img in image_ids:
        gts = [g for g in ground_truths[img] if np.any(g.visibility > 0)]
        dets = list(detections.get(img, []))
        table = np.zeros((len(dets), len(gts)))
        for di, det in enumerate(dets):
            for gi, gt in enumerate(gts):
                table[di, gi] = oks(det, gt, params)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        per_image.append((img, dets, order, table, len(gts)))
        n_gt += len(gts)

    thresholds = list(params.thresholds)
    ap_per_t, ar_per_t = [], []
    for t in thresholds:
        scored_flags = []
        for img, dets, order, table, _ in per_image:
            match = _greedy_match(order, table, t)
            for di, det in enumerate(dets):
                scored_flags.append((det.score, di in match))
        ap, ar = _ap_from_matches(scored_flags, n_gt)
        ap_per_t.append(ap)
        ar_per_t.append(ar)
    return {
        "thresholds": thresholds,
        "ap_per_threshold": ap_per_t,
        "ar_per_threshold": ar_per_t,
        "map": float(np.mean(ap_per_t)) if n_gt else float("nan"),
        "mar": float(np.mean(ar_per_t)) if n_gt else float("nan"),
        "n_ground_truths": n_gt,
    }


# --------------------------------------------------------------------------
# Regression-style metrics
# --------------------------------------------------------------------------


def _paired(preds, gts):
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 2 or preds.shape[1] != 2:
        raise MetricError(f"expected matching (K, 2) arrays, got {preds.shape} vs {gts.shape}")
    if preds.shape[0] == 0:
        raise MetricError("need at least one joint")
    return preds, gts


def _errors(preds, gts) -> np.ndarray:
    preds, gts = _paired(preds, gts)
    return np.linalg.norm(preds - gts, axis=1)


def nme(preds, gts, normalizer: float) -> float:
    """Mean Euclidean error divided by the inter-ocular distance."""
    if normalizer <= 0:
        raise MetricError(f"normalizer must be positive, got {normalizer}")
    return float(_errors(preds, gts).mean() / normalizer)


def pck(preds, gts, box_size, sigma: float = 0.2) -> float:
    """Fraction of joints with error <= sigma * max(box w, box h)."""
    w, h = box_size
    if max(w, h) <= 0:
        raise MetricError(f"degenerate box {box_size}")
    if sigma <= 0:
        raise MetricError("sigma must be positive")
    thresh = sigma * max(w, h)
    return float((_errors(preds, gts) <= thresh).mean())


def auc(preds, gts, max_threshold: float = 30.0, grid_points: int = 3001) -> float:
    """Normalized trapezoidal integral of the correct fraction over absolute
    pixel thresholds on [0, max_threshold].

    The fixed grid makes the value reproducible; with the default 3001
    points each jump of the underlying step function contributes at most
    half a grid step of bias.
    """
    if max_threshold <= 0:
        raise MetricError("max_threshold must be positive")
    errs = _errors(preds, gts)
    grid = np.linspace(0.0, max_threshold, grid_points)
    frac = (errs[None, :] <= grid[:, None]).mean(axis=1)
    return float(np.trapezoid(frac, grid) / max_threshold)


def epe(preds, gts) -> float:
    """Mean endpoint error in pixels."""
    return float(_errors(preds, gts).mean())


# --------------------------------------------------------------------------
# Falloff constants from repeated annotations
# --------------------------------------------------------------------------


def sigmas_from_annotators(instances) -> tuple[np.ndarray, list[int]]:
    """Per-keypoint normalized spread of repeated human labelings.

    Each instance is a dict with ``keypoints`` (A, K, 2) for A annotators,
    ``visibility`` (A, K) and ``scale`` s.  For keypoint k the constant is
    the pooled radial population standard deviation of the annotator
    coordinates about their per-instance mean, normalized by s:

        sigma_k = sqrt( mean over labeled (instance, annotator) pairs of
                        ||p - p_bar||^2 / s^2 )

    Only (instance, keypoint) cells labeled by >= 2 annotators contribute.
    Returns the sigma array and the indices of keypoints with no usable
    cells anywhere (reported, their sigma is NaN).
    """
    if not instances:
        raise MetricError("need at least one instance")
    k = None
    sq_sum = None
    counts = None
    for inst in instances:
        pts = np.asarray(inst["keypoints"], dtype=np.float64)
        vis = np.asarray(inst["visibility"])
        s = float(inst["scale"])
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise MetricError(f"keypoints must be (A, K, 2), got {pts.shape}")
        if pts.shape[0] < 2:
            raise MetricError("need >= 2 annotators per instance")
        if vis.shape != pts.shape[:2]:
            raise MetricError("visibility must be (A, K)")
        if s <= 0:
            raise MetricError("instance scale must be positive")
        if k is None:
            k = pts.shape[1]
            sq_sum = np.zeros(k)
            counts = np.zeros(k, dtype=int)
        elif pts.shape[1] != k:
            raise MetricError("inconsistent keypoint layout across instances")
        labeled = vis > 0
        for ki in range(k):
            rows = pts[labeled[:, ki], ki]
            if len(rows) < 2:
                continue
            mean = rows.mean(axis=0)
            sq_sum[ki] += ((rows - mean) ** 2).sum() / s**2
            counts[ki] += len(rows)
    sigmas = np.full(k, np.nan)
    usable = counts > 0
    sigmas[usable] = np.sqrt(sq_sum[usable] / counts[usable])
    excluded = [int(i) for i in np.flatnonzero(~usable)]
    return sigmas, excluded


# --------------------------------------------------------------------------
# Whole-body part layout and report
# --------------------------------------------------------------------------

# 133-keypoint partition: body, feet, face, left hand, right hand.
PART_SLICES = {
    "body": slice(0, 17),
    "foot": slice(17, 23),
    "face": slice(23, 91),
    "lefthand": slice(91, 112),
    "righthand": slice(112, 133),
    "hand": slice(91, 133),
}
N_WHOLEBODY = 133


def load_sigmas(path=None) -> np.ndarray:
    """Per-keypoint falloff constants for the 133-joint layout.

    Reads the packaged defaults unless ``path`` points at a replacement
    file.  Each part maps to either a full list or a scalar applied to all
    of its joints.
    """
    import yaml

    if path is None:
        from importlib import resources

        text = resources.files("wbnas").joinpath("data/oks_sigmas.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    cfg = yaml.safe_load(text)
    part_counts = {"body": 17, "foot": 6, "face": 68, "hand": 42}
    pieces = []
    for part, n in part_counts.items():
        val = cfg[part]
        if np.isscalar(val):
            pieces.append(np.full(n, float(val)))
        else:
            arr = np.asarray(val, dtype=np.float64)
            if arr.shape != (n,):
                raise MetricError(f"{part} needs {n} sigmas, got {arr.shape}")
            pieces.append(arr)
    return np.concatenate(pieces)


def part_subset(part: str, n_keypoints: int = N_WHOLEBODY) -> np.ndarray:
    """Boolean mask selecting one part of the whole-body layout."""
    if part == "whole-body":
        return np.ones(n_keypoints, dtype=bool)
    if part not in PART_SLICES:
        raise MetricError(f"unknown part {part!r}; known: {sorted(PART_SLICES)} + whole-body")
    mask = np.zeros(n_keypoints, dtype=bool)
    mask[PART_SLICES[part]] = True
    return mask


def evaluate_parts(detections, ground_truths, params, parts=None) -> dict:
    """AP/AR per part column plus whole-body, sharing the whole-person scale."""
    if parts is None:
        parts = ["body", "foot", "face", "hand", "whole-body"]
    out = {}
    for part in parts:
        mask = part_subset(part)
        masked_gts = {
            img: [
                PoseResult(
                    keypoints=g.keypoints,
                    visibility=g.visibility,
                    score=g.score,
                    area=g.area,
                    subset=mask if g.subset is None else (g.subset & mask),
                )
                for g in gts
            ]
            for img, gts in ground_truths.items()
        }
        out[part] = map_mar(detections, masked_gts, params)
    return out


def report_lines(part_results: dict) -> list[str]:
    """Plain-text table: one AP/AR row per part."""
    lines = [f"{'part':<12} {'AP':>7} {'AR':>7}"]
    for part, res in part_results.items():
        lines.append(f"{part:<12} {res['map']:>7.4f} {res['mar']:>7.4f}")
    return lines
