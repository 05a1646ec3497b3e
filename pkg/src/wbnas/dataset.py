"""Whole-body annotation container: parsing, validation, statistics, and
cropped-part subset extraction.

The container is a JSON file::

    {
      "images": [{"id": 1, "width": 640, "height": 480}, ...],
      "annotations": [
        {
          "id": 1, "image_id": 1,
          "bbox": [x, y, w, h],
          "keypoints": [x1, y1, v1, ...],          # 17 body joints
          "foot_kpts": [...],                      # 6 joints
          "face_kpts": [...],                      # 68 joints
          "lefthand_kpts": [...], "righthand_kpts": [...],  # 21 each
          "face_box": [x, y, w, h], "face_valid": true,
          "lefthand_box": [...], "lefthand_valid": false,
          "righthand_box": [...], "righthand_valid": false
        }, ...
      ]
    }

Visibility flags follow the 0/1/2 convention (0 = unlabeled).  Part boxes
flagged valid must have positive area.  Box validity and joint visibility
are independent: a valid face box may still carry unlabeled face joints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, expand_roi

PART_COUNTS = {"body": 17, "foot": 6, "face": 68, "lefthand": 21, "righthand": 21}
PART_ORDER = ("body", "foot", "face", "lefthand", "righthand")
N_KEYPOINTS = sum(PART_COUNTS.values())  # 133

_KPT_FIELDS = {
    "body": "keypoints",
    "foot": "foot_kpts",
    "face": "face_kpts",
    "lefthand": "lefthand_kpts",
    "righthand": "righthand_kpts",
}
_BOX_PARTS = ("face", "lefthand", "righthand")


class DatasetError(ValueError):
    """Raised for malformed annotation containers."""


@dataclass
class WholeBodyAnnotation:
    ann_id: int
    image_id: int
    bbox: Box
    keypoints: np.ndarray  # (133, 2)
    visibility: np.ndarray  # (133,)
    part_boxes: dict = field(default_factory=dict)  # part -> (Box, valid flag)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=np.int64)
        if self.keypoints.shape != (N_KEYPOINTS, 2):
            raise DatasetError(
                f"keypoints must be ({N_KEYPOINTS}, 2), got {self.keypoints.shape}"
            )
        if self.visibility.shape != (N_KEYPOINTS,):
            raise DatasetError(f"visibility must be ({N_KEYPOINTS},)")

    def part_keypoints(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        lo = 0
        for p in PART_ORDER:
            n = PART_COUNTS[p]
            if p == part:
                return self.keypoints[lo : lo + n], self.visibility[lo : lo + n]
            lo += n
        raise DatasetError(f"unknown part {part!r}")


def _parse_triplets(raw, expected: int, what: str) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size != expected * 3:
        raise DatasetError(f"{what}: keypoint count != {expected} (got {arr.size // 3})")
    trip = arr.reshape(expected, 3)
    vis = trip[:, 2]
    if not np.isin(vis, (0.0, 1.0, 2.0)).all():
        raise DatasetError(f"{what}: visibility values must be in {{0, 1, 2}}")
    return trip[:, :2], vis.astype(np.int64)


def _record_to_annotation(rec: dict) -> WholeBodyAnnotation:
    try:
        ann_id = int(rec["id"])
        image_id = int(rec["image_id"])
        bx = rec["bbox"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"missing or malformed required field: {e}") from None
    bbox = Box(*(float(v) for v in bx))
    pts, vis = [], []
    for part in PART_ORDER:
        fname = _KPT_FIELDS[part]
        if fname not in rec:
            raise DatasetError(f"missing field {fname!r}")
        p, v = _parse_triplets(rec[fname], PART_COUNTS[part], fname)
        pts.append(p)
        vis.append(v)
    part_boxes = {}
    for part in _BOX_PARTS:
        valid = bool(rec.get(f"{part}_valid", False))
        raw = rec.get(f"{part}_box", [0.0, 0.0, 0.0, 0.0])
        box = Box(*(float(v) for v in raw))
        if valid and box.w * box.h <= 0:
            raise DatasetError(f"{part}_box flagged valid but has zero area")
        part_boxes[part] = (box, valid)
    return WholeBodyAnnotation(
        ann_id=ann_id,
        image_id=image_id,
        bbox=bbox,
        keypoints=np.vstack(pts),
        visibility=np.concatenate(vis),
        part_boxes=part_boxes,
    )


def parse(path) -> tuple[list[WholeBodyAnnotation], dict, list[str]]:
    """Load an annotation file.

    Returns (annotations, image sizes by id, diagnostics).  A malformed
    container (bad JSON, missing top-level keys) is a hard error; a
    malformed record is skipped with a line-item diagnostic.
    """
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatasetError(f"container is not valid JSON: {e}") from None
    if not isinstance(data, dict) or "annotations" not in data or "images" not in data:
        raise DatasetError("container must be an object with 'images' and 'annotations'")
    images = {}
    for img in data["images"]:
        images[int(img["id"])] = (float(img["width"]), float(img["height"]))
    annotations = []
    diagnostics = []
    for i, rec in enumerate(data["annotations"]):
        try:
            annotations.append(_record_to_annotation(rec))
        except (DatasetError, ValueError) as e:
            diagnostics.append(f"record {i}: {e}")
    return annotations, images, diagnostics


def validity_counts(annotations) -> dict:
    """How many face/left-hand/right-hand boxes are flagged valid."""
    out = {part: 0 for part in _BOX_PARTS}
    for ann in annotations:
        for part in _BOX_PARTS:
            if ann.part_boxes[part][1]:
                out[part] += 1
    out["annotations"] = len(annotations)
    return out


def _annotation_to_record(ann: WholeBodyAnnotation) -> dict:
    rec = {
        "id": ann.ann_id,
        "image_id": ann.image_id,
        "bbox": [ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h],
    }
    for part in PART_ORDER:
        pts, vis = ann.part_keypoints(part)
        flat = []
        for (x, y), v in zip(pts, vis):
            flat += [float(x), float(y), int(v)]
        rec[_KPT_FIELDS[part]] = flat
    for part in _BOX_PARTS:
        box, valid = ann.part_boxes[part]
        rec[f"{part}_box"] = [box.x, box.y, box.w, box.h]
        rec[f"{part}_valid"] = valid
    return rec


def serialize(annotations, images: dict, path) -> None:
    """Inverse of :func:`parse` on valid records (exact field round trip)."""
    data = {
        "images": [
            {"id": i, "width": w, "height": h} for i, (w, h) in sorted(images.items())
        ],
        "annotations": [_annotation_to_record(a) for a in annotations],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def _all_boxes(ann: WholeBodyAnnotation):
    yield "person", ann.bbox, True
    for part in _BOX_PARTS:
        box, valid = ann.part_boxes[part]
        yield part, box, valid


def stats_box_size(annotations, bin_edges=None) -> dict:
    """Histogram of box diagonal lengths (pixels) per part.

    Valid boxes only; zero-area boxes are excluded.  ``bin_edges`` defaults
    to 50 even bins from 0 to the largest observed diagonal.
    """
    diags = {part: [] for part in ("person",) + _BOX_PARTS}
    for ann in annotations:
        for part, box, valid in _all_boxes(ann):
            if not valid or box.w * box.h <= 0:
                continue
            diags[part].append(float(np.hypot(box.w, box.h)))
    if bin_edges is None:
        top = max((max(v) for v in diags.values() if v), default=1.0)
        bin_edges = np.linspace(0.0, top, 51)
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    out = {}
    for part, values in diags.items():
        counts, _ = np.histogram(values, bins=bin_edges)
        out[part] = {
            "bin_edges": bin_edges.tolist(),
            "counts": counts.tolist(),
            "n": len(values),
            "mean": float(np.mean(values)) if values else None,
        }
    return out


# Tree-structured edges per part (indices local to the part).
DEFAULT_SKELETONS = {
    "body": (
        (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
        (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
        (1, 3), (2, 4), (3, 5), (4, 6),
    ),
    # big toe - small toe - heel per foot
    "foot": ((0, 1), (1, 2), (3, 4), (4, 5)),
    # jaw line, brows, nose, eyes, mouth as chains
    "face": tuple((i, i + 1) for i in range(16))
    + tuple((i, i + 1) for i in range(17, 21))
    + tuple((i, i + 1) for i in range(22, 26))
    + tuple((i, i + 1) for i in range(27, 30))
    + tuple((i, i + 1) for i in range(31, 35))
    + tuple((i, i + 1) for i in range(36, 41))
    + tuple((i, i + 1) for i in range(42, 47))
    + tuple((i, i + 1) for i in range(48, 59))
    + tuple((i, i + 1) for i in range(60, 67)),
    # wrist to each finger chain
    "hand": tuple(
        e
        for f in range(5)
        for e in (((0, 1 + 4 * f),) + tuple((1 + 4 * f + j, 2 + 4 * f + j) for j in range(3)))
    ),
}


def stats_kpt_distance(annotations, skeletons=None) -> dict:
    """Mean Euclidean length of tree edges whose both endpoints are labeled."""
    if skeletons is None:
        skeletons = DEFAULT_SKELETONS
    sums = {}
    counts = {}
    part_to_skeleton = {
        "body": "body",
        "foot": "foot",
        "face": "face",
        "lefthand": "hand",
        "righthand": "hand",
    }
    for ann in annotations:
        for part in PART_ORDER:
            edges = skeletons.get(part_to_skeleton[part])
            if not edges:
                continue
            pts, vis = ann.part_keypoints(part)
            n = len(pts)
            for a, b in edges:
                if a >= n or b >= n:
                    raise DatasetError(f"skeleton edge ({a},{b}) out of range for {part}")
                if vis[a] > 0 and vis[b] > 0:
                    d = float(np.linalg.norm(pts[a] - pts[b]))
                    sums[part] = sums.get(part, 0.0) + d
                    counts[part] = counts.get(part, 0) + 1
    return {
        part: {"mean": sums[part] / counts[part], "n_edges": counts[part]}
        for part in sums
    }


def stats_center(annotations, images: dict, grid=(10, 10)) -> dict:
    """2-D histogram of box centers normalized by image width and height."""
    gx, gy = grid
    edges_x = np.linspace(0.0, 1.0, gx + 1)
    edges_y = np.linspace(0.0, 1.0, gy + 1)
    centers = {part: [] for part in ("person",) + _BOX_PARTS}
    for ann in annotations:
        if ann.image_id not in images:
            raise DatasetError(f"annotation {ann.ann_id} references unknown image {ann.image_id}")
        iw, ih = images[ann.image_id]
        if iw <= 0 or ih <= 0:
            raise DatasetError(f"image {ann.image_id} has non-positive size")
        for part, box, valid in _all_boxes(ann):
            if not valid or box.w * box.h <= 0:
                continue
            cx, cy = box.center
            centers[part].append((cx / iw, cy / ih))
    out = {}
    for part, pts in centers.items():
        if pts:
            arr = np.asarray(pts)
            hist, _, _ = np.histogram2d(arr[:, 0], arr[:, 1], bins=(edges_x, edges_y))
        else:
            hist = np.zeros((gx, gy))
        out[part] = {
            "edges_x": edges_x.tolist(),
            "edges_y": edges_y.tolist(),
            "counts": hist.astype(int).tolist(),
            "n": len(pts),
        }
    return out


# --------------------------------------------------------------------------
# Cropped-part subsets
# --------------------------------------------------------------------------


def extract_subsets(annotations, which: str, expansion_ratio: float = 1.0) -> list[dict]:
    """Cropped face (WBF) or hand (WBH) instances with local-frame keypoints.

    Only valid part boxes are eligible.  The box is enlarged about its
    center by ``expansion_ratio``; keypoints are re-expressed relative to
    the expanded box origin.  Right hands keep their raw geometry (no
    mirroring).
    """
    if which == "WBF":
        parts = ("face",)
    elif which == "WBH":
        parts = ("lefthand", "righthand")
    else:
        raise DatasetError(f"which must be 'WBF' or 'WBH', got {which!r}")
    out = []
    for ann in annotations:
        for part in parts:
            box, valid = ann.part_boxes[part]
            if not valid:
                continue
            roi = expand_roi(box, expansion_ratio)
            pts, vis = ann.part_keypoints(part)
            local = pts - np.array([roi.x, roi.y])
            out.append(
                {
                    "source_annotation": ann.ann_id,
                    "source_image": ann.image_id,
                    "part": part,
                    "box": [roi.x, roi.y, roi.w, roi.h],
                    "keypoints": local.tolist(),
                    "visibility": vis.tolist(),
                }
            )
    return out


def save_subsets(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump({"instances": records}, fh, indent=1, sort_keys=True)
        fh.write("\n")
