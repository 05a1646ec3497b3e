import json
import math
from importlib import resources

import numpy as np
import pytest

from wbnas import dataset as D
from wbnas.geometry import Box

FIXTURE = resources.files("wbnas").joinpath("data/fixture_annotations.json")


def synthetic_annotation(rng, ann_id, image_id):
    kpts = rng.uniform(0, 400, size=(D.N_KEYPOINTS, 2))
    vis = rng.integers(0, 3, size=D.N_KEYPOINTS)
    part_boxes = {}
    for part in ("face", "lefthand", "righthand"):
        valid = bool(rng.integers(0, 2))
        w, h = (rng.uniform(5, 40), rng.uniform(5, 40)) if valid else (0.0, 0.0)
        part_boxes[part] = (Box(rng.uniform(0, 300), rng.uniform(0, 300), w, h), valid)
    return D.WholeBodyAnnotation(
        ann_id=ann_id,
        image_id=image_id,
        bbox=Box(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(20, 200), rng.uniform(20, 200)),
        keypoints=kpts,
        visibility=vis,
        part_boxes=part_boxes,
    )


# -- parsing --------------------------------------------------------------------


def test_fixture_parses_clean():
    anns, images, diags = D.parse(str(FIXTURE))
    assert diags == []
    assert len(anns) == 4
    assert set(images) == {1, 2}
    assert images[1] == (640.0, 480.0)
    counts = D.validity_counts(anns)
    assert counts == {"face": 4, "lefthand": 3, "righthand": 2, "annotations": 4}
    for ann in anns:
        assert ann.keypoints.shape == (133, 2)
        assert np.isin(ann.visibility, (0, 1, 2)).all()


def test_part_layout_totals():
    assert D.PART_COUNTS == {"body": 17, "foot": 6, "face": 68, "lefthand": 21, "righthand": 21}
    assert D.N_KEYPOINTS == 17 + 6 + 68 + 21 + 21 == 133


def test_part_keypoints_slicing():
    anns, _, _ = D.parse(str(FIXTURE))
    ann = anns[0]
    offset = 0
    for part in D.PART_ORDER:
        pts, vis = ann.part_keypoints(part)
        n = D.PART_COUNTS[part]
        assert pts.shape == (n, 2)
        assert np.array_equal(pts, ann.keypoints[offset : offset + n])
        offset += n
    with pytest.raises(D.DatasetError):
        ann.part_keypoints("tail")


def test_round_trip_bit_exact(tmp_path):
    anns, images, _ = D.parse(str(FIXTURE))
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    D.serialize(anns, images, first)
    anns2, images2, diags = D.parse(first)
    assert diags == []
    assert images2 == images
    D.serialize(anns2, images2, second)
    assert first.read_bytes() == second.read_bytes()
    for a, b in zip(anns, anns2):
        assert a.ann_id == b.ann_id
        assert np.array_equal(a.keypoints, b.keypoints)
        assert np.array_equal(a.visibility, b.visibility)
        assert a.part_boxes == b.part_boxes


def fixture_data():
    return json.loads(FIXTURE.read_text())


def write(tmp_path, data):
    p = tmp_path / "data.json"
    p.write_text(json.dumps(data))
    return p


def test_bad_container_is_hard_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(D.DatasetError):
        D.parse(p)
    with pytest.raises(D.DatasetError):
        D.parse(write(tmp_path, {"annotations": []}))  # missing images


def test_wrong_keypoint_count_skipped_with_diagnostic(tmp_path):
    data = fixture_data()
    data["annotations"][1]["keypoints"] = data["annotations"][1]["keypoints"][:-3]
    anns, _, diags = D.parse(write(tmp_path, data))
    assert len(anns) == 3
    assert len(diags) == 1
    assert diags[0].startswith("record 1:") and "keypoint count != 17" in diags[0]


def test_bad_visibility_skipped(tmp_path):
    data = fixture_data()
    data["annotations"][0]["face_kpts"][2] = 5
    anns, _, diags = D.parse(write(tmp_path, data))
    assert len(anns) == 3
    assert "visibility" in diags[0]


def test_zero_area_valid_box_skipped(tmp_path):
    data = fixture_data()
    data["annotations"][2]["lefthand_box"] = [10.0, 10.0, 0.0, 5.0]
    data["annotations"][2]["lefthand_valid"] = True
    anns, _, diags = D.parse(write(tmp_path, data))
    assert len(anns) == 3
    assert "zero area" in diags[0]


# -- statistics -------------------------------------------------------------------


def test_box_size_histogram_matches_tally():
    rng = np.random.default_rng(0)
    anns = [synthetic_annotation(rng, i, 1) for i in range(100)]
    edges = np.linspace(0.0, 600.0, 13)
    stats = D.stats_box_size(anns, bin_edges=edges)
    for part in ("person", "face", "lefthand", "righthand"):
        diags = []
        for ann in anns:
            if part == "person":
                box, valid = ann.bbox, True
            else:
                box, valid = ann.part_boxes[part]
            if valid and box.w * box.h > 0:
                diags.append(math.hypot(box.w, box.h))
        expect, _ = np.histogram(diags, bins=edges)
        assert stats[part]["counts"] == expect.tolist()
        assert stats[part]["n"] == len(diags)
        if diags:
            assert stats[part]["mean"] == pytest.approx(np.mean(diags))


def test_box_diagonal_3_4_5():
    ann = synthetic_annotation(np.random.default_rng(1), 1, 1)
    ann.bbox = Box(0, 0, 3, 4)
    ann.part_boxes = {p: (Box(0, 0, 0, 0), False) for p in ("face", "lefthand", "righthand")}
    stats = D.stats_box_size([ann], bin_edges=[0.0, 4.9, 5.1, 10.0])
    assert stats["person"]["counts"] == [0, 1, 0]
    assert stats["person"]["mean"] == pytest.approx(5.0)


def test_kpt_distance_matches_direct_average():
    rng = np.random.default_rng(2)
    anns = [synthetic_annotation(rng, i, 1) for i in range(50)]
    stats = D.stats_kpt_distance(anns)
    mapping = {"body": "body", "foot": "foot", "face": "face",
               "lefthand": "hand", "righthand": "hand"}
    for part in D.PART_ORDER:
        dists = []
        for ann in anns:
            pts, vis = ann.part_keypoints(part)
            for a, b in D.DEFAULT_SKELETONS[mapping[part]]:
                if vis[a] > 0 and vis[b] > 0:
                    dists.append(np.linalg.norm(pts[a] - pts[b]))
        if dists:
            assert stats[part]["mean"] == pytest.approx(np.mean(dists))
            assert stats[part]["n_edges"] == len(dists)


def test_center_histogram():
    rng = np.random.default_rng(3)
    ann = synthetic_annotation(rng, 1, 1)
    ann.bbox = Box(45, 35, 10, 10)  # center (50, 40) of a 100x80 image
    images = {1: (100.0, 80.0)}
    stats = D.stats_center([ann], images, grid=(2, 2))
    person = np.asarray(stats["person"]["counts"])
    # normalized center (0.5, 0.5) lands in the upper bin of each axis
    assert person.sum() == 1
    assert person[1, 1] == 1
    corner = synthetic_annotation(rng, 2, 1)
    corner.bbox = Box(0, 0, 2, 2)
    top_left = np.asarray(D.stats_center([corner], images, grid=(10, 10))["person"]["counts"])
    assert top_left[0, 0] == 1


def test_center_histogram_counts_match_tally():
    rng = np.random.default_rng(4)
    anns = [synthetic_annotation(rng, i, 1) for i in range(100)]
    images = {1: (400.0, 400.0)}
    stats = D.stats_center(anns, images, grid=(5, 5))
    for part in ("person", "face"):
        pts = []
        for ann in anns:
            box, valid = (ann.bbox, True) if part == "person" else ann.part_boxes[part]
            if valid and box.w * box.h > 0:
                cx, cy = box.center
                pts.append((cx / 400.0, cy / 400.0))
        assert stats[part]["n"] == len(pts)
        assert np.asarray(stats[part]["counts"]).sum() == sum(
            1 for x, y in pts if 0 <= x <= 1 and 0 <= y <= 1
        )


def test_center_unknown_image_rejected():
    ann = synthetic_annotation(np.random.default_rng(5), 1, 99)
    with pytest.raises(D.DatasetError):
        D.stats_center([ann], {1: (10.0, 10.0)})


# -- cropped subsets ----------------------------------------------------------------


def test_extract_face_subset_round_trip():
    anns, _, _ = D.parse(str(FIXTURE))
    recs = D.extract_subsets(anns, "WBF", expansion_ratio=1.2)
    assert len(recs) == 4  # all face boxes valid in the fixture
    by_id = {a.ann_id: a for a in anns}
    for rec in recs:
        ann = by_id[rec["source_annotation"]]
        pts, vis = ann.part_keypoints("face")
        x, y, w, h = rec["box"]
        # local + crop origin recovers the global coordinates
        assert np.allclose(np.asarray(rec["keypoints"]) + [x, y], pts)
        assert rec["visibility"] == vis.tolist()
        box, _ = ann.part_boxes["face"]
        assert w == pytest.approx(box.w * 1.2)


def test_extract_hands_skips_invalid_and_keeps_right_geometry():
    anns, _, _ = D.parse(str(FIXTURE))
    recs = D.extract_subsets(anns, "WBH", expansion_ratio=1.0)
    counts = D.validity_counts(anns)
    assert len(recs) == counts["lefthand"] + counts["righthand"] == 5
    for rec in recs:
        ann = next(a for a in anns if a.ann_id == rec["source_annotation"])
        pts, _ = ann.part_keypoints(rec["part"])
        x, y, _, _ = rec["box"]
        # no mirroring: plain translation for both hands
        assert np.allclose(np.asarray(rec["keypoints"]) + [x, y], pts)
    with pytest.raises(D.DatasetError):
        D.extract_subsets(anns, "faces")


def test_save_subsets_deterministic(tmp_path):
    anns, _, _ = D.parse(str(FIXTURE))
    recs = D.extract_subsets(anns, "WBF")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    D.save_subsets(recs, a)
    D.save_subsets(recs, b)
    assert a.read_bytes() == b.read_bytes()
    assert len(json.loads(a.read_text())["instances"]) == len(recs)
