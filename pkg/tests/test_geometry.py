import math

import numpy as np
import pytest

from wbnas import geometry as G


# -- heatmap codec -----------------------------------------------------------


def test_encode_amplitude_and_falloff():
    hm, oog = G.encode_gaussian([[4.0, 3.0]], [1], (8, 8), sigma=2.0)
    assert oog == []
    assert hm.values[0, 3, 4] == pytest.approx(1.0)
    # one sigma away along x
    assert hm.values[0, 3, 6] == pytest.approx(math.exp(-0.5))
    assert hm.values[0, 5, 4] == pytest.approx(math.exp(-0.5))


def test_encode_invisible_and_out_of_grid():
    hm, oog = G.encode_gaussian([[2.0, 2.0], [50.0, 2.0], [3.0, 3.0]], [1, 1, 0], (8, 8), 1.5)
    assert oog == [1]
    assert np.all(hm.values[1] == 0)
    assert np.all(hm.values[2] == 0)
    assert hm.values[0].max() == pytest.approx(1.0)


def test_encode_rejects_bad_sigma():
    with pytest.raises(ValueError):
        G.encode_gaussian([[0, 0]], [1], (4, 4), 0.0)


def test_decode_quarter_offset_rule():
    v = np.zeros((1, 11, 11))
    v[0, 5, 5] = 1.0
    v[0, 5, 6] = 0.5  # right > left
    out = G.decode_quarter_offset(G.HeatmapStack(values=v))
    assert out[0, 0] == pytest.approx(5.25)
    assert out[0, 1] == pytest.approx(5.0)  # up == down: no offset
    assert out[0, 2] == pytest.approx(1.0)


def test_decode_tie_and_border():
    # symmetric neighbors: zero offset on both axes
    hm, _ = G.encode_gaussian([[4.0, 4.0]], [1], (9, 9), 1.0)
    out = G.decode_quarter_offset(hm)
    assert out[0, :2] == pytest.approx([4.0, 4.0])
    # peak at a corner: out-of-grid neighbors read as 0
    v = np.zeros((1, 4, 4))
    v[0, 0, 0] = 1.0
    v[0, 0, 1] = 0.3
    out = G.decode_quarter_offset(G.HeatmapStack(values=v))
    assert out[0, 0] == pytest.approx(0.25)
    assert out[0, 1] == pytest.approx(0.25 * np.sign(v[0, 1, 0] - 0.0))
    # argmax ties resolve to the lowest row-major index; at (0,0) the
    # out-of-grid left/up neighbors read 0, so both offsets push inward
    v2 = np.ones((1, 3, 3))
    out2 = G.decode_quarter_offset(G.HeatmapStack(values=v2))
    assert tuple(out2[0, :2]) == (0.25, 0.25)


def test_decode_respects_stride_and_offset():
    v = np.zeros((1, 4, 4))
    v[0, 2, 1] = 1.0
    out = G.decode_quarter_offset(G.HeatmapStack(values=v, stride=4.0, offset=(10.0, 20.0)))
    assert out[0, 0] == pytest.approx(1 * 4.0 + 10.0)
    assert out[0, 1] == pytest.approx(2 * 4.0 + 20.0)


def test_decode_needs_2x2():
    with pytest.raises(ValueError):
        G.decode_quarter_offset(G.HeatmapStack(values=np.zeros((1, 1, 5))))


def test_quarter_offset_beats_argmax_on_subpixel_centers():
    rng = np.random.default_rng(0)
    err_q, err_a = [], []
    for _ in range(1000):
        x = rng.uniform(2.0, 13.0)
        y = rng.uniform(2.0, 13.0)
        hm, _ = G.encode_gaussian([[x, y]], [1], (16, 16), sigma=1.5)
        q = G.decode_quarter_offset(hm)[0]
        a = G.decode_argmax(hm)[0]
        err_q.append(math.hypot(q[0] - x, q[1] - y))
        err_a.append(math.hypot(a[0] - x, a[1] - y))
    assert np.mean(err_q) <= np.mean(err_a)


def test_encode_decode_round_trip_within_half_pixel():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, y = rng.integers(1, 15), rng.integers(1, 15)
        hm, _ = G.encode_gaussian([[float(x), float(y)]], [1], (16, 16), sigma=1.0)
        out = G.decode_quarter_offset(hm)[0]
        assert abs(out[0] - x) <= 0.5 and abs(out[1] - y) <= 0.5


# -- box codec ----------------------------------------------------------------


def test_box_codec_round_trip():
    box = G.Box(3.0, -2.0, 10.0, 20.0)
    kpts = G.keypoints_from_box(box)
    assert kpts.shape == (5, 2)
    assert np.allclose(kpts[4], [8.0, 8.0])  # center = mean of corners
    assert np.allclose(kpts[4], kpts[:4].mean(axis=0))
    back = G.box_from_keypoints(kpts)
    assert (back.x, back.y, back.w, back.h) == (3.0, -2.0, 10.0, 20.0)


def test_box_codec_specific_corners():
    kpts = np.array([[0, 0], [10, 0], [10, 20], [0, 20], [5, 10]], dtype=float)
    box = G.box_from_keypoints(kpts)
    assert (box.x, box.y, box.w, box.h) == (0, 0, 10, 20)


def test_box_codec_degenerate():
    pts = np.tile([[4.0, 7.0]], (5, 1))
    box = G.box_from_keypoints(pts)
    assert box.w == 0 and box.h == 0
    assert np.allclose(G.keypoints_from_box(box), pts)


def test_box_from_keypoints_is_min_bounding_rect():
    # displaced center still falls inside the min/max rectangle
    pts = np.array([[0, 0], [10, 0], [10, 10], [0, 10], [12, 5]], dtype=float)
    box = G.box_from_keypoints(pts)
    assert box.w == 12


def test_box_rejects_negative_sides():
    with pytest.raises(ValueError):
        G.Box(0, 0, -1, 5)


# -- RoI expansion ------------------------------------------------------------


def test_expand_roi_identity_and_example():
    box = G.Box(0, 0, 10, 10)
    assert G.expand_roi(box, 1.0) == box
    e = G.expand_roi(box, 1.2)
    assert (e.x, e.y, e.w, e.h) == pytest.approx((-1.0, -1.0, 12.0, 12.0))
    # largest searched ratio: area scales by ratio squared
    a = G.expand_roi(box, 1.3)
    assert a.w * a.h / (box.w * box.h) == pytest.approx(1.69)


def test_expand_roi_composes():
    box = G.Box(2, 3, 4, 6)
    ab = G.expand_roi(G.expand_roi(box, 1.1), 1.2)
    direct = G.expand_roi(box, 1.1 * 1.2)
    assert (ab.x, ab.y, ab.w, ab.h) == pytest.approx((direct.x, direct.y, direct.w, direct.h))


def test_expand_roi_rejects_shrink():
    with pytest.raises(ValueError):
        G.expand_roi(G.Box(0, 0, 1, 1), 0.9)


# -- RoIAlign -----------------------------------------------------------------


def test_roi_align_constant():
    feats = G.HeatmapStack(values=np.full((2, 6, 6), 1.5))
    out = G.roi_align(feats, G.Box(1.2, 0.7, 3.3, 2.9), (4, 5))
    assert out.values.shape == (2, 4, 5)
    assert np.allclose(out.values, 1.5)


def test_roi_align_linear_ramp_exact():
    ys, xs = np.mgrid[0:8, 0:8].astype(float)
    feats = G.HeatmapStack(values=np.stack([xs, ys, 2 * xs + 3 * ys + 1]))
    box = G.Box(1.0, 2.0, 4.0, 3.0)
    out = G.roi_align(feats, box, (6, 8))
    ex = box.x + (np.arange(8) + 0.5) * box.w / 8
    ey = box.y + (np.arange(6) + 0.5) * box.h / 6
    gx, gy = np.meshgrid(ex, ey)
    assert np.allclose(out.values[0], gx, atol=1e-10)
    assert np.allclose(out.values[1], gy, atol=1e-10)
    assert np.allclose(out.values[2], 2 * gx + 3 * gy + 1, atol=1e-10)


def test_roi_align_identity():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1, 5, 7))
    feats = G.HeatmapStack(values=v)
    # box covering the full map with cell centers on pixel centers
    out = G.roi_align(feats, G.Box(-0.5, -0.5, 7.0, 5.0), (5, 7))
    assert np.allclose(out.values, v, atol=1e-12)


def test_roi_align_border_clamp():
    v = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = G.roi_align(G.HeatmapStack(values=v), G.Box(-5, -5, 3, 3), (2, 2))
    assert np.all(np.isfinite(out.values))
    assert out.values.min() >= v.min() and out.values.max() <= v.max()


def test_roi_align_tracks_frame():
    feats = G.HeatmapStack(values=np.zeros((1, 8, 8)), stride=4.0, offset=(2.0, 2.0))
    out = G.roi_align(feats, G.Box(2.0, 2.0, 4.0, 4.0), (4, 4))
    assert out.stride == pytest.approx(4.0 * 4.0 / 4)
    assert out.offset[0] == pytest.approx((2.0 + 0.5) * 4.0 + 2.0)


# -- augmentation transform ----------------------------------------------------


def test_plain_crop_maps_box_to_output():
    box = G.Box(10, 20, 40, 30)
    t = G.make_augmentation_transform(box, (80, 60))
    corners = t.apply([[10, 20], [50, 20], [50, 50], [10, 50]])
    assert np.allclose(corners, [[0, 0], [80, 0], [80, 60], [0, 60]])
    assert np.allclose(t.apply([box.center])[0], [40, 30])
    inv = t.inverse()
    assert np.allclose(inv.apply([[0, 0], [80, 60]]), [[10, 20], [50, 50]])


def test_flip_mirrors_x():
    box = G.Box(0, 0, 10, 10)
    t = G.make_augmentation_transform(box, (10, 10), flip=True)
    pts = t.apply([[2.0, 3.0], [5.0, 5.0]])
    assert np.allclose(pts[0], [8.0, 3.0])
    assert np.allclose(pts[1], [5.0, 5.0])


def test_rotation_90_right_middle_to_top_middle():
    box = G.Box(0, 0, 10, 10)
    t = G.make_augmentation_transform(box, (10, 10), rotation=90.0)
    out = t.apply([[10.0, 5.0]])[0]  # right-middle of the box
    assert np.allclose(out, [5.0, 0.0], atol=1e-12)  # top-middle of the output


def test_transform_deterministic_per_seed():
    box = G.Box(5, 5, 20, 20)
    kwargs = dict(scale_jitter=(-0.5, 0.5), rotation=40.0, flip=True)
    a = G.make_augmentation_transform(box, (64, 64), rng_seed=7, **kwargs)
    b = G.make_augmentation_transform(box, (64, 64), rng_seed=7, **kwargs)
    c = G.make_augmentation_transform(box, (64, 64), rng_seed=8, **kwargs)
    assert a.matrix == b.matrix
    assert a.matrix != c.matrix


def test_transform_center_invariant_under_augmentation():
    box = G.Box(5, 5, 20, 24)
    for seed in range(10):
        t = G.make_augmentation_transform(
            box, (32, 48), scale_jitter=(-0.5, 0.5), rotation=40.0, flip=True, rng_seed=seed
        )
        assert np.allclose(t.apply([box.center])[0], [16, 24])


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        G.make_augmentation_transform(G.Box(0, 0, 0, 10), (8, 8))


def test_affine_invertibility_guard():
    with pytest.raises(ValueError):
        G.AffineTransform(matrix=((1, 0, 0), (2, 0, 0)))
