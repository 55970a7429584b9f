import numpy as np
import pytest

from msdet.boxes import (
    assign_proposal_labels,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
)
from msdet.errors import ConfigError, ContractError


def test_iou_identical():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0


def test_iou_hand_case_one_third():
    # intersection 50, union 150
    assert abs(iou((0, 0, 10, 10), (5, 0, 15, 10)) - 1.0 / 3.0) < 1e-12


def test_iou_matrix_matches_scalar():
    r = np.random.default_rng(0)
    a = np.sort(r.uniform(0, 50, size=(8, 2, 2)), axis=2).reshape(8, 4)[:, [0, 2, 1, 3]]
    b = np.sort(r.uniform(0, 50, size=(5, 2, 2)), axis=2).reshape(5, 4)[:, [0, 2, 1, 3]]
    a[:, 2:] += 1.0
    b[:, 2:] += 1.0
    m = iou_matrix(a, b)
    for i in range(8):
        for j in range(5):
            assert abs(m[i, j] - iou(a[i], b[j])) < 1e-12


def test_encode_identity_is_zero():
    d = encode_boxes([(0, 0, 10, 10)], [(0, 0, 10, 10)])
    np.testing.assert_allclose(d, [[0.0, 0.0, 0.0, 0.0]])


def test_encode_hand_case():
    d = encode_boxes([(0, 0, 10, 10)], [(5, 5, 15, 15)])
    np.testing.assert_allclose(d, [[0.5, 0.5, 0.0, 0.0]], atol=1e-12)


def test_encode_decode_roundtrip_random():
    r = np.random.default_rng(1)
    n = 1000
    anchors = np.stack(
        [r.uniform(0, 60, n), r.uniform(0, 60, n), np.zeros(n), np.zeros(n)], axis=1
    )
    anchors[:, 2] = anchors[:, 0] + r.uniform(2, 40, n)
    anchors[:, 3] = anchors[:, 1] + r.uniform(2, 40, n)
    targets = anchors + r.uniform(-1.5, 1.5, size=(n, 4))
    targets[:, 2] = np.maximum(targets[:, 2], targets[:, 0] + 1.0)
    targets[:, 3] = np.maximum(targets[:, 3], targets[:, 1] + 1.0)
    back = decode_boxes(anchors, encode_boxes(anchors, targets))
    assert np.abs(back - targets).max() < 1e-4


def test_encode_rejects_degenerate_box():
    with pytest.raises(ContractError):
        encode_boxes([(0, 0, 0, 10)], [(0, 0, 10, 10)])


def test_anchor_count_10x10_map():
    a = generate_anchors(10, 10, 8, scales=(16, 24, 32), ratios=(1, 2))
    assert a.shape == (600, 4)


def test_anchor_square_centered():
    a = generate_anchors(1, 1, 8, scales=(16,), ratios=(1,))
    np.testing.assert_allclose(a[0], [4 - 8, 4 - 8, 4 + 8, 4 + 8])


def test_anchor_ratio2_dimensions():
    a = generate_anchors(1, 1, 8, scales=(16,), ratios=(2,))
    w = a[0, 2] - a[0, 0]
    h = a[0, 3] - a[0, 1]
    assert abs(w - 11.31) < 0.01
    assert abs(h - 22.63) < 0.01
    assert abs(w * h - 256.0) < 1e-6


def test_anchor_ratio_half_rejected():
    with pytest.raises(ConfigError, match="pedestrian"):
        generate_anchors(4, 4, 8, scales=(16,), ratios=(0.5, 1))


def test_anchor_count_invariant():
    for fh, fw, ns in [(3, 5, 1), (8, 10, 3)]:
        scales = tuple(16 + 8 * i for i in range(ns))
        a = generate_anchors(fh, fw, 8, scales=scales, ratios=(1, 2))
        assert a.shape[0] == fh * fw * ns * 2


def test_assign_identical_positive():
    labels, tgt = assign_proposal_labels([(0, 0, 10, 20)], [(0, 0, 10, 20)])
    assert labels[0] == 1 and tgt[0] == 0


def test_assign_disjoint_negative():
    labels, tgt = assign_proposal_labels([(0, 0, 10, 20)], [(30, 30, 40, 50)])
    assert labels[0] == 0 and tgt[0] == -1


def test_assign_iou_exactly_half_is_negative():
    # proposal is the left half of the gt: IoU = 0.5 exactly
    labels, _ = assign_proposal_labels([(0, 0, 5, 10)], [(0, 0, 10, 10)])
    assert labels[0] == 0


def test_assign_empty_gts_all_negative():
    labels, tgt = assign_proposal_labels([(0, 0, 10, 20), (1, 1, 4, 9)], [])
    assert labels.tolist() == [0, 0]
    assert tgt.tolist() == [-1, -1]


def test_assign_tie_lowest_gt_index():
    gts = [(0, 0, 10, 10), (0, 0, 10, 10)]
    labels, tgt = assign_proposal_labels([(0, 0, 10, 10)], gts)
    assert labels[0] == 1 and tgt[0] == 0


def test_clip_boxes():
    b = clip_boxes([(-5, -3, 90, 70)], image_h=64, image_w=80)
    np.testing.assert_allclose(b, [[0, 0, 80, 64]])
