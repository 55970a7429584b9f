import numpy as np
import pytest

from msdet.complementarity import (
    ComplementarityTable,
    format_tables,
    greedy_fp_overlap,
    oracle_bound,
    partition,
    table_records,
)
from msdet.errors import ContractError
from msdet.evaluation import GroundTruth, match_image
from msdet.pipeline import Detection


def gt_at(x, y):
    return GroundTruth(x, y, x + 24, y + 54)


def det_for(g, score=0.9):
    return Detection(g.x1, g.y1, g.x2, g.y2, score)


TABLE1_ALLDAY = ComplementarityTable(
    gt_count=2757, tp_both=924, tp_a_only=390, tp_b_only=397,
    fp_both=345, fp_a_only=1169, fp_b_only=1158, n_images=2252,
)


def build_matches(gts, hits_a, hits_b, fps_a=(), fps_b=()):
    """One-image matchings where detector X hits the listed gt indices and
    additionally emits the given FP boxes."""
    def dets_for(hits, fps):
        dets = [det_for(gts[i]) for i in hits]
        dets += [Detection(x, y, x + 24, y + 54, 0.8) for x, y in fps]
        return dets
    ma = match_image(dets_for(hits_a, fps_a), gts)
    mb = match_image(dets_for(hits_b, fps_b), gts)
    return {"im0": ma}, {"im0": mb}


def test_partition_set_algebra_example():
    gts = [gt_at(0, 0), gt_at(100, 0), gt_at(200, 0)]
    ma, mb = build_matches(gts, hits_a=(0, 1), hits_b=(1, 2))
    t = partition(ma, mb)
    assert (t.tp_both, t.tp_a_only, t.tp_b_only) == (1, 1, 1)
    assert t.gt_count == 3


def test_partition_identical_detectors():
    gts = [gt_at(0, 0), gt_at(100, 0)]
    fps = ((300.0, 10.0), (400.0, 10.0))
    ma, mb = build_matches(gts, hits_a=(0, 1), hits_b=(0, 1), fps_a=fps, fps_b=fps)
    t = partition(ma, mb)
    assert t.tp_a_only == 0 and t.tp_b_only == 0
    assert t.fp_a_only == 0 and t.fp_b_only == 0
    assert t.fp_both == 2


def test_partition_mismatched_gts_rejected():
    ma, _ = build_matches([gt_at(0, 0)], (0,), (0,))
    _, mb = build_matches([gt_at(5, 5)], (0,), (0,))
    with pytest.raises(ContractError):
        partition(ma, mb)


def test_partition_conserves_counts_random():
    r = np.random.default_rng(0)
    for _ in range(50):
        gts = [gt_at(float(x), 0.0) for x in r.uniform(0, 400, size=int(r.integers(1, 5)))]
        hits_a = [i for i in range(len(gts)) if r.random() < 0.6]
        hits_b = [i for i in range(len(gts)) if r.random() < 0.6]
        fps_a = [(float(x), 200.0) for x in r.uniform(0, 400, size=int(r.integers(0, 4)))]
        fps_b = [(float(x), 200.0) for x in r.uniform(0, 400, size=int(r.integers(0, 4)))]
        ma, mb = build_matches(gts, hits_a, hits_b, fps_a, fps_b)
        t = partition(ma, mb)
        assert t.tp_both + t.tp_a_only == len(ma["im0"].tp)
        assert t.tp_both + t.tp_b_only == len(mb["im0"].tp)
        assert t.fp_both + t.fp_a_only == len(ma["im0"].fp)
        assert t.fp_both + t.fp_b_only == len(mb["im0"].fp)


def brute_force_fp_overlap(boxes_a, boxes_b, fp_iou=0.5):
    """Exhaustive greedy pairing: sort all pairs by descending IoU (ties by
    row-major index) and take non-conflicting pairs above the threshold."""
    from msdet.boxes import iou
    pairs = []
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            pairs.append((-iou(a, b), i, j))
    pairs.sort()
    used_a, used_b, count = set(), set(), 0
    for neg, i, j in pairs:
        if -neg >= fp_iou and i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            count += 1
    return count


def test_fp_overlap_matches_brute_force_oracle():
    r = np.random.default_rng(1)
    for _ in range(100):
        def boxes(n):
            out = []
            for _ in range(n):
                x, y = r.uniform(0, 60, 2)
                out.append((x, y, x + r.uniform(10, 25), y + r.uniform(10, 25)))
            return np.array(out).reshape(-1, 4)
        a = boxes(int(r.integers(0, 6)))
        b = boxes(int(r.integers(0, 6)))
        assert greedy_fp_overlap(a, b) == brute_force_fp_overlap(a, b)


def test_oracle_bound_table1_all_day():
    bound = oracle_bound(TABLE1_ALLDAY)
    assert abs(bound.union_detection_rate - 0.621) < 0.001
    assert abs(bound.detection_rate_b - 0.479) < 0.001
    assert bound.shared_fp_count == 345
    # both candidate denominators exposed explicitly
    assert bound.fp_rates["per_gt"]["denominator"] == 2757
    assert bound.fp_rates["per_image"]["denominator"] == 2252
    assert abs(bound.fp_rates["per_gt"]["before_a"] - 0.549) < 0.001
    assert abs(bound.fp_rates["per_gt"]["after"] - 0.125) < 0.001


def test_oracle_bound_degenerate_identical_fp_sets():
    t = ComplementarityTable(gt_count=10, tp_both=4, tp_a_only=2, tp_b_only=0,
                             fp_both=3, fp_a_only=0, fp_b_only=0, n_images=5)
    bound = oracle_bound(t)
    assert bound.union_detection_rate == bound.detection_rate_a
    assert bound.shared_fp_count == bound.fp_count_a == bound.fp_count_b == 3


def test_oracle_bound_union_dominates_baselines():
    bound = oracle_bound(TABLE1_ALLDAY)
    assert bound.union_detection_rate >= bound.detection_rate_a
    assert bound.union_detection_rate >= bound.detection_rate_b


def test_oracle_bound_union_monotone_in_tp_fields():
    base = ComplementarityTable(gt_count=100, tp_both=20, tp_a_only=10, tp_b_only=5,
                                fp_both=3, fp_a_only=2, fp_b_only=1, n_images=40)
    u0 = oracle_bound(base).union_detection_rate
    for bump in ("tp_both", "tp_a_only", "tp_b_only"):
        kw = {**base.__dict__}
        kw[bump] += 7
        assert oracle_bound(ComplementarityTable(**kw)).union_detection_rate > u0


def test_oracle_bound_zero_gts_rejected():
    t = ComplementarityTable(0, 0, 0, 0, 0, 0, 0, 1)
    with pytest.raises(ContractError):
        oracle_bound(t)


def test_table_invariant_validation():
    bad = ComplementarityTable(gt_count=5, tp_both=4, tp_a_only=3, tp_b_only=0,
                               fp_both=0, fp_a_only=0, fp_b_only=0, n_images=1)
    with pytest.raises(ContractError):
        bad.validate()


def test_text_and_record_rendering():
    rows = [("all", TABLE1_ALLDAY, oracle_bound(TABLE1_ALLDAY))]
    text = format_tables(rows)
    assert "2757" in text and "924" in text
    rec = table_records(rows)
    assert rec.splitlines()[0].startswith("condition,")
    assert "all,2252,2757,924,390,397,345,1169,1158" in rec
