"""Two-detector complementarity analysis.

Partitions the true positives and false positives of two detectors run on
the same images into shared and exclusive sets, and computes the upper
bound of an oracle that keeps the union of true detections while retaining
only the shared false alarms.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix
from .errors import ContractError


@dataclass
class ComplementarityTable:
    gt_count: int
    tp_both: int
    tp_a_only: int
    tp_b_only: int
    fp_both: int
    fp_a_only: int
    fp_b_only: int
    n_images: int

    def validate(self):
        counts = (self.gt_count, self.tp_both, self.tp_a_only, self.tp_b_only,
                  self.fp_both, self.fp_a_only, self.fp_b_only, self.n_images)
        if any(c < 0 for c in counts):
            raise ContractError(f"complementarity counts must be non-negative: {self}")
        if self.tp_both + self.tp_a_only > self.gt_count:
            raise ContractError(
                f"detector A claims {self.tp_both + self.tp_a_only} TPs against "
                f"{self.gt_count} ground truths"
            )
        if self.tp_both + self.tp_b_only > self.gt_count:
            raise ContractError(
                f"detector B claims {self.tp_both + self.tp_b_only} TPs against "
                f"{self.gt_count} ground truths"
            )


@dataclass
class OracleBound:
    """Union-of-TPs / shared-FPs hypothetical detector.

    The false-alarm rates are reported under both candidate denominators
    (per ground truth and per image) since either reading is defensible.
    """
    union_detection_rate: float
    detection_rate_a: float
    detection_rate_b: float
    shared_fp_count: int
    fp_count_a: int
    fp_count_b: int
    fp_rates: dict  # {"per_gt": {...}, "per_image": {...}} with explicit denominators


def greedy_fp_overlap(boxes_a, boxes_b, fp_iou=0.5):
    """Number of cross-detector FP pairs under greedy highest-IoU-first
    pairing at IoU >= fp_iou; each box pairs at most once."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0
    m = iou_matrix(a, b)
    count = 0
    while True:
        flat = int(np.argmax(m))
        i, j = divmod(flat, m.shape[1])
        if m[i, j] < fp_iou:
            break
        count += 1
        m[i, :] = -1.0
        m[:, j] = -1.0
    return count


def partition(matches_a, matches_b, fp_iou=0.5):
    """Six-way TP/FP partition of two detectors' matched outputs.

    matches_a / matches_b: dict image_id -> MatchResult, computed against
    identical ground truths at the same detection-score threshold.
    """
    if set(matches_a) != set(matches_b):
        raise ContractError("the two detectors cover different image sets")
    gt_count = tp_both = tp_a = tp_b = fp_both = fp_a = fp_b = 0
    for image_id in sorted(matches_a):
        ma, mb = matches_a[image_id], matches_b[image_id]
        if not np.array_equal(ma.gt_boxes, mb.gt_boxes):
            raise ContractError(
                f"image {image_id}: the two matchings used different ground truths"
            )
        gt_count += ma.gt_boxes.shape[0]
        hit_a = {gi for _, gi in ma.tp}
        hit_b = {gi for _, gi in mb.tp}
        tp_both += len(hit_a & hit_b)
        tp_a += len(hit_a - hit_b)
        tp_b += len(hit_b - hit_a)
        shared = greedy_fp_overlap(
            ma.det_boxes[ma.fp], mb.det_boxes[mb.fp], fp_iou
        )
        fp_both += shared
        fp_a += len(ma.fp) - shared
        fp_b += len(mb.fp) - shared
    table = ComplementarityTable(
        gt_count=gt_count, tp_both=tp_both, tp_a_only=tp_a, tp_b_only=tp_b,
        fp_both=fp_both, fp_a_only=fp_a, fp_b_only=fp_b,
        n_images=len(matches_a),
    )
    table.validate()
    return table


def oracle_bound(table):
    table.validate()
    if table.gt_count == 0:
        raise ContractError("oracle bound is undefined with zero ground truths")
    g = table.gt_count
    union = (table.tp_both + table.tp_a_only + table.tp_b_only) / g
    rate_a = (table.tp_both + table.tp_a_only) / g
    rate_b = (table.tp_both + table.tp_b_only) / g
    fp_a = table.fp_both + table.fp_a_only
    fp_b = table.fp_both + table.fp_b_only
    fp_rates = {
        "per_gt": {
            "denominator": g,
            "before_a": fp_a / g,
            "before_b": fp_b / g,
            "after": table.fp_both / g,
        },
    }
    if table.n_images > 0:
        fp_rates["per_image"] = {
            "denominator": table.n_images,
            "before_a": fp_a / table.n_images,
            "before_b": fp_b / table.n_images,
            "after": table.fp_both / table.n_images,
        }
    return OracleBound(
        union_detection_rate=union,
        detection_rate_a=rate_a,
        detection_rate_b=rate_b,
        shared_fp_count=table.fp_both,
        fp_count_a=fp_a,
        fp_count_b=fp_b,
        fp_rates=fp_rates,
    )


def format_tables(rows, label_a="A", label_b="B"):
    """Aligned text rendering; rows: list of (condition, table, bound)."""
    headers = ["", "GT", "TP(A,B)", "TP(A)", "TP(B)", "FP(A,B)", "FP(A)", "FP(B)",
               "union", f"rate({label_a})", f"rate({label_b})"]
    body = []
    for cond, t, bound in rows:
        body.append([
            cond, str(t.gt_count), str(t.tp_both), str(t.tp_a_only), str(t.tp_b_only),
            str(t.fp_both), str(t.fp_a_only), str(t.fp_b_only),
            f"{bound.union_detection_rate:.4f}",
            f"{bound.detection_rate_a:.4f}", f"{bound.detection_rate_b:.4f}",
        ])
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for r in body:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def table_records(rows):
    """Machine-readable CSV lines mirroring the table columns."""
    lines = ["condition,n_images,gt,tp_both,tp_a_only,tp_b_only,"
             "fp_both,fp_a_only,fp_b_only,union_rate,rate_a,rate_b,"
             "shared_fp_per_gt,shared_fp_per_image"]
    for cond, t, bound in rows:
        per_img = bound.fp_rates.get("per_image", {}).get("after", float("nan"))
        lines.append(
            f"{cond},{t.n_images},{t.gt_count},{t.tp_both},{t.tp_a_only},{t.tp_b_only},"
            f"{t.fp_both},{t.fp_a_only},{t.fp_b_only},"
            f"{bound.union_detection_rate:.6f},{bound.detection_rate_a:.6f},"
            f"{bound.detection_rate_b:.6f},"
            f"{bound.fp_rates['per_gt']['after']:.6f},{per_img:.6f}"
        )
    return "\n".join(lines) + "\n"
