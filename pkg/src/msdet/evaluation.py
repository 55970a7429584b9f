"""Detection evaluation protocol.

Reasonable-configuration filtering, greedy detection/ground-truth matching,
miss-rate vs FPPI curves, the log-average miss rate summary, and proposal
recall.  Ignored ground truths (occluded, truncated, or shorter than the
minimum height) follow the ignore-region convention: they never count as
misses, and a detection whose only match is an ignored instance is dropped
from both the TP and FP tallies.
"""

import math
from dataclasses import dataclass

import numpy as np

from .boxes import iou, iou_matrix  # noqa: F401  (iou is part of this module's API)
from .errors import ContractError

MIN_REASONABLE_HEIGHT = 50.0
MATCH_IOU = 0.5


@dataclass
class GroundTruth:
    x1: float
    y1: float
    x2: float
    y2: float
    occluded: bool = False
    truncated: bool = False

    def __post_init__(self):
        self.x1, self.y1, self.x2, self.y2 = (
            float(self.x1), float(self.y1), float(self.x2), float(self.y2))

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def height(self):
        return self.y2 - self.y1


@dataclass
class MatchResult:
    """Per-image assignment of detections to ground truths.

    tp holds (detection index, kept-gt index) pairs; fp holds detection
    indices; absorbed holds detections whose only overlap was an ignored
    instance; missed holds unmatched kept-gt indices.
    """
    tp: list
    fp: list
    absorbed: list
    missed: list
    iou_thresh: float
    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_boxes: np.ndarray


@dataclass
class MRFPPICurve:
    """Operating points swept over score thresholds, threshold-descending."""
    thresholds: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray
    n_images: int
    n_gts: int


def filter_reasonable(gts, min_height=MIN_REASONABLE_HEIGHT):
    """Split ground truths into (kept, ignored) under the reasonable rule:
    unoccluded, untruncated, and at least min_height pixels tall."""
    kept, ignored = [], []
    for g in gts:
        if g.occluded or g.truncated or g.height < min_height:
            ignored.append(g)
        else:
            kept.append(g)
    return kept, ignored


def _check_sorted_desc(scores, what):
    if np.any(np.diff(scores) > 0):
        raise ContractError(f"{what} must be sorted by descending score")


def match_detections(dets, gts, iou_thresh=MATCH_IOU, ignored_gts=()):
    """Greedy matching of score-sorted detections against kept gts.

    Each detection takes the highest-IoU unmatched gt with IoU strictly
    above iou_thresh (gt ties to the lowest index); leftover detections
    that overlap an ignored gt above the threshold are absorbed, the rest
    are false positives.  Unmatched kept gts are misses.
    """
    det_boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    det_scores = np.array([d.score for d in dets], dtype=np.float64)
    _check_sorted_desc(det_scores, "detections")
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    ign_boxes = np.array([g.box for g in ignored_gts], dtype=np.float64).reshape(-1, 4)

    tp, fp, absorbed = [], [], []
    taken = np.zeros(len(gts), dtype=bool)
    m = iou_matrix(det_boxes, gt_boxes)
    mi = iou_matrix(det_boxes, ign_boxes)
    for di in range(len(dets)):
        best, best_iou = -1, iou_thresh
        for gi in range(len(gts)):
            if not taken[gi] and m[di, gi] > best_iou:
                best, best_iou = gi, m[di, gi]
        if best >= 0:
            taken[best] = True
            tp.append((di, best))
        elif len(ignored_gts) and mi[di].max() > iou_thresh:
            absorbed.append(di)
        else:
            fp.append(di)
    missed = [gi for gi in range(len(gts)) if not taken[gi]]
    return MatchResult(tp, fp, absorbed, missed, iou_thresh,
                       det_boxes, det_scores, gt_boxes)


def _sorted_dets(dets):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return [dets[i] for i in order]


def match_image(dets, gts, iou_thresh=MATCH_IOU, min_height=MIN_REASONABLE_HEIGHT):
    """Sort detections, apply the reasonable filter, and match one image."""
    kept, ignored = filter_reasonable(gts, min_height)
    return match_detections(_sorted_dets(dets), kept, iou_thresh, ignored)


def mr_fppi_curve(dets_by_image, gts_by_image, iou_thresh=MATCH_IOU,
                  min_height=MIN_REASONABLE_HEIGHT):
    """Sweep score thresholds over all images.

    At each distinct detection score t: the detections with score >= t are
    matched greedily per image; fppi = total FPs / n_images and
    miss_rate = 1 - total TPs / total kept gts.  With no detections at all
    the curve is the single point (0, 1).
    """
    unknown = set(dets_by_image) - set(gts_by_image)
    if unknown:
        raise ContractError(
            f"detections reference images without ground truth: {sorted(unknown)[:5]}"
        )
    n_images = len(gts_by_image)
    n_gts = 0
    labeled = []  # (score, is_tp) per evaluated detection
    for image_id in sorted(gts_by_image):
        gts = gts_by_image[image_id]
        kept, _ = filter_reasonable(gts, min_height)
        n_gts += len(kept)
        match = match_image(dets_by_image.get(image_id, []), gts, iou_thresh, min_height)
        for di, _ in match.tp:
            labeled.append((match.det_scores[di], True))
        for di in match.fp:
            labeled.append((match.det_scores[di], False))
    if n_gts == 0:
        raise ContractError("mr_fppi_curve is undefined with zero kept ground truths")
    if not labeled:
        return MRFPPICurve(np.array([np.inf]), np.array([0.0]), np.array([1.0]),
                           n_images, n_gts)
    labeled.sort(key=lambda t: -t[0])
    scores = np.array([s for s, _ in labeled])
    is_tp = np.array([t for _, t in labeled])
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(~is_tp)
    # last occurrence of each distinct score in the descending order
    last = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    thresholds = scores[last]
    fppi = cum_fp[last] / n_images
    miss = 1.0 - cum_tp[last] / n_gts
    return MRFPPICurve(thresholds, fppi, miss, n_images, n_gts)


def log_avg_miss_rate(curve, fppi_range=(0.1, 1.0), n_points=9):
    """Geometric mean of miss rates at log-spaced FPPI samples.

    Step interpolation: each sample takes the miss rate at the largest
    curve fppi <= sample (latest such point in threshold-descending order);
    samples below the whole curve take the highest-threshold point.  Miss
    rates are clamped to >= 1e-10 before the geometric mean.
    """
    if curve.fppi.size == 0:
        raise ContractError("log_avg_miss_rate requires a non-empty curve")
    samples = np.power(
        10.0,
        np.linspace(math.log10(fppi_range[0]), math.log10(fppi_range[1]), n_points),
    )
    picked = np.empty(n_points)
    for i, f in enumerate(samples):
        idx = np.flatnonzero(curve.fppi <= f)
        picked[i] = curve.miss_rate[idx[-1]] if idx.size else curve.miss_rate[0]
    picked = np.maximum(picked, 1e-10)
    return float(np.exp2(np.mean(np.log2(picked))))


def proposal_recall(props_by_image, gts_by_image, k, iou_thresh=MATCH_IOU,
                    min_height=MIN_REASONABLE_HEIGHT):
    """Fraction of kept gts matched by each image's top-k proposals.

    Proposals must arrive objectness-descending; matching is the same
    greedy rule as match_detections.
    """
    n_matched = 0
    n_gts = 0
    for image_id in sorted(gts_by_image):
        kept, _ = filter_reasonable(gts_by_image[image_id], min_height)
        n_gts += len(kept)
        props = props_by_image.get(image_id, [])
        scores = np.array([p.objectness for p in props], dtype=np.float64)
        _check_sorted_desc(scores, "proposals")
        if not kept or k <= 0 or not props:
            continue
        boxes = np.array([p.box for p in props[:k]], dtype=np.float64)
        m = iou_matrix(boxes, np.array([g.box for g in kept], dtype=np.float64))
        taken = np.zeros(len(kept), dtype=bool)
        for pi in range(boxes.shape[0]):
            best, best_iou = -1, iou_thresh
            for gi in range(len(kept)):
                if not taken[gi] and m[pi, gi] > best_iou:
                    best, best_iou = gi, m[pi, gi]
            if best >= 0:
                taken[best] = True
                n_matched += 1
    if n_gts == 0:
        raise ContractError("proposal_recall is undefined with zero kept ground truths")
    return n_matched / n_gts


def write_curve(path, xs, ys, header, summary=None):
    """Comma-separated curve file with optional trailing summary line."""
    lines = [header]
    lines.extend(f"{repr(float(x))},{repr(float(y))}" for x, y in zip(xs, ys))
    if summary is not None:
        lines.append(summary)
    from .data import atomic_write_text
    atomic_write_text(path, "\n".join(lines) + "\n")
