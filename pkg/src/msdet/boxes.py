"""Box geometry: IoU, anchor generation, regression transforms, labels.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates with x2 > x1
and y2 > y1.  Anchor aspect ratio is height/width, so upright pedestrians
use ratios >= 1 and the wide-box ratio 0.5 is rejected outright.
"""

import numpy as np

from .errors import ConfigError, ContractError


def validate_boxes(boxes, what="box"):
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim == 1:
        b = b[None]
    if b.shape[-1] != 4:
        raise ContractError(f"{what} must have 4 coordinates, got shape {b.shape}")
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        bad = b[(b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])][0]
        raise ContractError(f"{what} has non-positive extent: {tuple(bad)}")
    return b


def iou(a, b):
    """Intersection over union of two boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU, (n, 4) x (m, 4) -> (n, m) float64."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_boxes(anchors, targets):
    """Box -> (dx, dy, dw, dh): center offsets over anchor size, log size ratios."""
    a = validate_boxes(anchors, "anchor")
    t = validate_boxes(targets, "target")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    tcx = t[:, 0] + 0.5 * tw
    tcy = t[:, 1] + 0.5 * th
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def decode_boxes(anchors, deltas):
    """Inverse of encode_boxes."""
    a = validate_boxes(anchors, "anchor")
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, image_h, image_w):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, 0] = np.clip(b[:, 0], 0, image_w)
    b[:, 1] = np.clip(b[:, 1], 0, image_h)
    b[:, 2] = np.clip(b[:, 2], 0, image_w)
    b[:, 3] = np.clip(b[:, 3], 0, image_h)
    return b


def generate_anchors(feat_h, feat_w, stride, scales, ratios=(1.0, 2.0)):
    """Reference boxes tiled at every feature cell.

    Per cell: one box per (ratio, scale) pair, centered at
    ((ix + 0.5) * stride, (iy + 0.5) * stride), with
    w = scale / sqrt(ratio), h = scale * sqrt(ratio).  Cells enumerate
    row-major, so anchor index n = (iy * feat_w + ix) * A + a.
    """
    scales = [float(s) for s in scales]
    ratios = [float(r) for r in ratios]
    if not scales:
        raise ConfigError("generate_anchors requires at least one scale")
    for r in ratios:
        if r <= 0:
            raise ConfigError(f"anchor ratio must be positive, got {r}")
        if abs(r - 0.5) < 1e-9:
            raise ConfigError(
                "anchor ratio 0.5 produces wide boxes and is rejected: "
                "pedestrians are upright, height/width >= 1"
            )
    shapes = np.array(
        [(s / np.sqrt(r), s * np.sqrt(r)) for r in ratios for s in scales]
    )  # (A, 2) as (w, h)
    cy, cx = np.meshgrid(
        (np.arange(feat_h) + 0.5) * stride, (np.arange(feat_w) + 0.5) * stride,
        indexing="ij",
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (cells, 2)
    w = shapes[None, :, 0]
    h = shapes[None, :, 1]
    x = centers[:, None, 0]
    y = centers[:, None, 1]
    boxes = np.stack(
        [x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=2
    )  # (cells, A, 4)
    return boxes.reshape(-1, 4)


def assign_proposal_labels(proposals, gts, pos_iou=0.5):
    """Label each proposal positive/negative against ground-truth boxes.

    Positive iff max IoU strictly exceeds pos_iou; positives carry the
    argmax gt index as regression target (ties to the lowest gt index).
    Returns (labels uint8 {1, 0}, target_gt_index int64 with -1 for
    negatives).
    """
    p = validate_boxes(proposals, "proposal")
    n = p.shape[0]
    if len(gts) == 0:
        return np.zeros(n, dtype=np.uint8), np.full(n, -1, dtype=np.int64)
    g = validate_boxes(gts, "ground truth")
    m = iou_matrix(p, g)
    best = m.argmax(axis=1)
    best_iou = m[np.arange(n), best]
    labels = (best_iou > pos_iou).astype(np.uint8)
    target = np.where(labels == 1, best, -1).astype(np.int64)
    return labels, target
