"""End-to-end drivers: proposal extraction, NMS, training, detection, and
the two-detector decision-score cascade.

Training is approximate joint training: one SGD step per image pair
optimizes the sum of the RPN losses (binary objectness cross-entropy plus
smooth-L1 on positive-anchor deltas) and the detection-head losses
(two-class cross-entropy plus smooth-L1 on positive proposals).
"""

from dataclasses import dataclass

import numpy as np

from .boxes import (
    assign_proposal_labels,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    iou_matrix,
)
from .errors import ConfigError, ContractError, TrainingDivergedError
from .evaluation import filter_reasonable
from .nn.layers import Softmax
from .nn.optim import MomentumSGD

RPN_NMS_THRESH = 0.7
RPN_PRE_NMS_TOP = 2000
RPN_NEG_IOU = 0.3
RPN_BATCH = 256           # anchors sampled per step, up to 1:1 pos:neg
HEAD_BATCH = 64
HEAD_POS_FRACTION = 0.25  # at most 1 positive per 3 negatives
# fixed head regression target scaling (two-stage detector convention);
# sharpens the smooth-L1 response to the typically small refinements
HEAD_DELTA_SCALE = np.array([0.1, 0.1, 0.2, 0.2])


@dataclass
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    source: str | None = None

    def __post_init__(self):
        self.x1, self.y1, self.x2, self.y2 = (
            float(self.x1), float(self.y1), float(self.x2), float(self.y2))
        self.score = float(self.score)

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Proposal:
    x1: float
    y1: float
    x2: float
    y2: float
    objectness: float

    def __post_init__(self):
        self.x1, self.y1, self.x2, self.y2 = (
            float(self.x1), float(self.y1), float(self.x2), float(self.y2))
        self.objectness = float(self.objectness)

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class TrainSchedule:
    epochs_phase1: int = 4
    lr_phase1: float = 0.001
    epochs_phase2: int = 2
    lr_phase2: float = 0.0001
    momentum: float = 0.9
    seed: int = 0

    def validate(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("epoch counts must be non-negative")


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def _nms_indices(boxes, scores, iou_thresh):
    """Greedy suppression; ties in score keep input order."""
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    area = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ov = inter / (area[i] + area[rest] - inter)
        order = rest[ov <= iou_thresh]
    return keep


def nms(dets, iou_thresh):
    """Keep a detection iff its IoU with every higher-scored kept one is
    <= iou_thresh.  Output is score-descending (kept order)."""
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError(f"nms iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in _nms_indices(boxes, scores, iou_thresh)]


# ---------------------------------------------------------------------------
# RPN map <-> anchor-order flattening
# ---------------------------------------------------------------------------

def _flatten_obj(obj_map):
    # (1, A, fh, fw) -> (cells * A,) in (iy, ix, a) order
    return obj_map[0].transpose(1, 2, 0).reshape(-1)

def _unflatten_obj(flat, a, fh, fw):
    return flat.reshape(fh, fw, a).transpose(2, 0, 1)[None]

def _flatten_reg(reg_map, a):
    # (1, 4A, fh, fw) -> (cells * A, 4)
    _, _, fh, fw = reg_map.shape
    return reg_map[0].reshape(a, 4, fh, fw).transpose(2, 3, 0, 1).reshape(-1, 4)

def _unflatten_reg(flat, a, fh, fw):
    return flat.reshape(fh, fw, a, 4).transpose(2, 3, 0, 1).reshape(1, 4 * a, fh, fw)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _proposals_from_maps(model, features, topk, nms_thresh=RPN_NMS_THRESH,
                         pre_nms_top=RPN_PRE_NMS_TOP):
    cfg = model.config
    scores = _sigmoid(_flatten_obj(features["obj"]).astype(np.float64))
    deltas = _flatten_reg(features["reg"], cfg.anchors_per_cell).astype(np.float64)
    boxes = clip_boxes(decode_boxes(model.anchors, deltas), cfg.image_h, cfg.image_w)
    # degenerate decoded boxes cannot enter NMS / IoU math
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[ok], scores[ok]
    order = np.argsort(-scores, kind="stable")[:pre_nms_top]
    boxes, scores = boxes[order], scores[order]
    keep = _nms_indices(boxes, scores, nms_thresh)[:topk]
    return boxes[keep], scores[keep]


def rpn_forward(model, color=None, thermal=None, topk=300):
    """Proposals for one image pair, objectness-descending, clipped, at most
    topk after NMS."""
    features = model.extract_features(color=color, thermal=thermal)
    boxes, scores = _proposals_from_maps(model, features, topk)
    return [Proposal(*b, objectness=float(s)) for b, s in zip(boxes, scores)]


def _clip_valid(boxes, image_h, image_w, min_size=1e-3):
    """Clip to the image but keep every box at positive area: a decoded box
    that collapses on the boundary becomes a min_size sliver just inside."""
    b = clip_boxes(boxes, image_h, image_w)
    b[:, 0] = np.minimum(b[:, 0], image_w - min_size)
    b[:, 1] = np.minimum(b[:, 1], image_h - min_size)
    b[:, 2] = np.maximum(b[:, 2], b[:, 0] + min_size)
    b[:, 3] = np.maximum(b[:, 3], b[:, 1] + min_size)
    return b


def detection_head_forward(model, features, proposals):
    """One Detection per proposal: refined box + pedestrian score."""
    if not proposals:
        raise ContractError("detection_head_forward requires proposals")
    rois = np.array([p.box for p in proposals], dtype=np.float64)
    cls_logits, deltas = model.head_forward(features, rois)
    scores = Softmax().forward(cls_logits)[:, 1]
    boxes = _clip_valid(
        decode_boxes(rois, deltas.astype(np.float64) * HEAD_DELTA_SCALE),
        model.config.image_h, model.config.image_w,
    )
    return [
        Detection(*b, score=float(s), source=model.stage)
        for b, s in zip(boxes, scores)
    ]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _bce_with_logits(z, y, norm):
    # stable binary cross-entropy; returns (loss_sum/norm, dL/dz / norm)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (_sigmoid(z) - y) / norm
    return float(loss.sum() / norm), grad


def _smooth_l1(d):
    a = np.abs(d)
    loss = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1.0, d, np.sign(d))
    return loss, grad


def _softmax_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].sum() / n)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _rpn_targets(anchors, gt_boxes, pos_iou=0.5, neg_iou=RPN_NEG_IOU):
    """Anchor labels: 1 positive, 0 negative, -1 ignored.

    Positive above pos_iou or as the best anchor of some gt (so every gt
    owns at least one); the band between neg_iou and pos_iou is ignored.
    """
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int8)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.full(n, -1, dtype=np.int64)
    m = iou_matrix(anchors, gt_boxes)
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    labels[best_iou > pos_iou] = 1
    labels[m.argmax(axis=0)] = 1
    return labels, best_gt


def _train_step(model, sample, optimizer, rng, gt_augment=True):
    """One joint forward/backward/update on a single image pair."""
    cfg = model.config
    a = cfg.anchors_per_cell
    fh, fw = cfg.feat_h, cfg.feat_w
    features = model.extract_features(color=sample.pair.color, thermal=sample.pair.thermal)

    gt_boxes = np.array([g.box for g in sample.train_gts], dtype=np.float64)

    # --- RPN objectness + regression ---
    # sample up to 1:1 pos:neg so the few positives are not drowned out
    labels, best_gt = _rpn_targets(model.anchors, gt_boxes)
    apos = np.flatnonzero(labels == 1)
    aneg = np.flatnonzero(labels == 0)
    n_apos = min(apos.size, RPN_BATCH // 2)
    n_aneg = min(aneg.size, RPN_BATCH - n_apos)
    sampled = np.concatenate([
        rng.permutation(apos)[:n_apos],
        rng.permutation(aneg)[:n_aneg],
    ])
    z = _flatten_obj(features["obj"]).astype(np.float64)
    n_labeled = max(1, sampled.size)
    rpn_cls_loss, gz_l = _bce_with_logits(
        z[sampled], labels[sampled].astype(np.float64), n_labeled
    )
    gz = np.zeros_like(z)
    gz[sampled] = gz_l

    deltas = _flatten_reg(features["reg"], a).astype(np.float64)
    g_deltas = np.zeros_like(deltas)
    pos = apos
    rpn_reg_loss = 0.0
    if pos.size:
        targets = encode_boxes(model.anchors[pos], gt_boxes[best_gt[pos]])
        l, g = _smooth_l1(deltas[pos] - targets)
        rpn_reg_loss = float(l.sum() / pos.size)
        g_deltas[pos] = g / pos.size

    g_obj = _unflatten_obj(gz, a, fh, fw).astype(np.float32)
    g_reg = _unflatten_reg(g_deltas, a, fh, fw).astype(np.float32)

    # --- proposal sampling for the head ---
    prop_boxes, _ = _proposals_from_maps(model, features, topk=300)
    if gt_augment and len(gt_boxes):
        prop_boxes = np.concatenate([prop_boxes, gt_boxes], axis=0)
    plabels, ptarget = assign_proposal_labels(prop_boxes, gt_boxes)
    pos_idx = np.flatnonzero(plabels == 1)
    neg_idx = np.flatnonzero(plabels == 0)
    n_pos = min(pos_idx.size, int(HEAD_BATCH * HEAD_POS_FRACTION))
    n_neg = min(neg_idx.size, HEAD_BATCH - n_pos)
    sel = np.concatenate([
        rng.permutation(pos_idx)[:n_pos],
        rng.permutation(neg_idx)[:n_neg],
    ]).astype(np.int64)
    rois = prop_boxes[sel]
    roi_labels = plabels[sel].astype(np.int64)
    roi_target = ptarget[sel]

    cls_logits, head_deltas = model.head_forward(features, rois)
    head_cls_loss, g_cls = _softmax_ce(cls_logits.astype(np.float64), roi_labels)

    g_head_reg = np.zeros_like(head_deltas, dtype=np.float64)
    head_reg_loss = 0.0
    hp = np.flatnonzero(roi_labels == 1)
    if hp.size:
        targets = encode_boxes(rois[hp], gt_boxes[roi_target[hp]]) / HEAD_DELTA_SCALE
        l, g = _smooth_l1(head_deltas[hp].astype(np.float64) - targets)
        head_reg_loss = float(l.sum() / hp.size)
        g_head_reg[hp] = g / hp.size

    model.backward(
        g_obj, g_reg,
        g_cls.astype(np.float32), g_head_reg.astype(np.float32),
    )
    optimizer.step(model.param_grads())
    return rpn_cls_loss + rpn_reg_loss + head_cls_loss + head_reg_loss


def train(model, dataset, schedule):
    """Fit in place over the two LR phases; returns per-epoch mean losses.

    dataset: sequence of objects with .pair (color/thermal tensors) and
    .gts (GroundTruth list).  Only reasonable instances are used as
    targets, and images with none are skipped.
    """
    if model.stage == "score":
        raise ContractError("score fusion trains two single-modality models individually")
    schedule.validate()
    if not dataset:
        raise ContractError("training requires a non-empty dataset")

    usable = []
    for sample in dataset:
        kept, _ = filter_reasonable(sample.gts)
        if kept:
            sample.train_gts = kept
            usable.append(sample)
    if not usable:
        raise ContractError("no training image has a reasonable ground-truth instance")

    rng = np.random.default_rng(schedule.seed)
    optimizer = MomentumSGD(model.params(), lr=schedule.lr_phase1,
                            momentum=schedule.momentum)
    epoch_losses = []
    phases = [(schedule.epochs_phase1, schedule.lr_phase1),
              (schedule.epochs_phase2, schedule.lr_phase2)]
    step = 0
    for epochs, lr in phases:
        optimizer.lr = lr
        for _ in range(epochs):
            order = rng.permutation(len(usable))
            total = 0.0
            for idx in order:
                sample = usable[idx]
                loss = _train_step(model, sample, optimizer, rng)
                step += 1
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss} at step {step} on image "
                        f"{sample.pair.image_id}",
                        image_id=sample.pair.image_id, step=step,
                    )
                total += loss
            epoch_losses.append(total / len(usable))
    return epoch_losses


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def detect(model, pair, score_thresh=0.5, nms_thresh=0.3, topk=300):
    """Full detection pass on one image pair.

    proposals -> head scores -> decode -> NMS -> keep score > score_thresh
    (no filtering when score_thresh is None).  Score-descending output.
    """
    if pair.color.shape[2:] != pair.thermal.shape[2:]:
        raise ContractError(
            f"color/thermal pair must be aligned with equal dims, got "
            f"{tuple(pair.color.shape)} vs {tuple(pair.thermal.shape)}"
        )
    features = model.extract_features(color=pair.color, thermal=pair.thermal)
    boxes, scores = _proposals_from_maps(model, features, topk)
    if boxes.shape[0] == 0:
        return []
    proposals = [Proposal(*b, objectness=float(s)) for b, s in zip(boxes, scores)]
    dets = detection_head_forward(model, features, proposals)
    dets = nms(dets, nms_thresh)
    if score_thresh is not None:
        dets = [d for d in dets if d.score > score_thresh]
    return dets


def score_boxes(model, pair, boxes):
    """Pedestrian probability of the model's head for given boxes (no
    refinement); used for cross-scoring in the decision-score cascade."""
    features = model.extract_features(color=pair.color, thermal=pair.thermal)
    return model.head_scores(features, np.asarray(boxes, dtype=np.float64))


def score_fuse(model_color, model_thermal, pair, weights=(0.5, 0.5),
               score_thresh=0.5, nms_thresh=0.3, topk=300):
    """Cascade two single-modality detectors.

    Each model's detections are re-scored by the other model's head on the
    same box; the fused score is the weighted sum of the color-model and
    thermal-model scores.  The union of both lists then passes through NMS
    and the score threshold (applied to the fused score).
    """
    if model_color.stage != "none_color" or model_thermal.stage != "none_thermal":
        raise ContractError(
            "score_fuse expects a none_color model and a none_thermal model, got "
            f"{model_color.stage} and {model_thermal.stage}"
        )
    w_color, w_thermal = (float(w) for w in weights)
    if abs(w_color + w_thermal - 1.0) > 1e-9:
        raise ContractError(f"fusion weights must sum to 1, got {weights}")

    dets_c = detect(model_color, pair, score_thresh=None, nms_thresh=nms_thresh, topk=topk)
    dets_t = detect(model_thermal, pair, score_thresh=None, nms_thresh=nms_thresh, topk=topk)

    fused = []
    if dets_c:
        boxes = np.array([d.box for d in dets_c], dtype=np.float64)
        other = score_boxes(model_thermal, pair, boxes)
        for d, s_t in zip(dets_c, other):
            fused.append(Detection(*d.box, score=w_color * d.score + w_thermal * float(s_t),
                                   source=d.source))
    if dets_t:
        boxes = np.array([d.box for d in dets_t], dtype=np.float64)
        other = score_boxes(model_color, pair, boxes)
        for d, s_c in zip(dets_t, other):
            fused.append(Detection(*d.box, score=w_color * float(s_c) + w_thermal * d.score,
                                   source=d.source))
    fused = nms(fused, nms_thresh)
    if score_thresh is not None:
        fused = [d for d in fused if d.score > score_thresh]
    return fused
