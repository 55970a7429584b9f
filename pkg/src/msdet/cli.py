"""Command-line interface.

Subcommands: synth, train, detect, score-fuse, eval, compare, proposals.
Exit codes: 0 success, 1 usage error, 2 data/contract error.  Every run
prints its resolved configuration; all randomness hangs off --seed, so
identical invocations produce identical artifacts.
"""

import argparse
import sys

from . import complementarity as comp
from . import data as dio
from . import evaluation as ev
from . import pipeline as pl
from .errors import ConfigError, ContractError, DataFormatError, TrainingDivergedError
from .model import DetectorConfig, build_detector, load_model, save_model

FUSION_CHOICES = ("none-color", "none-thermal", "early", "halfway", "late")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _print_config(args):
    print("resolved configuration:")
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"  {key} = {getattr(args, key)}")


def _stage(cli_value):
    return cli_value.replace("-", "_")


def _filter_condition(samples, condition):
    if condition == "all":
        return samples
    return [s for s in samples if s.pair.condition == condition]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    params = dio.SynthParams(
        n_images=args.images,
        n_test=args.test_images,
        image_h=args.image_h,
        image_w=args.image_w,
        seed=args.seed,
    )
    summary = dio.synth_dataset(params, args.out)
    for split, info in summary["splits"].items():
        print(f"{split}: {info['n_images']} pairs, visibility {info['visibility']}")
    return 0


def cmd_train(args):
    samples = dio.load_dataset(args.data, "train")
    if not samples:
        raise ContractError(f"no training images found under {args.data}")
    h, w = samples[0].pair.color.shape[2:]
    config = DetectorConfig(image_h=h, image_w=w, seed=args.seed)
    model = build_detector(config, _stage(args.fusion))
    schedule = pl.TrainSchedule(
        epochs_phase1=args.epochs1, lr_phase1=args.lr1,
        epochs_phase2=args.epochs2, lr_phase2=args.lr2,
        seed=args.seed,
    )
    losses = pl.train(model, samples, schedule)
    for i, loss in enumerate(losses, start=1):
        print(f"epoch {i}: mean loss {loss:.6f}")
    save_model(model, args.out)
    print(f"model saved to {args.out}")
    return 0


def _detect_split(model, samples, args):
    dets = {}
    for s in samples:
        dets[s.pair.image_id] = pl.detect(
            model, s.pair, score_thresh=args.score_thresh,
            nms_thresh=args.nms, topk=args.topk,
        )
    return dets


def cmd_detect(args):
    model = load_model(args.model)
    samples = dio.load_dataset(args.data, args.split)
    dets = _detect_split(model, samples, args)
    dio.save_detections(args.out, dets)
    n = sum(len(v) for v in dets.values())
    print(f"{n} detections over {len(samples)} images written to {args.out}")
    return 0


def cmd_score_fuse(args):
    model_c = load_model(args.model_color)
    model_t = load_model(args.model_thermal)
    samples = dio.load_dataset(args.data, args.split)
    dets = {}
    for s in samples:
        dets[s.pair.image_id] = pl.score_fuse(
            model_c, model_t, s.pair,
            score_thresh=args.score_thresh, nms_thresh=args.nms, topk=args.topk,
        )
    dio.save_detections(args.out, dets)
    n = sum(len(v) for v in dets.values())
    print(f"{n} fused detections over {len(samples)} images written to {args.out}")
    return 0


def cmd_eval(args):
    samples = _filter_condition(dio.load_dataset(args.data, args.split), args.condition)
    if not samples:
        raise ContractError(f"no {args.condition} images in split {args.split}")
    gts = {s.pair.image_id: s.gts for s in samples}
    dets = {
        k: v for k, v in dio.load_detections(args.dets).items() if k in gts
    }
    curve = ev.mr_fppi_curve(dets, gts, iou_thresh=args.iou)
    mr = ev.log_avg_miss_rate(curve)
    if args.curve:
        ev.write_curve(args.curve, curve.fppi, curve.miss_rate,
                       "fppi,miss_rate", summary=f"MR={mr:.4f}")
        print(f"curve written to {args.curve}")
    print(f"MR={mr:.4f}")
    return 0


def cmd_proposals(args):
    model = load_model(args.model)
    samples = _filter_condition(dio.load_dataset(args.data, args.split), args.condition)
    if not samples:
        raise ContractError(f"no {args.condition} images in split {args.split}")
    props = {}
    gts = {}
    for s in samples:
        props[s.pair.image_id] = pl.rpn_forward(
            model, color=s.pair.color, thermal=s.pair.thermal, topk=args.topk
        )
        gts[s.pair.image_id] = s.gts
    recall_at = lambda k, iou: ev.proposal_recall(props, gts, k, iou_thresh=iou)
    if args.recall_vs_k:
        ks = list(range(1, args.topk + 1))
        ev.write_curve(args.recall_vs_k, ks,
                       [recall_at(k, args.iou) for k in ks], "k,recall")
        print(f"recall-vs-k written to {args.recall_vs_k}")
    if args.recall_vs_iou:
        ious = [0.5 + 0.05 * i for i in range(10)]
        ev.write_curve(args.recall_vs_iou, ious,
                       [recall_at(args.topk, i) for i in ious], "iou,recall")
        print(f"recall-vs-iou written to {args.recall_vs_iou}")
    print(f"recall@30(iou={args.iou}) = {recall_at(30, args.iou):.4f}")
    return 0


def cmd_compare(args):
    samples = dio.load_dataset(args.data, args.split)
    dets_a = dio.load_detections(args.dets_a)
    dets_b = dio.load_detections(args.dets_b)

    def matches_for(dets, subset):
        out = {}
        for s in subset:
            thresholded = [
                d for d in dets.get(s.pair.image_id, []) if d.score > args.score_thresh
            ]
            out[s.pair.image_id] = ev.match_image(thresholded, s.gts, args.iou)
        return out

    rows = []
    for condition in ("all", "day", "night"):
        subset = _filter_condition(samples, condition)
        if not subset:
            continue
        table = comp.partition(matches_for(dets_a, subset), matches_for(dets_b, subset))
        if table.gt_count == 0:
            continue
        rows.append((condition, table, comp.oracle_bound(table)))
    if not rows:
        raise ContractError("no condition had ground truths to compare on")
    print(comp.format_tables(rows, label_a="A", label_b="B"))
    for cond, _, bound in rows:
        per_gt = bound.fp_rates["per_gt"]
        print(
            f"{cond}: union {bound.union_detection_rate:.4f} "
            f"(A {bound.detection_rate_a:.4f}, B {bound.detection_rate_b:.4f}); "
            f"shared FPs {bound.shared_fp_count} "
            f"[{per_gt['after']:.4f}/gt, "
            f"{bound.fp_rates['per_image']['after']:.4f}/image]"
        )
    if args.out:
        dio.atomic_write_text(args.out, comp.table_records(rows))
        print(f"records written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p, *names):
    if "score_thresh" in names:
        p.add_argument("--score-thresh", type=float, default=0.5,
                       help="keep detections with score strictly above this (default 0.5)")
    if "nms" in names:
        p.add_argument("--nms", type=float, default=0.3,
                       help="detection NMS IoU threshold (default 0.3)")
    if "topk" in names:
        p.add_argument("--topk", type=int, default=300,
                       help="max proposals per image (default 300)")
    if "iou" in names:
        p.add_argument("--iou", type=float, default=0.5,
                       help="matching IoU threshold (default 0.5)")
    if "condition" in names:
        p.add_argument("--condition", choices=("all", "day", "night"), default="all")
    if "split" in names:
        p.add_argument("--split", choices=("train", "test"), default="test")
    if "seed" in names:
        p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="msdet",
                     description="multispectral pedestrian detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multispectral dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--images", type=int, required=True, help="training pairs to generate")
    p.add_argument("--test-images", type=int, default=None,
                   help="test pairs (default: images // 5, at least 1)")
    p.add_argument("--image-h", type=int, default=64)
    p.add_argument("--image-w", type=int, default=80)
    _add_common(p, "seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--fusion", choices=FUSION_CHOICES, required=True)
    p.add_argument("--epochs1", type=int, default=4)
    p.add_argument("--lr1", type=float, default=0.001)
    p.add_argument("--epochs2", type=int, default=2)
    p.add_argument("--lr2", type=float, default=0.0001)
    _add_common(p, "seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output detections CSV")
    _add_common(p, "score_thresh", "nms", "topk", "split")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("score-fuse",
                       help="cascade two single-modality models by score averaging")
    p.add_argument("--data", required=True)
    p.add_argument("--model-color", required=True)
    p.add_argument("--model-thermal", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, "score_thresh", "nms", "topk", "split")
    p.set_defaults(func=cmd_score_fuse)

    p = sub.add_parser("eval", help="miss rate / FPPI evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--dets", required=True, help="detections CSV")
    p.add_argument("--curve", default=None, help="optional output curve CSV")
    _add_common(p, "iou", "condition", "split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("proposals", help="proposal recall analyses")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--recall-vs-k", default=None, help="output (k, recall) CSV")
    p.add_argument("--recall-vs-iou", default=None, help="output (iou, recall) CSV")
    _add_common(p, "topk", "iou", "condition", "split")
    p.set_defaults(func=cmd_proposals)

    p = sub.add_parser("compare", help="two-detector complementarity analysis")
    p.add_argument("--data", required=True)
    p.add_argument("--dets-a", required=True)
    p.add_argument("--dets-b", required=True)
    p.add_argument("--out", default=None, help="optional machine-readable CSV")
    _add_common(p, "score_thresh", "iou", "split")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _print_config(args)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DataFormatError, TrainingDivergedError,
            OSError) as e:
        print(f"msdet: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
