"""Detector construction: backbone branches, fusion junctions, RPN and
detection heads, plus manifest + blob serialization.

The backbone is a five-stage conv net (3x3 kernels, pad 1) with 2x2 max
pooling after stages 1-3 only, so the feature stride is 8.  Fusion
variants splice two modality branches into that sequence:

    none_color / none_thermal   one branch end to end
    early      concat + 1x1 channel-mix right after stage 1, shared trunk after
    halfway    concat + 1x1 channel-mix after stage 4, shared stage 5
    late       two full branches; RPN reads the concatenated stage-5 maps,
               each branch keeps its own RoI pooling and FC stack, and the
               two last FC features are concatenated before the heads

Branches never share parameters.  The decision-score path is not a built
model; it cascades two single-modality detectors (see pipeline.score_fuse).
"""

import os
from dataclasses import dataclass

import numpy as np

from .boxes import generate_anchors
from .errors import ConfigError, ContractError, DataFormatError
from .nn.layers import (
    ConcatChannels,
    Conv2d,
    FullyConnected,
    MaxPool2x2,
    NiN,
    ReLU,
    RoIPool,
    Softmax,
)

FUSION_STAGES = ("none_color", "none_thermal", "early", "halfway", "late")
POOL_AFTER_STAGE = (True, True, True, False, False)

# canonical backbone op sequence and the index where each fusion splices in
_OPS = ("conv1", "relu", "pool", "conv2", "relu", "pool",
        "conv3", "relu", "pool", "conv4", "relu", "conv5", "relu")
_JUNCTION = {"early": 2, "halfway": 11, "late": 13}


@dataclass(frozen=True)
class DetectorConfig:
    image_h: int = 64
    image_w: int = 80
    widths: tuple = (8, 16, 32, 32, 32)
    fc_width: int = 128
    anchor_scales: tuple = (16.0, 24.0, 32.0)
    anchor_ratios: tuple = (1.0, 2.0)
    rpn_channels: int = 32
    roi_size: int = 7
    init_std: float | None = None  # None = fan-in scaled Gaussian
    seed: int = 0

    @property
    def stride(self):
        return 2 ** sum(POOL_AFTER_STAGE)

    @property
    def feat_h(self):
        return self.image_h // self.stride

    @property
    def feat_w(self):
        return self.image_w // self.stride

    @property
    def anchors_per_cell(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def validate(self):
        if len(self.widths) != 5 or any(w <= 0 for w in self.widths):
            raise ConfigError(f"backbone needs 5 positive widths, got {self.widths}")
        if self.image_h % self.stride or self.image_w % self.stride:
            raise ConfigError(
                f"image size {self.image_h}x{self.image_w} must be divisible by "
                f"the pooling factor {self.stride}"
            )


MODALITY_CHANNELS = {"color": 3, "thermal": 1}


class DetectorModel:
    """A built layer graph with named parameters.

    Layers with parameters live in `self.layers`, an insertion-ordered dict;
    that order defines the serialization blob layout.
    """

    def __init__(self, config, stage):
        self.config = config
        self.stage = stage
        self.layers = {}
        self.modalities = (
            ["color"] if stage == "none_color"
            else ["thermal"] if stage == "none_thermal"
            else ["color", "thermal"]
        )
        self.anchors = generate_anchors(
            config.feat_h, config.feat_w, config.stride,
            config.anchor_scales, config.anchor_ratios,
        )

    # -- parameter store ---------------------------------------------------

    def _register(self, name, layer):
        self.layers[name] = layer
        return layer

    def params(self):
        out = {}
        for name, layer in self.layers.items():
            for pname, p in layer.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def param_grads(self):
        out = {}
        for name, layer in self.layers.items():
            for pname, g in layer.param_grads().items():
                out[f"{name}.{pname}"] = g
        return out

    def num_params(self):
        return sum(p.size for p in self.params().values())

    def astype(self, dtype):
        for layer in self.layers.values():
            layer.astype(dtype)
        return self

    # -- forward passes ------------------------------------------------------

    def _run_branch(self, ops, x):
        for op in ops:
            x = op.forward(x)
        return x

    def extract_features(self, color=None, thermal=None):
        """Run the backbone and RPN heads.

        Returns a dict with `roi`: the map(s) fed to RoI pooling, `obj`:
        the RPN objectness logit map, and `reg`: the RPN delta map.
        """
        cfg = self.config
        inputs = {"color": color, "thermal": thermal}
        for mod in self.modalities:
            x = inputs[mod]
            if x is None:
                raise ContractError(f"{self.stage} model requires a {mod} input")
            if x.shape != (1, MODALITY_CHANNELS[mod], cfg.image_h, cfg.image_w):
                raise ContractError(
                    f"{mod} input must be (1, {MODALITY_CHANNELS[mod]}, "
                    f"{cfg.image_h}, {cfg.image_w}), got {tuple(x.shape)}"
                )

        branch_out = {
            mod: self._run_branch(self.branch_ops[mod], inputs[mod])
            for mod in self.modalities
        }
        if self.stage in ("none_color", "none_thermal"):
            trunk = branch_out[self.modalities[0]]
            rpn_in = trunk
            roi = {"trunk": trunk}
        elif self.stage in ("early", "halfway"):
            fused = self.fuse_concat.forward(branch_out["color"], branch_out["thermal"])
            fused = self.fuse_relu.forward(self.fuse_nin.forward(fused))
            trunk = self._run_branch(self.trunk_ops, fused)
            rpn_in = trunk
            roi = {"trunk": trunk}
        else:  # late
            rpn_in = self.rpn_concat.forward(branch_out["color"], branch_out["thermal"])
            roi = dict(branch_out)

        h = self.rpn_relu.forward(self.rpn_conv.forward(rpn_in))
        return {
            "roi": roi,
            "obj": self.rpn_obj.forward(h),
            "reg": self.rpn_reg.forward(h),
        }

    def head_forward(self, features, rois):
        """Score and refine proposal boxes on already-extracted features.

        rois: (R, 4) image-space boxes.  Returns (cls_logits (R, 2),
        deltas (R, 4)).
        """
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        if rois.shape[0] == 0:
            raise ContractError("head_forward requires at least one proposal")
        if self.stage == "late":
            feats = []
            for mod in self.modalities:
                p = self.roipool[mod].forward(features["roi"][mod], rois)
                f = self.head_relu6[mod].forward(self.layers[f"head.{mod}.f6"].forward(p))
                f = self.head_relu7[mod].forward(self.layers[f"head.{mod}.f7"].forward(f))
                feats.append(f)
            h = self.head_concat.forward(*feats)
        else:
            p = self.roipool["trunk"].forward(features["roi"]["trunk"], rois)
            h = self.head_relu6["trunk"].forward(self.layers["head.f6"].forward(p))
            h = self.head_relu7["trunk"].forward(self.layers["head.f7"].forward(h))
        return self.layers["head.cls"].forward(h), self.layers["head.reg"].forward(h)

    def head_scores(self, features, rois):
        """Pedestrian probability in [0, 1] for each box."""
        cls_logits, _ = self.head_forward(features, rois)
        return Softmax().forward(cls_logits)[:, 1]

    # -- backward (training) -------------------------------------------------

    def backward(self, g_obj, g_reg, g_cls, g_head_reg):
        """Backpropagate RPN-map and head gradients through the whole graph.

        Must follow one extract_features + head_forward pass.  Gradients for
        every parameter are left on the layers (collect via param_grads).
        """
        # detection head
        gh = self.layers["head.cls"].backward(g_cls)
        gh = gh + self.layers["head.reg"].backward(g_head_reg)
        g_roi_maps = {}
        if self.stage == "late":
            gc, gt = self.head_concat.backward(gh)
            for mod, g in zip(self.modalities, (gc, gt)):
                g = self.head_relu7[mod].backward(g)
                g = self.layers[f"head.{mod}.f7"].backward(g)
                g = self.head_relu6[mod].backward(g)
                g = self.layers[f"head.{mod}.f6"].backward(g)
                g_roi_maps[mod] = self.roipool[mod].backward(g)
        else:
            g = self.head_relu7["trunk"].backward(gh)
            g = self.layers["head.f7"].backward(g)
            g = self.head_relu6["trunk"].backward(g)
            g = self.layers["head.f6"].backward(g)
            g_roi_maps["trunk"] = self.roipool["trunk"].backward(g)

        # RPN heads
        grpn = self.rpn_obj.backward(g_obj) + self.rpn_reg.backward(g_reg)
        grpn = self.rpn_conv.backward(self.rpn_relu.backward(grpn))

        # merge the two consumers of the shared maps, then walk backwards
        if self.stage == "late":
            ga, gb = self.rpn_concat.backward(grpn)
            gmaps = {
                "color": ga + g_roi_maps["color"],
                "thermal": gb + g_roi_maps["thermal"],
            }
            for mod in self.modalities:
                self._backward_branch(self.branch_ops[mod], gmaps[mod])
        elif self.stage in ("early", "halfway"):
            g = grpn + g_roi_maps["trunk"]
            g = self._backward_branch(self.trunk_ops, g)
            g = self.fuse_nin.backward(self.fuse_relu.backward(g))
            ga, gb = self.fuse_concat.backward(g)
            self._backward_branch(self.branch_ops["color"], ga)
            self._backward_branch(self.branch_ops["thermal"], gb)
        else:
            g = grpn + g_roi_maps["trunk"]
            self._backward_branch(self.branch_ops[self.modalities[0]], g)

    def _backward_branch(self, ops, g):
        for op in reversed(ops):
            g = op.backward(g)
        return g


def _build_backbone_ops(model, prefix, ops, c_in, rng):
    """Instantiate a run of the canonical op sequence."""
    cfg = model.config
    built = []
    c = c_in
    for op in ops:
        if op.startswith("conv"):
            i = int(op[4:]) - 1
            conv = model._register(
                f"{prefix}.{op}",
                Conv2d(c, cfg.widths[i], 3, stride=1, pad=1, rng=rng,
                       init_std=cfg.init_std),
            )
            built.append(conv)
            c = cfg.widths[i]
        elif op == "relu":
            built.append(ReLU())
        else:
            built.append(MaxPool2x2())
    return built, c


def build_detector(config, stage):
    """Construct a detector for the requested fusion stage."""
    if stage == "score":
        raise ConfigError(
            "decision-score fusion is a cascade of two single-modality models; "
            "train none_color and none_thermal and combine with score_fuse"
        )
    if stage not in FUSION_STAGES:
        raise ConfigError(f"unknown fusion stage {stage!r}, expected one of {FUSION_STAGES}")
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = DetectorModel(config, stage)
    cfg = config

    if stage in ("none_color", "none_thermal"):
        mod = model.modalities[0]
        ops, c5 = _build_backbone_ops(model, mod, _OPS, MODALITY_CHANNELS[mod], rng)
        model.branch_ops = {mod: ops}
        model.trunk_ops = []
        rpn_in_c = c5
        roi_c = {"trunk": c5}
    else:
        j = _JUNCTION[stage]
        model.branch_ops = {}
        for mod in ("color", "thermal"):
            ops, c_out = _build_backbone_ops(
                model, mod, _OPS[:j], MODALITY_CHANNELS[mod], rng
            )
            model.branch_ops[mod] = ops
        if stage in ("early", "halfway"):
            model.fuse_concat = ConcatChannels()
            model.fuse_nin = model._register(
                "fuse.nin", NiN(2 * c_out, c_out, rng=rng, init_std=cfg.init_std)
            )
            model.fuse_relu = ReLU()
            model.trunk_ops, c5 = _build_backbone_ops(model, "trunk", _OPS[j:], c_out, rng)
            rpn_in_c = c5
            roi_c = {"trunk": c5}
        else:  # late
            model.trunk_ops = []
            model.rpn_concat = ConcatChannels()
            rpn_in_c = 2 * c_out
            roi_c = {"color": c_out, "thermal": c_out}

    # RPN head: 3x3 conv, then 1x1 sibling convs for objectness and deltas
    a = cfg.anchors_per_cell
    model.rpn_conv = model._register(
        "rpn.conv", Conv2d(rpn_in_c, cfg.rpn_channels, 3, pad=1, rng=rng,
                           init_std=cfg.init_std)
    )
    model.rpn_relu = ReLU()
    model.rpn_obj = model._register(
        "rpn.obj", Conv2d(cfg.rpn_channels, a, 1, rng=rng, init_std=cfg.init_std)
    )
    model.rpn_reg = model._register(
        "rpn.reg", Conv2d(cfg.rpn_channels, 4 * a, 1, rng=rng, init_std=cfg.init_std)
    )

    # detection head
    scale = 1.0 / cfg.stride
    model.roipool = {}
    model.head_relu6 = {}
    model.head_relu7 = {}
    if stage == "late":
        for mod in model.modalities:
            model.roipool[mod] = RoIPool((cfg.roi_size, cfg.roi_size), scale)
            d_in = roi_c[mod] * cfg.roi_size * cfg.roi_size
            model._register(f"head.{mod}.f6",
                            FullyConnected(d_in, cfg.fc_width, rng=rng,
                                           init_std=cfg.init_std))
            model._register(f"head.{mod}.f7",
                            FullyConnected(cfg.fc_width, cfg.fc_width, rng=rng,
                                           init_std=cfg.init_std))
            model.head_relu6[mod] = ReLU()
            model.head_relu7[mod] = ReLU()
        model.head_concat = ConcatChannels()
        head_in = 2 * cfg.fc_width
    else:
        model.roipool["trunk"] = RoIPool((cfg.roi_size, cfg.roi_size), scale)
        d_in = roi_c["trunk"] * cfg.roi_size * cfg.roi_size
        model._register("head.f6", FullyConnected(d_in, cfg.fc_width, rng=rng,
                                                  init_std=cfg.init_std))
        model._register("head.f7", FullyConnected(cfg.fc_width, cfg.fc_width, rng=rng,
                                                  init_std=cfg.init_std))
        model.head_relu6["trunk"] = ReLU()
        model.head_relu7["trunk"] = ReLU()
        head_in = cfg.fc_width
    model._register("head.cls", FullyConnected(head_in, 2, rng=rng,
                                               init_std=cfg.init_std))
    model._register("head.reg", FullyConnected(head_in, 4, rng=rng,
                                               init_std=cfg.init_std))
    return model


# ---------------------------------------------------------------------------
# serialization: text manifest + little-endian float32 parameter blob
# ---------------------------------------------------------------------------

_MODEL_MAGIC = "msdet-model 1"


def _config_lines(cfg):
    yield f"config image_h {cfg.image_h}"
    yield f"config image_w {cfg.image_w}"
    yield "config widths " + ",".join(str(w) for w in cfg.widths)
    yield f"config fc_width {cfg.fc_width}"
    yield "config anchor_scales " + ",".join(repr(float(s)) for s in cfg.anchor_scales)
    yield "config anchor_ratios " + ",".join(repr(float(r)) for r in cfg.anchor_ratios)
    yield f"config rpn_channels {cfg.rpn_channels}"
    yield f"config roi_size {cfg.roi_size}"
    yield f"config init_std {'none' if cfg.init_std is None else repr(float(cfg.init_std))}"
    yield f"config seed {cfg.seed}"


def save_model(model, path):
    """Write manifest.txt + params.bin under `path` (a directory)."""
    os.makedirs(path, exist_ok=True)
    lines = [_MODEL_MAGIC, f"stage {model.stage}"]
    lines.extend(_config_lines(model.config))
    blob = bytearray()
    for name, layer in model.layers.items():
        if layer.kind in ("conv", "nin"):
            lines.append(
                f"layer {name} {layer.kind} {layer.c_in} {layer.c_out} "
                f"{layer.k} {layer.stride} {layer.pad}"
            )
        else:
            lines.append(f"layer {name} {layer.kind} {layer.d_in} {layer.d_out}")
        for p in layer.params().values():
            blob.extend(np.ascontiguousarray(p, dtype="<f4").tobytes())
    _atomic_write_text(os.path.join(path, "manifest.txt"), "\n".join(lines) + "\n")
    _atomic_write_bytes(os.path.join(path, "params.bin"), bytes(blob))


def load_model(path):
    """Rebuild a model from manifest.txt + params.bin; bit-exact round trip."""
    manifest = os.path.join(path, "manifest.txt")
    try:
        with open(manifest, "r", encoding="ascii") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read model manifest {manifest}: {e}") from e
    if not lines or lines[0] != _MODEL_MAGIC:
        raise DataFormatError(
            f"{manifest}:1: expected {_MODEL_MAGIC!r}, got {lines[0] if lines else '<empty>'!r}"
        )
    stage = None
    cfg_kv = {}
    layer_records = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "stage":
            stage = parts[1]
        elif parts[0] == "config":
            cfg_kv[parts[1]] = parts[2]
        elif parts[0] == "layer":
            layer_records.append((ln, parts[1:]))
        else:
            raise DataFormatError(f"{manifest}:{ln}: unknown record {parts[0]!r}")
    if stage is None:
        raise DataFormatError(f"{manifest}: missing stage record")
    try:
        cfg = DetectorConfig(
            image_h=int(cfg_kv["image_h"]),
            image_w=int(cfg_kv["image_w"]),
            widths=tuple(int(w) for w in cfg_kv["widths"].split(",")),
            fc_width=int(cfg_kv["fc_width"]),
            anchor_scales=tuple(float(s) for s in cfg_kv["anchor_scales"].split(",")),
            anchor_ratios=tuple(float(r) for r in cfg_kv["anchor_ratios"].split(",")),
            rpn_channels=int(cfg_kv["rpn_channels"]),
            roi_size=int(cfg_kv["roi_size"]),
            init_std=None if cfg_kv["init_std"] == "none" else float(cfg_kv["init_std"]),
            seed=int(cfg_kv["seed"]),
        )
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"{manifest}: bad config record: {e}") from e

    model = build_detector(cfg, stage)

    # cross-check the manifest layer list against the rebuilt graph
    names = list(model.layers)
    if len(layer_records) != len(names):
        raise DataFormatError(
            f"{manifest}: {len(layer_records)} layer records but the {stage} graph "
            f"has {len(names)}"
        )
    for (ln, rec), name in zip(layer_records, names):
        if rec[0] != name or rec[1] != model.layers[name].kind:
            raise DataFormatError(
                f"{manifest}:{ln}: layer record {rec[:2]} does not match graph "
                f"layer ({name}, {model.layers[name].kind})"
            )

    blob_path = os.path.join(path, "params.bin")
    try:
        with open(blob_path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read {blob_path}: {e}") from e
    flat = np.frombuffer(raw, dtype="<f4")
    expected = model.num_params()
    if flat.size != expected:
        raise DataFormatError(
            f"{blob_path}: holds {flat.size} float32 values, model expects {expected}"
        )
    pos = 0
    for layer in model.layers.values():
        for pname, p in layer.params().items():
            chunk = flat[pos:pos + p.size].reshape(p.shape).astype(np.float32)
            setattr(layer, pname, np.ascontiguousarray(chunk))
            pos += p.size
    return model


def _atomic_write_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path, data):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
