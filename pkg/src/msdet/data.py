"""Synthetic multispectral dataset generation and file IO.

Pedestrians are textured upright rectangles (height ~ 2x width) rendered
into the color image, the thermal image, or both, according to a sampled
visibility mix; that mix is what makes the two channels genuinely
complementary.  Distractors render into exactly one modality and provide
single-channel false-positive bait.  Night images keep the same geometry
but with flattened color contrast.

On-disk formats (see docs/formats.md for grammars and worked examples):
  color images     binary PPM (P6), 8-bit
  thermal images   binary PGM (P5), 8-bit
  annotations      one text document per split, versioned
  detections       CSV with header image_id,x1,y1,x2,y2,score
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError
from .evaluation import GroundTruth
from .pipeline import Detection

ANN_MAGIC = "msdet-annotations 1"
DS_MAGIC = "msdet-dataset 1"
DET_HEADER = "image_id,x1,y1,x2,y2,score"


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass
class ImagePair:
    """Aligned color (1,3,h,w) and thermal (1,1,h,w) tensors in [0, 1]."""
    color: np.ndarray
    thermal: np.ndarray
    image_id: str
    condition: str = "day"


@dataclass
class ImageRecord:
    image_id: str
    color_path: str
    thermal_path: str
    condition: str
    gts: list


@dataclass
class DatasetSample:
    pair: ImagePair
    gts: list


@dataclass
class SynthParams:
    n_images: int = 100
    n_test: int | None = None  # default: max(1, n_images // 5)
    image_h: int = 64
    image_w: int = 80
    peds_per_image: tuple = (1, 2)
    visibility_mix: tuple = (0.5, 0.25, 0.25)  # (both, color only, thermal only)
    distractor_density: float = 1.5
    noise_level: float = 0.02
    night_fraction: float = 0.3
    ped_height_range: tuple = (46.0, 62.0)
    night_color_contrast: float = 0.45
    pool_factor: int = 8
    seed: int = 0

    def validate(self):
        mix = self.visibility_mix
        if len(mix) != 3 or any(p < 0 or p > 1 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigError(
                f"visibility mix must be three probabilities summing to 1, got {mix}"
            )
        if self.image_h % self.pool_factor or self.image_w % self.pool_factor:
            raise ConfigError(
                f"image dims {self.image_h}x{self.image_w} must be divisible by "
                f"the pooling factor {self.pool_factor}"
            )
        if self.n_images <= 0:
            raise ConfigError("n_images must be positive")
        if self.distractor_density < 0 or self.noise_level < 0:
            raise ConfigError("distractor density and noise level must be >= 0")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ConfigError("night_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def write_ppm(path, img):
    """img: (3, h, w) float in [0, 1] -> 8-bit binary PPM."""
    _, h, w = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    payload = data.transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def write_pgm(path, img):
    """img: (h, w) float in [0, 1] -> 8-bit binary PGM."""
    h, w = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_pnm(path, magic):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read image {path}: {e}") from e
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} image, got {fields[0]!r}")
    w, h, maxval = (int(v) for v in fields[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    return raw[pos:], h, w


def read_ppm(path):
    payload, h, w = _read_pnm(path, b"P6")
    if len(payload) != 3 * h * w:
        raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {3 * h * w}")
    arr = np.frombuffer(payload, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def read_pgm(path):
    payload, h, w = _read_pnm(path, b"P5")
    if len(payload) != h * w:
        raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {h * w}")
    return np.frombuffer(payload, np.uint8).reshape(h, w).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

def _paint_box(plane, box, value, noise, rng):
    """Fill the in-bounds part of a float box on (h, w) or (3, h, w)."""
    h, w = plane.shape[-2:]
    x1 = max(0, int(round(box[0])))
    y1 = max(0, int(round(box[1])))
    x2 = min(w, int(round(box[2])))
    y2 = min(h, int(round(box[3])))
    if x2 <= x1 or y2 <= y1:
        return
    if plane.ndim == 2:
        plane[y1:y2, x1:x2] = value + rng.normal(0, noise, size=(y2 - y1, x2 - x1))
    else:
        block = np.asarray(value).reshape(3, 1, 1) + rng.normal(
            0, noise, size=(3, y2 - y1, x2 - x1)
        )
        plane[:, y1:y2, x1:x2] = block


def _render_image(params, rng):
    """Returns (color (3,h,w), thermal (h,w), condition, gts list, visibility tags)."""
    h, w = params.image_h, params.image_w
    night = bool(rng.random() < params.night_fraction)
    condition = "night" if night else "day"

    grad = np.linspace(-0.04, 0.04, w)[None, :]
    color_base = rng.uniform(0.38, 0.58, size=3)
    if night:
        color_base = color_base * 0.6  # darker scene; paints reference this too
    color = np.broadcast_to(color_base.reshape(3, 1, 1) + grad[None], (3, h, w)).copy()
    thermal_base = rng.uniform(0.22, 0.40)
    thermal = np.broadcast_to(thermal_base + grad, (h, w)).copy()

    contrast = params.night_color_contrast if night else 1.0

    # distractors live in exactly one modality
    n_distract = int(rng.poisson(params.distractor_density))
    for _ in range(n_distract):
        size = rng.uniform(10, 26)
        ratio = rng.uniform(0.4, 1.1)  # height/width, never pedestrian-shaped
        dw, dh = size / math.sqrt(ratio), size * math.sqrt(ratio)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        box = (cx - dw / 2, cy - dh / 2, cx + dw / 2, cy + dh / 2)
        in_color = bool(rng.random() < 0.5)
        if in_color:
            delta = rng.uniform(0.25, 0.45, size=3) * rng.choice([-1.0, 1.0], size=3)
            _paint_box(color, box, np.clip(color_base + delta * contrast, 0, 1),
                       0.03, rng)
        else:
            _paint_box(thermal, box, min(1.0, thermal_base + rng.uniform(0.30, 0.50)),
                       0.03, rng)

    # pedestrians; a small fraction is deliberately clipped by the frame
    lo, hi = params.peds_per_image
    n_peds = int(rng.integers(lo, hi + 1))
    boxes, vis_tags = [], []
    for _ in range(n_peds):
        ph = rng.uniform(*params.ped_height_range)
        pw = ph / 2.0 * rng.uniform(0.9, 1.1)
        if rng.random() < 0.12:
            x1 = rng.uniform(-0.3 * pw, w - 0.7 * pw)
            y1 = rng.uniform(-0.3 * ph, h - 0.7 * ph)
        else:
            x1 = rng.uniform(0, w - pw)
            y1 = rng.uniform(0, h - ph)
        box = (x1, y1, x1 + pw, y1 + ph)
        u = rng.random()
        p_both, p_color, _ = params.visibility_mix
        vis = "both" if u < p_both else "color_only" if u < p_both + p_color else "thermal_only"
        boxes.append(box)
        vis_tags.append(vis)

        torso_split = box[1] + 0.45 * ph
        if vis in ("both", "color_only"):
            for part_box in (
                (box[0], box[1], box[2], torso_split),
                (box[0], torso_split, box[2], box[3]),
            ):
                delta = rng.uniform(0.28, 0.45, size=3) * rng.choice([-1.0, 1.0], size=3)
                _paint_box(color, part_box,
                           np.clip(color_base + delta * contrast, 0, 1), 0.03, rng)
        if vis in ("both", "thermal_only"):
            heat = rng.uniform(0.32, 0.52)
            _paint_box(thermal, box, min(1.0, thermal_base + heat), 0.03, rng)

    # flags: truncated if the box leaves the frame, occluded if a
    # later-drawn pedestrian covers more than 35% of it
    gts = []
    for i, box in enumerate(boxes):
        truncated = box[0] < 0 or box[1] < 0 or box[2] > w or box[3] > h
        area = (box[2] - box[0]) * (box[3] - box[1])
        occluded = False
        for j in range(i + 1, len(boxes)):
            other = boxes[j]
            iw = min(box[2], other[2]) - max(box[0], other[0])
            ih = min(box[3], other[3]) - max(box[1], other[1])
            if iw > 0 and ih > 0 and (iw * ih) / area > 0.35:
                occluded = True
                break
        gts.append(GroundTruth(*box, occluded=occluded, truncated=truncated))

    color += rng.normal(0, params.noise_level, size=color.shape)
    thermal += rng.normal(0, params.noise_level, size=thermal.shape)
    return np.clip(color, 0, 1), np.clip(thermal, 0, 1), condition, gts, vis_tags


def synth_dataset(params, out_dir):
    """Generate train and test splits on disk; deterministic given the seed.

    Returns a summary dict with per-split pedestrian visibility counts.
    """
    params.validate()
    n_test = params.n_test if params.n_test is not None else max(1, params.n_images // 5)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(params.seed)
    summary = {"out_dir": out_dir, "splits": {}}
    for split, count in (("train", params.n_images), ("test", n_test)):
        records = []
        vis_counts = {"both": 0, "color_only": 0, "thermal_only": 0}
        for i in range(count):
            image_id = f"{split}_{i:05d}"
            color, thermal, condition, gts, vis_tags = _render_image(params, rng)
            color_rel = f"images/{image_id}.ppm"
            thermal_rel = f"images/{image_id}.pgm"
            write_ppm(os.path.join(out_dir, color_rel), color)
            write_pgm(os.path.join(out_dir, thermal_rel), thermal)
            records.append(ImageRecord(image_id, color_rel, thermal_rel, condition, gts))
            for v in vis_tags:
                vis_counts[v] += 1
        save_annotations(os.path.join(out_dir, f"annotations-{split}.txt"), records)
        summary["splits"][split] = {"n_images": count, "visibility": vis_counts}

    lines = [DS_MAGIC, f"seed {params.seed}",
             f"image_h {params.image_h}", f"image_w {params.image_w}",
             "visibility_mix " + ",".join(repr(float(p)) for p in params.visibility_mix),
             f"split train annotations-train.txt {params.n_images}",
             f"split test annotations-test.txt {n_test}"]
    atomic_write_text(os.path.join(out_dir, "manifest.txt"), "\n".join(lines) + "\n")
    return summary


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def save_annotations(path, records):
    lines = [ANN_MAGIC]
    for r in records:
        lines.append(f"image {r.image_id} {r.color_path} {r.thermal_path} {r.condition}")
        for g in r.gts:
            coords = " ".join(repr(float(v)) for v in g.box)
            lines.append(f"object {coords} {int(g.occluded)} {int(g.truncated)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_annotations(path):
    try:
        with open(path, "r", encoding="ascii") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read annotations {path}: {e}") from e
    if not lines or not lines[0].startswith("msdet-annotations"):
        raise DataFormatError(f"{path}:1: not an annotations document")
    if lines[0] != ANN_MAGIC:
        raise DataFormatError(
            f"{path}:1: unsupported version {lines[0]!r}, expected {ANN_MAGIC!r}"
        )
    records = []
    current = None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "image":
            if len(parts) != 5:
                raise DataFormatError(f"{path}:{ln}: image record needs 4 fields")
            current = ImageRecord(parts[1], parts[2], parts[3], parts[4], [])
            if current.condition not in ("day", "night"):
                raise DataFormatError(
                    f"{path}:{ln}: condition must be day or night, got {current.condition!r}"
                )
            records.append(current)
        elif parts[0] == "object":
            if current is None:
                raise DataFormatError(f"{path}:{ln}: object record before any image")
            if len(parts) != 7:
                raise DataFormatError(f"{path}:{ln}: object record needs 6 fields")
            try:
                x1, y1, x2, y2 = (float(v) for v in parts[1:5])
                occ, trunc = (int(v) for v in parts[5:7])
            except ValueError as e:
                raise DataFormatError(f"{path}:{ln}: bad object field: {e}") from e
            if x2 <= x1 or y2 <= y1:
                raise DataFormatError(
                    f"{path}:{ln}: box ({x1}, {y1}, {x2}, {y2}) has non-positive extent"
                )
            if occ not in (0, 1) or trunc not in (0, 1):
                raise DataFormatError(f"{path}:{ln}: flags must be 0 or 1")
            current.gts.append(GroundTruth(x1, y1, x2, y2, bool(occ), bool(trunc)))
        else:
            raise DataFormatError(f"{path}:{ln}: unknown record type {parts[0]!r}")
    return records


def load_dataset(data_dir, split):
    """Load a split into memory as DatasetSample objects."""
    path = os.path.join(data_dir, f"annotations-{split}.txt")
    samples = []
    for r in load_annotations(path):
        color = read_ppm(os.path.join(data_dir, r.color_path))[None]
        thermal = read_pgm(os.path.join(data_dir, r.thermal_path))[None, None]
        pair = ImagePair(color, thermal, r.image_id, r.condition)
        samples.append(DatasetSample(pair, r.gts))
    return samples


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

def save_detections(path, dets_by_image):
    """CSV, one line per detection, scores with 6 decimals."""
    lines = [DET_HEADER]
    for image_id in sorted(dets_by_image):
        for d in dets_by_image[image_id]:
            coords = ",".join(repr(float(v)) for v in d.box)
            lines.append(f"{image_id},{coords},{d.score:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_detections(path):
    try:
        with open(path, "r", encoding="ascii") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read detections {path}: {e}") from e
    if not lines or lines[0] != DET_HEADER:
        raise DataFormatError(f"{path}:1: expected header {DET_HEADER!r}")
    out = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"{path}:{ln}: expected 6 comma-separated fields")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as e:
            raise DataFormatError(f"{path}:{ln}: bad numeric field: {e}") from e
        out.setdefault(parts[0], []).append(Detection(*vals))
    return out


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------

def atomic_write_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, data):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
