"""msdet: CPU multispectral (color + thermal) pedestrian detection toolkit."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    TrainingDivergedError,
)
from .model import DetectorConfig, build_detector, load_model, save_model
from .pipeline import (
    Detection,
    Proposal,
    TrainSchedule,
    detect,
    detection_head_forward,
    nms,
    rpn_forward,
    score_fuse,
    train,
)
from .evaluation import (
    GroundTruth,
    filter_reasonable,
    log_avg_miss_rate,
    match_detections,
    mr_fppi_curve,
    proposal_recall,
)
from .complementarity import ComplementarityTable, oracle_bound, partition
from .data import ImagePair, SynthParams, load_dataset, synth_dataset
