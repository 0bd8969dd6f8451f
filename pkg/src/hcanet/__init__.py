"""HCA-Net: hierarchical context attention for intervertebral disc labeling."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    HcaNetError,
    IngestionError,
    InputError,
    NumericError,
    TrainingDivergedError,
)
from .evaluator import MetricsReport, SampleScore, aggregate, score_sample
from .heatmap_codec import (
    HeatmapStack,
    KeypointSet,
    ProbabilityMap,
    decode_peaks,
    encode_heatmaps,
    softmax_probability,
)
from .losses import (
    LossConfig,
    Prototype,
    mse_loss,
    pairwise_distance_loss,
    prototype_from_map,
    skeleton_loss,
    total_loss,
)
from .mlka import LkaScaleSpec, MlkaConfig, MultiScaleLka, default_scales
from .network import DOWNSAMPLE, HCANet, ModelConfig, NetworkOutput, build_model, infer_sample
from .spine_data import (
    SpineSample,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_volume_as_sample,
    prepare_batch,
    save_dataset,
    split_train_val,
)
from .trainer import TrainConfig, TrainReport, parse_config_file, resume, train

__version__ = "0.1.0"
