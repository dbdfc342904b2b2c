"""CAN bus intrusion detection with a CNN / BiGRU / attention classifier."""

from .ingest import CanRecord, ClassLabel, SynthConfig, deduplicate, parse_csv, select_features, synthesize
from .model import CANGuardModel, ModelConfig, build, load, predict, save
from .preprocess import WindowConfig, WindowedDataset, make_windows, prepare
from .training import MetricsReport, TrainConfig, evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "CanRecord", "ClassLabel", "SynthConfig", "deduplicate", "parse_csv", "select_features", "synthesize",
    "CANGuardModel", "ModelConfig", "build", "load", "predict", "save",
    "WindowConfig", "WindowedDataset", "make_windows", "prepare",
    "MetricsReport", "TrainConfig", "evaluate", "run_ablation", "train",
]
