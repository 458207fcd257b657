"""Semi-supervised two-room Wi-Fi presence detection from CSI amplitudes.

The package covers the full loop: synthetic CSI generation with controlled
environment drift (csi_sim), windowing and positional embedding (preprocess),
entropy-based prior indicators (indicator), the four encoder networks plus
shared projector (nets, layers), the coupled loss families (losses), the
bi-level teacher-student trainer with drift monitoring (trainer), baseline
comparisons (bench), and the ``btsctl`` command line front end (cli).
"""
from .csi_sim import (CsiDataset, ChannelScenario, DataFormatError, base_scenario,
                      derive_round, generate_round, read_dataset, simulate_round,
                      write_dataset)
from .indicator import (DisarrayParams, IndicatorSet, build_indicators,
                        confidence_distribution, disarray, indicator_classify)
from .losses import FeedbackSignal, LossWeights
from .nets import BundleConfig, ModelBundle, load_bundle, save_bundle
from .preprocess import Frame, FrameStore, build_store, pairwise_normalize, window
from .trainer import (DriftReport, IterRecord, TrainConfig, TrainingDivergedError,
                      evaluate, monitor_drift, predict, retrain, train)

__version__ = "0.1.0"

__all__ = [
    "BundleConfig", "ChannelScenario", "CsiDataset", "DataFormatError",
    "DisarrayParams", "DriftReport", "FeedbackSignal", "Frame", "FrameStore",
    "IndicatorSet", "IterRecord", "LossWeights", "ModelBundle", "TrainConfig",
    "TrainingDivergedError", "base_scenario", "build_indicators", "build_store",
    "confidence_distribution", "derive_round", "disarray", "evaluate",
    "generate_round", "indicator_classify", "load_bundle", "monitor_drift",
    "pairwise_normalize", "predict", "read_dataset", "retrain", "save_bundle",
    "simulate_round", "train", "window", "write_dataset", "__version__",
]
