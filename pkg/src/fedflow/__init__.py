"""Deterministic federated-learning simulator for encrypted-traffic service
classification under diurnal traffic volatility.

The package generates synthetic QUIC-like flow corpora, extracts fixed-width
per-flow feature vectors, and trains a small feed-forward classifier either
centrally or across simulated clients with several aggregation rules.  Client
ingestion is pluggable: flows can be consumed round-by-round as they arrive,
or accumulated in bounded FIFO buffers that decouple training-set size from
the diurnal arrival rate.
"""

__version__ = "0.1.0"

from .flows import FlowRecord, PacketMeta, ServiceLabel, load_flows, write_flows
from .synth import GenConfig, generate
from .features import FeatureSchema, build_schema, extract, fit_scaler
from .nn import ModelParams, TrainConfig, init_params, train_local, predict
from .fed import FedConfig, run_experiment
from .metrics import confusion_matrix, macro_f1, stability, permutation_importance
from .config import ExperimentConfig, load_config

__all__ = [
    "FlowRecord",
    "PacketMeta",
    "ServiceLabel",
    "load_flows",
    "write_flows",
    "GenConfig",
    "generate",
    "FeatureSchema",
    "build_schema",
    "extract",
    "fit_scaler",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "train_local",
    "predict",
    "FedConfig",
    "run_experiment",
    "confusion_matrix",
    "macro_f1",
    "stability",
    "permutation_importance",
    "ExperimentConfig",
    "load_config",
]
