"""Latency-aware collaborative perception on a synthetic bird's-eye-view world.

Built on a small reverse-mode autodiff core over numpy. Agents encode their
own observations and exchange feature maps over delayed links. The receiver
estimates each sender's current feature and attention from stale history,
blends the estimate with the stale map under latency-conditioned gates, fuses
contributors with per-cell attention and decodes boxes.
"""
from .channel import HistoryBuffer, LatencyModel, WarmupError, sample_latency, transmit
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import average_precision, iou, kalman_predict_update, late_fuse_baseline, run_benchmark
from .perception import CollabModel, ModelConfig, SingleAgentModel
from .pipeline import collaborative_forward
from .syncnet import CompensationConfig, SyncNet
from .tensor import Tensor, no_grad
from .world import BoxSet, Scenario, WorldConfig, generate_scenario, observe

__version__ = "0.1.0"
