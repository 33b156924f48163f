"""Causal transformer with dynamically routed pooling of grid tokens."""

from .config import ExperimentConfig, TaskSettings, TrainSettings, toy_config
from .dpe import (DpnOutput, decode_greedy, dpe_forward, dpn_forward, generate,
                  generate_full_recompute, prefill, rebuild_sequence, route)
from .evaluate import EvalResult, RoutingStats, evaluate_model
from .flops import FlopsMeter, FlopsReport, layer_flops, schedule_flops
from .layout import (FrozenDecision, PoolingExpert, PyramidConfig, RouterDecision,
                     SequenceLayout, default_experts, freeze_routing)
from .losses import LossReport, autoregressive_loss, routing_loss, total_loss
from .model import DpnModel, KvCache, ModelDims, causal_mask
from .tensor import Tensor, concat, cross_entropy, embedding_lookup, maxpool_grid, \
    relu, rmsnorm, silu, softmax
from .training import RmsProp, compute_step, train

__version__ = "0.1.0"

__all__ = [
    "DpnModel", "DpnOutput", "EvalResult", "ExperimentConfig", "FlopsMeter",
    "FlopsReport", "FrozenDecision", "KvCache", "LossReport", "ModelDims",
    "PoolingExpert", "PyramidConfig", "RmsProp", "RouterDecision", "RoutingStats",
    "SequenceLayout", "TaskSettings", "Tensor", "TrainSettings",
    "autoregressive_loss", "causal_mask", "compute_step", "concat",
    "cross_entropy", "decode_greedy", "default_experts", "dpe_forward",
    "dpn_forward", "embedding_lookup", "evaluate_model", "freeze_routing",
    "generate", "generate_full_recompute", "layer_flops", "maxpool_grid",
    "prefill", "rebuild_sequence", "relu", "rmsnorm", "route", "routing_loss",
    "schedule_flops", "silu", "softmax", "total_loss", "toy_config", "train",
]
