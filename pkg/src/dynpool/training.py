"""Single-process training loop with per-step metric emission.

The optimizer is RMSProp (momentum-free adaptive step), fixed here and
recorded in the config; runs are bit-deterministic for a given config.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .dpe import dpn_forward
from .errors import NonFiniteLossError
from .evaluate import evaluate_model
from .layout import PyramidConfig
from .losses import LossReport, autoregressive_loss, make_report, routing_loss, total_loss
from .model import DpnModel
from .tensor import Tensor
from . import tasks


class RmsProp:
    """p -= lr * g / (sqrt(v) + eps), v an EMA of squared gradients."""

    def __init__(self, params: dict[str, Tensor], lr: float, decay: float, eps: float):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.v[name]
            v *= self.decay
            v += (1.0 - self.decay) * p.grad * p.grad
            p.data -= self.lr * p.grad / (np.sqrt(v) + self.eps)


def compute_step(model: DpnModel, batch) -> tuple[Tensor, LossReport]:
    """Batch loss graph: mean answer loss plus the weighted routing hinge."""
    pyramid: PyramidConfig = model.pyramid
    answer_losses = []
    decisions = []
    for sample in batch:
        z, layout = model.embed_sequence(sample.grid, sample.prompt, sample.answer)
        out = dpn_forward(model, z, layout)
        answer_losses.append(autoregressive_loss(out.logits, out.layout, sample.answer))
        decisions.extend(out.decisions)
    answer_loss = answer_losses[0]
    for extra in answer_losses[1:]:
        answer_loss = answer_loss + extra
    answer_loss = answer_loss / len(answer_losses)
    if decisions:
        route_loss = routing_loss(decisions, pyramid.rates, pyramid.target_rate)
    else:
        route_loss = Tensor(0.0)
    total = total_loss(answer_loss, route_loss, pyramid.routing_weight)
    return total, make_report(answer_loss, route_loss, total, decisions, pyramid.rates)


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    final_eval: dict | None


def train(config: ExperimentConfig, out_dir: str | None = None) -> TrainResult:
    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    config.save(os.path.join(out_dir, "config.json"))

    model = DpnModel(config.model, config.pyramid, seed=config.train.seed)
    opt = RmsProp(model.params, config.train.lr, config.train.rms_decay, config.train.rms_eps)
    stream = tasks.sample_stream(config.train.seed, config.task.grid_h,
                                 config.task.grid_w, config.task.fine_fraction)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(out_dir, "model.npz")
    final_eval = None

    with open(metrics_path, "w") as metrics:
        for step in range(config.train.steps):
            batch = [next(stream) for _ in range(config.train.batch_size)]
            model.zero_grads()
            total, report = compute_step(model, batch)
            if not all(map(math.isfinite, (report.total, report.answer_loss, report.routing_loss))):
                _dump_abort(out_dir, step, report, batch)
                raise NonFiniteLossError(f"non-finite loss at step {step}: {report}")
            total.backward()
            opt.step()
            rec = {"kind": "step", "step": step}
            rec.update(report.to_record())
            metrics.write(json.dumps(rec) + "\n")
            if config.train.eval_every and (step + 1) % config.train.eval_every == 0:
                final_eval = _run_eval(model, config, step, metrics)
        if config.train.steps == 0 or final_eval is None or \
                final_eval["step"] != config.train.steps - 1:
            final_eval = _run_eval(model, config, config.train.steps - 1, metrics)

    model.save(checkpoint_path)
    return TrainResult(checkpoint_path, metrics_path, final_eval)


def _run_eval(model, config, step, metrics_fh) -> dict:
    samples = tasks.eval_set(config.train.seed, config.task.grid_h,
                             config.task.grid_w, config.train.eval_samples)
    result = evaluate_model(model, samples)
    rec = {"kind": "eval", "step": step}
    rec.update(result.summary())
    metrics_fh.write(json.dumps(rec) + "\n")
    metrics_fh.flush()
    return rec


def _dump_abort(out_dir, step, report, batch):
    path = os.path.join(out_dir, "abort.json")
    with open(path, "w") as fh:
        json.dump({
            "step": step,
            "report": report.to_record(),
            "batch_seeds": [s.seed for s in batch],
            "batch_tags": [s.tag for s in batch],
        }, fh, indent=2)
