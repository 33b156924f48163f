"""Answer-token cross-entropy, the hinge routing loss, and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .layout import SequenceLayout
from .tensor import Tensor, concat, cross_entropy, relu


@dataclass(frozen=True)
class LossReport:
    answer_loss: float
    routing_loss: float
    total: float
    mean_expected_compression: float

    def to_record(self) -> dict:
        return {
            "loss_answer": self.answer_loss,
            "loss_routing": self.routing_loss,
            "loss_total": self.total,
            "mean_expected_compression": self.mean_expected_compression,
        }


def autoregressive_loss(logits: Tensor, layout: SequenceLayout, targets) -> Tensor:
    """Mean cross-entropy over the answer segment only.

    Each answer token is predicted from the position before it, so the rows
    scored run from the routing token through the next-to-last answer token.
    `layout` must be the post-pooling layout that produced `logits`.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if layout.answer_len == 0:
        raise ContractError("autoregressive loss over an empty answer segment")
    if targets.shape != (layout.answer_len,):
        raise ContractError(
            f"got {targets.shape} targets for an answer segment of {layout.answer_len}")
    rows = logits.slice_axis(0, layout.answer_offset - 1, layout.answer_offset + layout.answer_len - 1)
    return cross_entropy(rows, targets)


def expected_compression(decision, rates: np.ndarray) -> Tensor:
    """Probability-weighted compression rate of one routing decision."""
    return (decision.probs * Tensor(rates)).sum()


def routing_loss(decisions, rates, target: float) -> Tensor:
    """Hinge pressure toward the target compression rate.

    The mean probability-weighted compression over all decisions in the
    batch is pushed up to `target`; above it the loss and its gradient are
    exactly zero.
    """
    decisions = list(decisions)
    if not decisions:
        raise ContractError("routing loss needs at least one decision")
    rates = np.asarray(rates, dtype=np.float64)
    terms = [expected_compression(d, rates).reshape(1) for d in decisions]
    mean_ec = concat(terms, axis=0).mean()
    return relu(Tensor(target) - mean_ec)


def total_loss(answer_loss: Tensor, route_loss: Tensor, weight: float) -> Tensor:
    if weight < 0:
        raise ContractError("loss weight must be non-negative")
    return answer_loss + route_loss * weight


def make_report(answer_loss: Tensor, route_loss: Tensor, total: Tensor, decisions, rates) -> LossReport:
    rates = np.asarray(rates, dtype=np.float64)
    ecs = [float(d.probs_array @ rates) for d in decisions]
    mec = float(np.mean(ecs)) if ecs else 1.0
    return LossReport(
        answer_loss=answer_loss.item(),
        routing_loss=route_loss.item(),
        total=total.item(),
        mean_expected_compression=mec,
    )
