"""Greedy-decode evaluation, routing traces, and routing statistics."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .dpe import decode_greedy, prefill
from .flops import FlopsReport, schedule_flops
from .model import DpnModel


def trace_record(sample, decision) -> dict:
    probs = decision.probs_array
    return {
        "sample_seed": sample.seed,
        "tag": sample.tag,
        "layer": decision.layer_index,
        "probs": [float(p) for p in probs],
        "selected": decision.selected,
        "scale": float(decision.scale),
        "grid_before": list(decision.grid_before),
        "grid_after": list(decision.grid_after),
    }


@dataclass
class RoutingStats:
    """Selection counts per (tag, layer, expert) plus per-tag pattern counts."""

    counts: dict = field(default_factory=dict)
    patterns: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records) -> "RoutingStats":
        stats = cls()
        per_sample: dict[tuple, dict[int, int]] = {}
        for rec in records:
            key = (rec["tag"], rec["layer"], rec["selected"])
            stats.counts[key] = stats.counts.get(key, 0) + 1
            per_sample.setdefault((rec["tag"], rec["sample_seed"]), {})[rec["layer"]] = rec["selected"]
        for (tag, _seed), chosen in per_sample.items():
            pattern = tuple(chosen[k] for k in sorted(chosen))
            stats.patterns.setdefault(tag, Counter())[pattern] += 1
        return stats

    def frequencies(self, tag: str, layer: int) -> dict[int, float]:
        total = sum(c for (t, l, _e), c in self.counts.items() if t == tag and l == layer)
        return {e: c / total for (t, l, e), c in self.counts.items()
                if t == tag and l == layer}

    def pattern_count(self, tag: str | None = None) -> int:
        if tag is not None:
            return len(self.patterns.get(tag, ()))
        distinct = set()
        for counter in self.patterns.values():
            distinct.update(counter)
        return len(distinct)


@dataclass
class EvalResult:
    n_samples: int
    correct: int
    per_tag_correct: dict
    per_tag_total: dict
    per_tag_compression: dict      # mean probability-weighted compression
    mean_flops: float
    mean_ratio: float
    stats: RoutingStats
    trace: list

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_samples

    def tag_accuracy(self, tag: str) -> float:
        return self.per_tag_correct.get(tag, 0) / max(self.per_tag_total.get(tag, 0), 1)

    def summary(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "mean_flops": self.mean_flops,
            "mean_flops_ratio": self.mean_ratio,
            "routing_patterns": self.stats.pattern_count(),
        }
        for tag in sorted(self.per_tag_total):
            out[f"accuracy_{tag}"] = self.tag_accuracy(tag)
            out[f"compression_{tag}"] = self.per_tag_compression.get(tag, 1.0)
        return out


def evaluate_model(model: DpnModel, samples) -> EvalResult:
    """Exact-match greedy decoding plus routing and cost aggregation.

    Per-sample cost is the prompt-prefill schedule under that sample's
    recorded decisions; the baseline is the same prompt with no pooling.
    """
    dims = model.dims
    rates = model.pyramid.rates
    correct = 0
    per_tag_correct: dict[str, int] = {}
    per_tag_total: dict[str, int] = {}
    ec_sums: dict[str, float] = {}
    ec_counts: dict[str, int] = {}
    trace: list[dict] = []
    flops_total = 0
    ratio_total = 0.0

    for sample in samples:
        z, layout = model.embed_sequence(sample.grid, sample.prompt, [])
        state = prefill(model, z, layout)
        decoded = decode_greedy(model, state, max_new=len(sample.answer))
        ok = tuple(decoded) == tuple(sample.answer)
        correct += ok
        per_tag_total[sample.tag] = per_tag_total.get(sample.tag, 0) + 1
        per_tag_correct[sample.tag] = per_tag_correct.get(sample.tag, 0) + ok

        report: FlopsReport = schedule_flops(
            dims.n_layers, dims.d, dims.m, layout,
            dpe_layers=model.pyramid.dpe_layers,
            decisions=state.decisions,
            experts=model.pyramid.experts,
        )
        flops_total += report.total
        ratio_total += report.ratio
        for d in state.decisions:
            trace.append(trace_record(sample, d))
            ec_sums[sample.tag] = ec_sums.get(sample.tag, 0.0) + float(d.probs_array @ rates)
            ec_counts[sample.tag] = ec_counts.get(sample.tag, 0) + 1

    n = len(samples)
    per_tag_compression = {tag: ec_sums[tag] / ec_counts[tag] for tag in ec_sums}
    return EvalResult(
        n_samples=n,
        correct=correct,
        per_tag_correct=per_tag_correct,
        per_tag_total=per_tag_total,
        per_tag_compression=per_tag_compression,
        mean_flops=flops_total / n,
        mean_ratio=ratio_total / n,
        stats=RoutingStats.from_records(trace),
        trace=trace,
    )


def write_trace(records, fh):
    for rec in records:
        fh.write(json.dumps(rec) + "\n")


def read_trace(fh) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]
