"""Analytic per-layer cost model and the instrumented multiply-add meter.

Accounting convention: only attention and FFN matmuls count (projections,
score and value products, and the two FFN matmuls), so one layer over n
tokens costs exactly 4nd^2 + 2n^2d + 2ndm. Norms, softmax, the router, the
LM head, and pooling are excluded on both the analytic and measured sides,
which makes analytic == measured an exact integer test.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError, StateError
from .layout import PoolingExpert, SequenceLayout
from .tensor import TALLY


def layer_flops(n: int, d: int, m: int) -> int:
    """Multiply-adds of one decoder layer over n tokens."""
    if n < 0 or d < 1 or m < 1:
        raise ContractError(f"invalid extents n={n}, d={d}, m={m}")
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


@dataclass(frozen=True)
class LayerCost:
    layer_index: int
    n_tokens: int
    flops: int


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[LayerCost, ...]
    total: int
    baseline_total: int

    @property
    def ratio(self) -> float:
        return self.total / self.baseline_total

    def lines(self) -> list[str]:
        out = [f"{'layer':>5}  {'tokens':>7}  {'flops':>16}"]
        for lc in self.per_layer:
            out.append(f"{lc.layer_index:>5}  {lc.n_tokens:>7}  {lc.flops:>16}")
        out.append(f"total    {self.total}")
        out.append(f"baseline {self.baseline_total}")
        out.append(f"ratio    {self.ratio:.6f}")
        return out

    def to_record(self) -> dict:
        return {
            "per_layer": [[lc.layer_index, lc.n_tokens, lc.flops] for lc in self.per_layer],
            "total": self.total,
            "baseline_total": self.baseline_total,
            "ratio": self.ratio,
        }


def _normalize_kernels(dpe_layers, decisions, experts) -> list[tuple[int, tuple[int, int]]]:
    if len(decisions) != len(dpe_layers):
        raise ContractError(
            f"{len(decisions)} decisions for {len(dpe_layers)} pooling layers")
    out = []
    for layer, dec in zip(dpe_layers, decisions):
        if isinstance(dec, PoolingExpert):
            kernel = dec.kernel
        elif isinstance(dec, tuple) and len(dec) == 2:
            kernel = (int(dec[0]), int(dec[1]))
        else:
            idx = getattr(dec, "selected", None)
            layer_idx = getattr(dec, "layer_index", None)
            if idx is None:
                raise ContractError(f"cannot interpret decision {dec!r}")
            if layer_idx is not None and layer_idx != layer:
                raise ContractError(
                    f"decision for layer {layer_idx} paired with pooling layer {layer}")
            kernel = experts[idx].kernel
        out.append((layer, kernel))
    return out


def schedule_flops(n_layers: int, d: int, m: int, layout: SequenceLayout,
                   dpe_layers=(), decisions=(), experts=()) -> FlopsReport:
    """Per-layer costs for a pooling schedule versus an uncompressed stack.

    `decisions` may be recorded routing decisions, experts, or raw (kh, kw)
    kernels, one per pooling layer; pooling applies at the input of its
    layer. The baseline runs every layer at the uncompressed token count.
    """
    plan = dict(_normalize_kernels(tuple(dpe_layers), list(decisions), tuple(experts)))
    if any(i < 0 or i >= n_layers for i in plan):
        raise ContractError("pooling layer index outside the stack")
    grid = (layout.grid_h, layout.grid_w)
    fixed = layout.text_len + 1 + layout.answer_len
    per_layer = []
    total = 0
    for i in range(n_layers):
        if i in plan:
            kh, kw = plan[i]
            grid = (-(-grid[0] // kh), -(-grid[1] // kw))
        n_i = grid[0] * grid[1] + fixed
        cost = layer_flops(n_i, d, m)
        per_layer.append(LayerCost(i, n_i, cost))
        total += cost
    baseline = n_layers * layer_flops(layout.total_len, d, m)
    return FlopsReport(tuple(per_layer), total, baseline)


class FlopsMeter:
    """Counts in-scope matmul multiply-adds between __enter__ and __exit__."""

    def __init__(self):
        self._total: int | None = None

    def __enter__(self):
        TALLY.begin()
        return self

    def __exit__(self, exc_type, exc, tb):
        self._total = TALLY.end()
        return False

    @property
    def total(self) -> int:
        if self._total is None:
            raise StateError("flops meter was never run")
        return self._total
