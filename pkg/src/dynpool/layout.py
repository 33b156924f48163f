"""Sequence layout bookkeeping and pyramid routing configuration.

A sequence is always ordered visual grid, text prompt, one routing token,
answer tokens. The layout is the single source of truth for segment offsets,
masking extents, pooling scope, and loss scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LayoutError
from .kernels import ceil_div


@dataclass(frozen=True)
class SequenceLayout:
    grid_h: int
    grid_w: int
    text_len: int
    answer_len: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise LayoutError(f"grid extents must be positive, got {self.grid_h}x{self.grid_w}")
        if self.text_len < 0 or self.answer_len < 0:
            raise LayoutError("segment lengths must be non-negative")

    @property
    def visual_len(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def visual_offset(self) -> int:
        return 0

    @property
    def text_offset(self) -> int:
        return self.visual_len

    @property
    def routing_offset(self) -> int:
        return self.visual_len + self.text_len

    @property
    def answer_offset(self) -> int:
        return self.routing_offset + 1

    @property
    def total_len(self) -> int:
        return self.visual_len + self.text_len + 1 + self.answer_len

    def with_grid(self, h: int, w: int) -> "SequenceLayout":
        return SequenceLayout(h, w, self.text_len, self.answer_len)

    def check_matches(self, n_rows: int):
        if n_rows != self.total_len:
            raise LayoutError(f"layout describes {self.total_len} tokens but tensor has {n_rows}")


@dataclass(frozen=True)
class PoolingExpert:
    """One routable pooling choice: a kernel and its token-count reduction."""

    kernel: tuple[int, int]
    rate: float

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ConfigError(f"kernel extents must be positive, got {self.kernel}")
        if self.rate < 1.0:
            raise ConfigError(f"compression rate must be >= 1, got {self.rate}")
        if (self.kernel == (1, 1)) != (self.rate == 1.0):
            raise ConfigError("the 1x1 kernel and rate 1.0 must coincide")

    @property
    def is_identity(self) -> bool:
        return self.kernel == (1, 1)

    def pooled_shape(self, h: int, w: int) -> tuple[int, int]:
        return ceil_div(h, self.kernel[0]), ceil_div(w, self.kernel[1])


def default_experts() -> tuple[PoolingExpert, ...]:
    """Identity plus width-halving and quarter pooling."""
    return (
        PoolingExpert((1, 1), 1.0),
        PoolingExpert((1, 2), 2.0),
        PoolingExpert((2, 2), 4.0),
    )


@dataclass(frozen=True)
class PyramidConfig:
    """Which layers pool, with what expert set and routing-loss settings."""

    dpe_layers: tuple[int, ...] = ()
    experts: tuple[PoolingExpert, ...] = field(default_factory=default_experts)
    target_rate: float = 1.5
    routing_weight: float = 0.01

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("expert set must be non-empty")
        if list(self.dpe_layers) != sorted(set(self.dpe_layers)):
            raise ConfigError("pooling layer indices must be strictly increasing")
        if self.dpe_layers and self.dpe_layers[0] < 0:
            raise ConfigError("pooling layer indices must be non-negative")

    def validate_for(self, n_layers: int):
        if self.dpe_layers and self.dpe_layers[-1] >= n_layers:
            raise ConfigError(
                f"pooling layer index {self.dpe_layers[-1]} outside {n_layers}-layer stack")

    @property
    def rates(self) -> np.ndarray:
        return np.array([e.rate for e in self.experts], dtype=np.float64)


@dataclass
class RouterDecision:
    """One routing outcome: which expert pooled the grid at one layer.

    `probs` keeps the live probability tensor so the routing loss can
    differentiate through it; `probs_array` is the plain numpy view used for
    reporting.
    """

    layer_index: int
    probs: object  # Tensor of shape (n_experts,)
    selected: int
    scale: float
    grid_before: tuple[int, int]
    grid_after: tuple[int, int]

    @property
    def probs_array(self) -> np.ndarray:
        return np.asarray(self.probs.data if hasattr(self.probs, "data") else self.probs,
                          dtype=np.float64)


@dataclass(frozen=True)
class FrozenDecision:
    """A replayable routing outcome: expert index plus the applied scale."""

    layer_index: int
    selected: int
    scale: float


def freeze_routing(decisions) -> tuple[FrozenDecision, ...]:
    """Turn recorded decisions into a decode plan of constants."""
    from .errors import StateError

    if decisions is None:
        raise StateError("freeze_routing before prefill: no decisions recorded")
    return tuple(
        FrozenDecision(d.layer_index, d.selected, float(d.scale)) for d in decisions
    )
