"""Routed dynamic pooling of the visual grid inside the decoder stack.

At each configured layer the routing token's current hidden state feeds a
small per-layer MLP whose softmax scores the pooling experts. The top-scoring
expert's max-pool kernel is applied to the visual grid, the pooled tokens are
scaled by that expert's probability (the gradient path into the router), and
the sequence is reassembled with text, routing, and answer segments
untouched. Compression happens at the input of the configured layer, so that
layer's attention and FFN already run on the shortened sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, StateError
from .layout import (FrozenDecision, PyramidConfig, RouterDecision,
                     SequenceLayout, freeze_routing)
from .model import DpnModel, KvCache, causal_mask
from .tensor import Tensor, concat, maxpool_grid, rmsnorm, silu, softmax


def route(model: DpnModel, r_state: Tensor, router_index: int) -> Tensor:
    """Expert probabilities from the routing token's hidden state (d,)."""
    p = f"routers.{router_index}."
    hidden = silu(r_state.reshape(1, -1) @ model.params[p + "w1"] + model.params[p + "b1"].reshape(1, -1))
    logits = hidden @ model.params[p + "w2"] + model.params[p + "b2"].reshape(1, -1)
    return softmax(logits.reshape(-1), axis=-1)


def dpe_forward(grid: Tensor, probs: Tensor, experts, layer_index: int,
                frozen: FrozenDecision | None = None) -> tuple[Tensor, RouterDecision]:
    """Pool an (h, w, d) grid with the probability-maximal expert.

    The pooled grid is scaled by the selected probability. Ties go to the
    lowest expert index. A frozen decision replays a recorded selection and
    scale instead of consulting `probs`.
    """
    h, w, _ = grid.shape
    if frozen is not None:
        selected = frozen.selected
        scale_t = Tensor(frozen.scale)
        scale_val = frozen.scale
    else:
        selected = int(np.argmax(probs.data))  # np.argmax: first max wins ties
        scale_t = probs.slice_axis(0, selected, selected + 1).reshape(())
        scale_val = float(probs.data[selected])
    expert = experts[selected]
    pooled = maxpool_grid(grid, expert.kernel) * scale_t
    decision = RouterDecision(
        layer_index=layer_index,
        probs=probs,
        selected=selected,
        scale=scale_val,
        grid_before=(h, w),
        grid_after=expert.pooled_shape(h, w),
    )
    return pooled, decision


def rebuild_sequence(pooled: Tensor, layout: SequenceLayout, hidden: Tensor) -> tuple[Tensor, SequenceLayout]:
    """Splice a pooled visual grid back in front of the untouched segments."""
    layout.check_matches(hidden.shape[0])
    h2, w2, d = pooled.shape
    new_layout = layout.with_grid(h2, w2)
    visual = pooled.reshape(h2 * w2, d)
    if layout.total_len == layout.visual_len:
        raise LayoutError("sequence has no non-visual segments")
    rest = hidden.slice_axis(0, layout.text_offset, layout.total_len)
    return concat([visual, rest], axis=0), new_layout


@dataclass
class DpnOutput:
    logits: Tensor
    decisions: list[RouterDecision]
    layout: SequenceLayout  # layout after all pooling stages


def dpn_forward(model: DpnModel, z: Tensor, layout: SequenceLayout,
                frozen: tuple[FrozenDecision, ...] | None = None,
                cache: KvCache | None = None) -> DpnOutput:
    """Full stacked forward with pooling at the configured layers.

    The causal mask is rebuilt whenever pooling shortens the sequence. With
    `frozen`, recorded decisions are replayed as constants and the routers
    are not consulted.
    """
    layout.check_matches(z.shape[0])
    pyramid = model.pyramid
    if frozen is not None and len(frozen) != len(pyramid.dpe_layers):
        raise StateError(
            f"frozen plan has {len(frozen)} decisions for {len(pyramid.dpe_layers)} pooling layers")
    decisions: list[RouterDecision] = []
    mask = causal_mask(layout.total_len)
    for i in range(model.dims.n_layers):
        if i in pyramid.dpe_layers:
            j = pyramid.dpe_layers.index(i)
            if frozen is not None:
                if frozen[j].layer_index != i:
                    raise StateError(f"frozen decision {j} is for layer {frozen[j].layer_index}, not {i}")
                probs = Tensor(np.full(len(pyramid.experts), np.nan))
                pooled, decision = dpe_forward(_grid_view(z, layout), probs,
                                               pyramid.experts, i, frozen=frozen[j])
            else:
                r_state = z.slice_axis(0, layout.routing_offset, layout.routing_offset + 1)
                probs = route(model, r_state, j)
                pooled, decision = dpe_forward(_grid_view(z, layout), probs, pyramid.experts, i)
            z, layout = rebuild_sequence(pooled, layout, z)
            decisions.append(decision)
            mask = causal_mask(layout.total_len)
        z = model.transformer_layer(z, i, mask, cache)
    return DpnOutput(model.lm_logits(z), decisions, layout)


def _grid_view(z: Tensor, layout: SequenceLayout) -> Tensor:
    visual = z.slice_axis(0, 0, layout.visual_len)
    return visual.reshape(layout.grid_h, layout.grid_w, z.shape[1])


@dataclass
class PrefillState:
    cache: KvCache
    decisions: list[RouterDecision]
    layout: SequenceLayout          # compressed layout after prefill
    input_len: int                  # original (pre-pooling) prompt length
    last_logits: np.ndarray

    def plan(self) -> tuple[FrozenDecision, ...]:
        return freeze_routing(self.decisions)


def prefill(model: DpnModel, z: Tensor, layout: SequenceLayout) -> PrefillState:
    """Run the prompt once, filling per-layer caches and recording routing."""
    cache = KvCache(model.dims.n_layers)
    out = dpn_forward(model, z, layout, cache=cache)
    last = out.logits.data[-1].copy()
    return PrefillState(cache, out.decisions, out.layout, layout.total_len, last)


def decode_step(model: DpnModel, state: PrefillState, token_id: int, step: int) -> np.ndarray:
    """Append one token and return its logits, reusing compressed caches."""
    z = model.embed_new_token(token_id, state.input_len + step)
    for i in range(model.dims.n_layers):
        z = model.transformer_layer(z, i, None, state.cache)
    return model.lm_logits(z).data[0]


def decode_greedy(model: DpnModel, state: PrefillState, max_new: int) -> list[int]:
    """Greedy decode from a prefilled state; routing decisions stay frozen
    and new tokens are never pooled."""
    state.plan()  # freezing must follow a completed prefill
    out: list[int] = []
    logits = state.last_logits
    for step in range(max_new):
        token = int(np.argmax(logits))
        out.append(token)
        if step + 1 < max_new:
            logits = decode_step(model, state, token, step)
    return out


def generate(model: DpnModel, z: Tensor, layout: SequenceLayout, max_new: int) -> list[int]:
    return decode_greedy(model, prefill(model, z, layout), max_new)


def generate_full_recompute(model: DpnModel, z_builder, max_new: int) -> list[int]:
    """Decode oracle: re-run the whole forward for every new token.

    `z_builder(extra_ids)` must return the embedded prompt plus the given
    answer tokens and its layout. Routing decisions are frozen from the
    bare-prompt pass and replayed on every recompute.
    """
    z0, layout0 = z_builder([])
    plan = freeze_routing(dpn_forward(model, z0, layout0).decisions)
    out: list[int] = []
    for _ in range(max_new):
        z, layout = z_builder(out)
        result = dpn_forward(model, z, layout, frozen=plan)
        out.append(int(np.argmax(result.logits.data[-1])))
    return out
