"""Causal decoder stack: embeddings, multi-head attention, FFN, norms, LM head.

Pre-norm residual blocks with RMS normalization and a non-gated SiLU FFN, so
one layer costs exactly 4nd^2 + 2n^2d + 2ndm multiply-adds in matmuls (four
d-by-d projections, score and value products, and two d-by-m FFN matmuls).
Linear layers carry no biases. Positions are learned absolute embeddings
added once at the input layer.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError, StateError
from .layout import PoolingExpert, PyramidConfig, SequenceLayout
from .tensor import (Tensor, concat, counting_scope, embedding_lookup, mha_attend,
                     rmsnorm, silu)

CHECKPOINT_FORMAT_VERSION = 1
NEG_INF = -1e30  # additive mask value; finite to keep grads clean


@dataclass(frozen=True)
class ModelDims:
    n_layers: int
    d: int
    n_heads: int
    m: int
    vocab: int
    max_grid: tuple[int, int]
    max_seq: int
    n_pixel_codes: int = 8

    def __post_init__(self):
        for name in ("n_layers", "d", "n_heads", "m", "vocab", "max_seq", "n_pixel_codes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.n_heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.n_heads} heads")
        if self.max_grid[0] < 1 or self.max_grid[1] < 1:
            raise ConfigError("max_grid extents must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@lru_cache(maxsize=64)
def causal_mask(n: int) -> np.ndarray:
    """Additive lower-triangular mask: 0 on and below the diagonal."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = NEG_INF
    return m


class KvCache:
    """Per-layer key/value rows accumulated during prefill and decode."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    def set_layer(self, i: int, k: np.ndarray, v: np.ndarray):
        self.keys[i] = k.copy()
        self.values[i] = v.copy()

    def append(self, i: int, k_row: np.ndarray, v_row: np.ndarray):
        if self.keys[i] is None:
            raise StateError("appending to a cache layer before prefill")
        self.keys[i] = np.concatenate([self.keys[i], k_row], axis=0)
        self.values[i] = np.concatenate([self.values[i], v_row], axis=0)

    def length(self, i: int) -> int:
        if self.keys[i] is None:
            raise StateError("cache layer not filled")
        return self.keys[i].shape[0]


class DpnModel:
    """Parameter store plus the forward primitives that consume it."""

    def __init__(self, dims: ModelDims, pyramid: PyramidConfig, seed: int = 0):
        pyramid.validate_for(dims.n_layers)
        self.dims = dims
        self.pyramid = pyramid
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_params(self, rng: np.random.Generator):
        dm = self.dims
        std = 0.02

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        self._add("tok_emb", normal(dm.vocab, dm.d))
        self._add("pos_emb", normal(dm.max_seq, dm.d))
        self._add("patch_proj", normal(dm.n_pixel_codes, dm.d))
        self._add("routing_emb", normal(1, dm.d))
        for i in range(dm.n_layers):
            p = f"layers.{i}."
            self._add(p + "attn_norm", np.ones(dm.d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + w, normal(dm.d, dm.d))
            self._add(p + "ffn_norm", np.ones(dm.d))
            self._add(p + "w1", normal(dm.d, dm.m))
            self._add(p + "w2", normal(dm.m, dm.d))
        self._add("final_norm", np.ones(dm.d))
        self._add("lm_head", normal(dm.d, dm.vocab))
        n_experts = len(self.pyramid.experts)
        for j in range(len(self.pyramid.dpe_layers)):
            p = f"routers.{j}."
            self._add(p + "w1", normal(dm.d, dm.d))
            self._add(p + "b1", np.zeros(dm.d))
            # zero-initialized head: the router starts exactly uniform
            self._add(p + "w2", np.zeros((dm.d, n_experts)))
            self._add(p + "b2", np.zeros(n_experts))

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    # -- embedding ----------------------------------------------------------

    def embed_sequence(self, grid_codes: np.ndarray, text_ids, answer_ids) -> tuple[Tensor, SequenceLayout]:
        """Build the input sequence: grid cells through the patch projector,
        text/answer through token embeddings, the routing token, plus
        positions. Returns the embedded (n, d) tensor and its layout."""
        grid_codes = np.asarray(grid_codes, dtype=np.int64)
        if grid_codes.ndim != 2:
            raise DimensionError("grid codes must be 2D")
        h, w = grid_codes.shape
        if h > self.dims.max_grid[0] or w > self.dims.max_grid[1]:
            raise CapacityError(f"grid {h}x{w} exceeds max {self.dims.max_grid}")
        layout = SequenceLayout(h, w, len(text_ids), len(answer_ids))
        if layout.total_len > self.dims.max_seq:
            raise CapacityError(f"sequence of {layout.total_len} exceeds max_seq {self.dims.max_seq}")

        parts = [embedding_lookup(self.params["patch_proj"], grid_codes.reshape(-1))]
        if len(text_ids):
            parts.append(embedding_lookup(self.params["tok_emb"], text_ids))
        parts.append(self.params["routing_emb"])
        if len(answer_ids):
            parts.append(embedding_lookup(self.params["tok_emb"], answer_ids))
        z = concat(parts, axis=0)
        pos = self.params["pos_emb"].slice_axis(0, 0, layout.total_len)
        return z + pos, layout

    def embed_new_token(self, token_id: int, position: int) -> Tensor:
        if position >= self.dims.max_seq:
            raise CapacityError(f"position {position} exceeds max_seq {self.dims.max_seq}")
        tok = embedding_lookup(self.params["tok_emb"], [token_id])
        pos = self.params["pos_emb"].slice_axis(0, position, position + 1)
        return tok + pos

    # -- transformer blocks ---------------------------------------------------

    def mha(self, z: Tensor, mask: np.ndarray | None, layer: int,
            cache: KvCache | None = None, need_weights: bool = False):
        """Multi-head attention over `z` (n, d).

        Without a cache this is plain masked self-attention. With a cache,
        `z` holds new rows only; keys/values are the cached rows plus the
        new ones, and every query sees every key (decode is append-only).
        """
        dm = self.dims
        n = z.shape[0]
        p = f"layers.{layer}."
        weights = [] if need_weights else None
        with counting_scope():
            q = z @ self.params[p + "wq"]
            k = z @ self.params[p + "wk"]
            v = z @ self.params[p + "wv"]
        if cache is not None:
            if cache.keys[layer] is None:
                cache.set_layer(layer, k.data, v.data)
            else:
                cache.append(layer, k.data, v.data)
            k = Tensor(cache.keys[layer])
            v = Tensor(cache.values[layer])
            if mask is not None and mask.shape != (n, k.shape[0]):
                raise StateError(
                    f"mask shape {mask.shape} does not match {n} queries x {k.shape[0]} cached keys")
        elif mask is not None and mask.shape != (n, n):
            raise StateError(f"mask shape {mask.shape} does not match sequence length {n}")

        scale = 1.0 / np.sqrt(dm.head_dim)
        with counting_scope():
            attended = mha_attend(q, k, v, dm.n_heads, scale, mask,
                                  need_weights=need_weights)
            if need_weights:
                attended, weights = attended
            out = attended @ self.params[p + "wo"]
        if need_weights:
            return out, weights
        return out

    def ffn(self, z: Tensor, layer: int) -> Tensor:
        p = f"layers.{layer}."
        with counting_scope():
            hidden = silu(z @ self.params[p + "w1"])
            return hidden @ self.params[p + "w2"]

    def transformer_layer(self, z: Tensor, layer: int, mask: np.ndarray | None = None,
                          cache: KvCache | None = None) -> Tensor:
        p = f"layers.{layer}."
        z = z + self.mha(rmsnorm(z, self.params[p + "attn_norm"]), mask, layer, cache)
        z = z + self.ffn(rmsnorm(z, self.params[p + "ffn_norm"]), layer)
        return z

    def lm_logits(self, z: Tensor) -> Tensor:
        return rmsnorm(z, self.params["final_norm"]) @ self.params["lm_head"]

    def forward_plain(self, z: Tensor, layout: SequenceLayout) -> Tensor:
        """Plain stacked forward with no pooling; logits at every position."""
        layout.check_matches(z.shape[0])
        mask = causal_mask(z.shape[0])
        for i in range(self.dims.n_layers):
            z = self.transformer_layer(z, i, mask)
        return self.lm_logits(z)

    # -- checkpointing --------------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dims": {
                "n_layers": self.dims.n_layers,
                "d": self.dims.d,
                "n_heads": self.dims.n_heads,
                "m": self.dims.m,
                "vocab": self.dims.vocab,
                "max_grid": list(self.dims.max_grid),
                "max_seq": self.dims.max_seq,
                "n_pixel_codes": self.dims.n_pixel_codes,
            },
            "pyramid": {
                "dpe_layers": list(self.pyramid.dpe_layers),
                "experts": [{"kernel": list(e.kernel), "rate": e.rate} for e in self.pyramid.experts],
                "target_rate": self.pyramid.target_rate,
                "routing_weight": self.pyramid.routing_weight,
            },
        }

    def save(self, path):
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["__meta__"] = np.array(json.dumps(self.state_meta()))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "DpnModel":
        with np.load(path, allow_pickle=False) as zf:
            if "__meta__" not in zf:
                raise ConfigError(f"{path} is not a model checkpoint")
            meta = json.loads(str(zf["__meta__"][()]))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')}")
            dims = ModelDims(
                n_layers=meta["dims"]["n_layers"],
                d=meta["dims"]["d"],
                n_heads=meta["dims"]["n_heads"],
                m=meta["dims"]["m"],
                vocab=meta["dims"]["vocab"],
                max_grid=tuple(meta["dims"]["max_grid"]),
                max_seq=meta["dims"]["max_seq"],
                n_pixel_codes=meta["dims"]["n_pixel_codes"],
            )
            pyramid = PyramidConfig(
                dpe_layers=tuple(meta["pyramid"]["dpe_layers"]),
                experts=tuple(PoolingExpert(tuple(e["kernel"]), e["rate"])
                              for e in meta["pyramid"]["experts"]),
                target_rate=meta["pyramid"]["target_rate"],
                routing_weight=meta["pyramid"]["routing_weight"],
            )
            model = cls(dims, pyramid, seed=0)
            for name, t in model.params.items():
                if name not in zf:
                    raise ConfigError(f"checkpoint missing parameter {name}")
                arr = zf[name]
                if arr.shape != t.data.shape:
                    raise ConfigError(
                        f"checkpoint parameter {name} has shape {arr.shape}, expected {t.data.shape}")
                t.data = arr.astype(np.float64)
        return model
