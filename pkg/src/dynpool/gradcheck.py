"""Central finite-difference gradient checking at float64 precision."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def fd_gradient(f, t: Tensor, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. entries of t.data.

    `entries` is an optional iterable of flat indices; the default checks
    every entry. Returns an array shaped like t.data with unchecked entries
    set to NaN.
    """
    flat = t.data.reshape(-1)
    if entries is None:
        entries = range(flat.size)
    out = np.full(flat.size, np.nan)
    for i in entries:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(t.data.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst relative disagreement over the checked (non-NaN) entries.

    An entry counts as matching when |a - n| <= floor, which keeps genuinely
    zero gradients from blowing up the relative measure.
    """
    mask = ~np.isnan(numeric)
    a = analytic[mask]
    n = numeric[mask]
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    rel = diff / scale
    rel[diff <= floor] = 0.0
    return float(rel.max()) if rel.size else 0.0


def check_gradients(build_loss, params: dict[str, Tensor], eps: float = 1e-5,
                    rng: np.random.Generator | None = None,
                    entries_per_param: int | None = None) -> float:
    """Compare backward against central differences for every named tensor.

    `build_loss` must construct a fresh scalar-loss graph from the current
    parameter data each call. Returns the worst relative error seen.
    """
    loss = build_loss()
    for p in params.values():
        p.zero_grad()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if entries_per_param is not None and p.data.size > entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = rng.choice(p.data.size, size=entries_per_param, replace=False)
        else:
            entries = None
        numeric = fd_gradient(lambda: build_loss().item(), p, eps=eps, entries=entries)
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst
