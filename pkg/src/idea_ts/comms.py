"""Sparse communication between the learners of one group.

Activated learners read from every learner (themselves and the inactive ones
included) with softened residual attention; gradients never flow into the
keys and values of inactive sources.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class CommParams:
    wq: dc.Array  # (G, D, d_c)
    wk: dc.Array  # (G, D, d_c)
    wv: dc.Array  # (G, D, D)
    alpha: float = 0.1
    rho: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"softening factor alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"attention dropout must lie in [0, 1), got {self.rho}")
        G, D, dc_ = self.wq.shape
        if self.wk.shape != (G, D, dc_) or self.wv.shape != (G, D, D):
            raise dc.ShapeError("CommParams", self.wq.shape, self.wk.shape, self.wv.shape)


def dropout_mask(n_learners: int, rho: float, rng: np.random.Generator, shape=()) -> np.ndarray:
    """Keep-mask over ``[target, source]`` edges, shape ``shape + (G, G)``.

    A target that lost every source keeps its self edge.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"attention dropout must lie in [0, 1), got {rho}")
    full = tuple(shape) + (n_learners, n_learners)
    if rho == 0.0:
        return np.ones(full, dtype=bool)
    keep = rng.random(full) >= rho
    dead = ~keep.any(axis=-1)
    if dead.any():
        eye = np.broadcast_to(np.eye(n_learners, dtype=bool), full)
        keep = keep | (dead[..., None] & eye)
    return keep


def communicate(thetas, active, params: CommParams, training: bool = False,
                rng: np.random.Generator | None = None):
    """Update the contexts of activated learners by ``theta + alpha * c``.

    thetas: ``(G, B, D)`` Array; active: ``(G, B)`` bool.
    Returns ``(updated thetas, attention weights (B, G, G))``.
    """
    thetas = thetas if isinstance(thetas, dc.Array) else dc.Array(thetas)
    active = np.asarray(active, dtype=bool)
    G, B, D = thetas.shape
    if params.wq.shape[:2] != (G, D):
        raise dc.ShapeError("communicate", thetas.shape, params.wq.shape)
    if active.shape != (G, B):
        raise dc.ShapeError("communicate", active.shape, (G, B), detail="activation mask")
    d_c = params.wq.shape[2]
    on = active[..., None]
    queries = thetas @ params.wq
    keys = thetas @ params.wk
    values = thetas @ params.wv
    # inactive sources are read but never trained through
    keys = dc.where(on, keys, dc.stop_gradient(keys))
    values = dc.where(on, values, dc.stop_gradient(values))
    q = dc.transpose(queries, (1, 0, 2))  # (B, G, d_c)
    k = dc.transpose(keys, (1, 0, 2))
    v = dc.transpose(values, (1, 0, 2))  # (B, G, D)
    logits = (q @ dc.transpose(k)) * (1.0 / np.sqrt(d_c))  # (B, target, source)
    mask = None
    if training and params.rho > 0.0:
        if rng is None:
            raise ValueError("communicate: training with dropout needs an rng")
        mask = dropout_mask(G, params.rho, rng, shape=(B,))
    attn = dc.softmax(logits, mask)
    context = dc.transpose(attn @ v, (1, 0, 2))  # (G, B, D)
    updated = thetas + context * params.alpha
    return dc.where(on, updated, thetas), attn.value
