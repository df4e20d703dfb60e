"""Recurrent input competition.

Each learner queries the group input with its context from the previous
group.  The input is split into tokens plus one all-zero null token; a
learner's relevance is the attention mass it puts on real tokens, and the
``k`` most relevant learners are activated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

TOKEN_MODES = ("pointwise", "window")


def token_width(mode: str, lookback: int) -> int:
    if mode == "pointwise":
        return 2
    if mode == "window":
        return lookback
    raise ValueError(f"unknown token mode {mode!r}; expected one of {TOKEN_MODES}")


def tokenize_window(x, mode: str = "pointwise") -> dc.Array:
    """Turn a window (or a batch of windows) into tokens followed by a null token.

    ``pointwise``: token i is ``(x[i], i/t)``, giving ``t + 1`` tokens of width 2.
    ``window``: the whole window is a single token of width ``t``, giving 2 tokens.
    Output shape is ``(n_tokens, width)`` or ``(batch, n_tokens, width)``.
    """
    x = x if isinstance(x, dc.Array) else dc.Array(x)
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ValueError(f"tokenize_window: expected a non-empty window, got shape {x.shape}")
    single = x.ndim == 1
    if single:
        x = dc.reshape(x, (1, -1))
    batch, t = x.shape
    if mode == "pointwise":
        pos = np.broadcast_to((np.arange(t) / t)[None, :, None], (batch, t, 1))
        real = dc.concat([dc.reshape(x, (batch, t, 1)), dc.Array(pos)], axis=-1)
        tokens = dc.concat([real, dc.Array(np.zeros((batch, 1, 2)))], axis=1)
    elif mode == "window":
        tokens = dc.concat([dc.reshape(x, (batch, 1, t)), dc.Array(np.zeros((batch, 1, t)))], axis=1)
    else:
        raise ValueError(f"unknown token mode {mode!r}; expected one of {TOKEN_MODES}")
    return dc.reshape(tokens, tokens.shape[1:]) if single else tokens


@dataclass
class GatingParams:
    wk: dc.Array  # (token width, d_k), shared
    wv: dc.Array  # (token width, d_v), shared
    wq: dc.Array  # (G, D, d_k), one query projection per learner

    @property
    def d_k(self) -> int:
        return self.wk.shape[1]

    @property
    def d_v(self) -> int:
        return self.wv.shape[1]

    @property
    def n_learners(self) -> int:
        return self.wq.shape[0]


@dataclass
class ActivationRecord:
    group: int
    relevance: np.ndarray  # (G, B)
    active: np.ndarray  # (G, B) bool
    weights: np.ndarray  # (G, B, n_tokens)


def input_attention(thetas, tokens, params: GatingParams):
    """Scaled dot-product attention of every learner's query over the tokens.

    thetas: ``(G, B, D)`` previous-group contexts (``(G, D)`` for one sample).
    tokens: ``(B, n, w)`` (``(n, w)`` for one sample), null token last.
    Returns ``(pooled, relevance, weights)`` with pooled ``(G, B, d_v)`` as an
    Array and relevance ``(G, B)`` / weights ``(G, B, n)`` as numpy values.
    """
    thetas = thetas if isinstance(thetas, dc.Array) else dc.Array(thetas)
    tokens = tokens if isinstance(tokens, dc.Array) else dc.Array(tokens)
    if thetas.ndim == 2:
        thetas = dc.reshape(thetas, (thetas.shape[0], 1, thetas.shape[1]))
    if tokens.ndim == 2:
        tokens = dc.reshape(tokens, (1,) + tokens.shape)
    G, B, D = thetas.shape
    if params.wq.shape[:2] != (G, D):
        raise dc.ShapeError("input_attention", thetas.shape, params.wq.shape,
                            detail="context width or learner count differs from query projections")
    if tokens.shape[-1] != params.wk.shape[0] or B not in (1, tokens.shape[0]):
        raise dc.ShapeError("input_attention", tokens.shape, params.wk.shape)
    n = tokens.shape[1]
    keys = tokens @ params.wk  # (B, n, d_k)
    values = tokens @ params.wv  # (B, n, d_v)
    queries = dc.reshape(thetas @ params.wq, (G, B, 1, params.d_k))
    B = tokens.shape[0]
    logits = (queries @ dc.transpose(keys)) * (1.0 / np.sqrt(params.d_k))  # (G, B, 1, n)
    attn = dc.softmax(logits)
    pooled = dc.reshape(attn @ values, (G, B, params.d_v))
    weights = attn.value.reshape(G, B, n)
    relevance = 1.0 - weights[..., -1]
    return pooled, relevance, weights


def select_topk(relevances, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest relevances along axis 0.

    Ties go to the lower learner index.
    """
    rel = np.asarray(relevances, dtype=np.float64)
    G = rel.shape[0]
    if not 1 <= k <= G:
        raise ValueError(f"top-k needs 1 <= k <= {G}, got k={k}")
    order = np.argsort(-rel, axis=0, kind="stable")
    mask = np.zeros(rel.shape, dtype=bool)
    np.put_along_axis(mask, order[:k], True, axis=0)
    return mask


def activated_indices(mask) -> tuple:
    """Sorted learner indices switched on in a 1-D activation mask."""
    return tuple(int(i) for i in np.flatnonzero(mask))
