"""Polynomial, harmonic and identity bases that turn coefficients into curves."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import diffcore as dc


class Kind(str, Enum):
    TREND = "trend"
    SEASONALITY = "seasonality"
    GENERIC = "generic"


def harmonics(horizon: int) -> int:
    """Number of cosine (and of sine) columns for a given horizon."""
    return int(np.floor(horizon / 2 - 1))


def make_trend_basis(p: int, length: int) -> np.ndarray:
    """``length x (p+1)`` matrix with entry ``(i, j) = (i/length)**j``."""
    if p < 0 or length < 1:
        raise ValueError(f"trend basis needs p >= 0 and length >= 1, got p={p}, length={length}")
    if p >= length:
        raise ValueError(f"trend degree p={p} must be below the grid length {length}")
    grid = np.arange(length, dtype=np.float64) / length
    basis = np.stack([grid ** j for j in range(p + 1)], axis=1)
    basis.setflags(write=False)
    return basis


def make_seasonality_basis(horizon: int, length: int) -> np.ndarray:
    """Constant column, then the cosine block, then the sine block.

    The harmonic count comes from ``horizon``; the grid is ``[0..length-1]/length``.
    """
    if horizon < 4:
        raise ValueError(f"seasonality basis needs a horizon of at least 4, got {horizon}")
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    n = harmonics(horizon)
    grid = np.arange(length, dtype=np.float64) / length
    freqs = np.arange(1, n + 1, dtype=np.float64)
    angle = 2 * np.pi * grid[:, None] * freqs[None, :]
    basis = np.concatenate([np.ones((length, 1)), np.cos(angle), np.sin(angle)], axis=1)
    basis.setflags(write=False)
    return basis


@dataclass(frozen=True)
class BasisSpec:
    kind: Kind
    backcast_length: int
    forecast_length: int
    degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.backcast_length < 1 or self.forecast_length < 1:
            raise ValueError("backcast and forecast lengths must be positive")

    @property
    def backcast_dim(self) -> int:
        if self.kind is Kind.TREND:
            return self.degree + 1
        if self.kind is Kind.SEASONALITY:
            return 2 * harmonics(self.forecast_length) + 1
        return self.backcast_length

    @property
    def forecast_dim(self) -> int:
        if self.kind is Kind.GENERIC:
            return self.forecast_length
        return self.backcast_dim

    def matrices(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        """(backcast basis, forecast basis); both None for the generic kind."""
        if self.kind is Kind.TREND:
            return (make_trend_basis(self.degree, self.backcast_length),
                    make_trend_basis(self.degree, self.forecast_length))
        if self.kind is Kind.SEASONALITY:
            return (make_seasonality_basis(self.forecast_length, self.backcast_length),
                    make_seasonality_basis(self.forecast_length, self.forecast_length))
        return None, None


def _apply(theta, matrix: np.ndarray | None, expected: int, what: str):
    theta = theta if isinstance(theta, dc.Array) else dc.Array(theta)
    if theta.shape[-1] != expected:
        raise dc.ShapeError("project", theta.shape, detail=f"{what} coefficients need width {expected}")
    if matrix is None:
        return theta
    squeeze = theta.ndim == 1
    if squeeze:
        theta = dc.reshape(theta, (1, -1))
    out = dc.matmul(theta, dc.Array(matrix.T))
    return dc.reshape(out, (-1,)) if squeeze else out


def project(theta_b, theta_f, spec: BasisSpec):
    """Map coefficient vectors (last axis) to a backcast and a forecast."""
    bmat, fmat = spec.matrices()
    return (_apply(theta_b, bmat, spec.backcast_dim, "backcast"),
            _apply(theta_f, fmat, spec.forecast_dim, "forecast"))
