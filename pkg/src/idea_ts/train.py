"""Losses, window sampling and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .dataio import DataError, window_scale
from .evalkit import smape
from .model import IDEAModel, ModelConfig

log = logging.getLogger(__name__)

LOSSES = ("smape", "mape", "mase")
LR_SCHEDULES = ("none", "cosine", "step")
DEFAULT_MULTIPLIERS = (2, 3, 4, 5, 6, 7)


@dataclass
class TrainConfig:
    loss: str = "smape"
    batch_size: int = 128
    steps: int = 2000
    lr: float = 1e-3
    lr_decay: str = "none"
    epsilon: float = 1e-8
    val_interval: int = 100
    recent_mass: float = 0.5
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.loss not in LOSSES:
            problems.append(f"loss must be one of {LOSSES}")
        if self.lr_decay not in LR_SCHEDULES:
            problems.append(f"lr_decay must be one of {LR_SCHEDULES}")
        if self.epsilon <= 0:
            problems.append("epsilon must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.val_interval < 1:
            problems.append("val_interval must be >= 1")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        return self

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based ``step``."""
        if self.lr_decay == "cosine" and self.steps > 0:
            return self.lr * 0.5 * (1 + math.cos(math.pi * (step - 1) / self.steps))
        if self.lr_decay == "step":
            # halve at 50%, 75% and 90% of the run
            return self.lr * 0.5 ** sum(step > f * self.steps for f in (0.5, 0.75, 0.9))
        return self.lr


# -- losses ------------------------------------------------------------------

def _as_2d(yhat, y):
    yhat = yhat if isinstance(yhat, dc.Array) else dc.Array(yhat)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"forecast shape {yhat.shape} does not match target shape {y.shape}")
    if y.ndim == 1:
        yhat, y = dc.reshape(yhat, (1, -1)), y[None, :]
    return yhat, y


def sample_losses(kind: str, yhat, y, epsilon: float = 1e-8, mase_scale=None) -> dc.Array:
    """Per-sample differentiable loss, shape ``(B,)``."""
    yhat, y = _as_2d(yhat, y)
    err = dc.absolute(yhat - y)
    if kind == "smape":
        terms = err / (dc.absolute(yhat) + (np.abs(y) + epsilon))
        return dc.mean(terms, axis=-1) * 200.0
    if kind == "mape":
        return dc.mean(err / (np.abs(y) + epsilon), axis=-1) * 100.0
    if kind == "mase":
        if mase_scale is None:
            raise ValueError("mase loss needs a per-sample scale")
        scale = np.maximum(np.asarray(mase_scale, dtype=np.float64), epsilon)[:, None]
        return dc.mean(err / scale, axis=-1)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def smape_loss(yhat, y, epsilon: float = 1e-8) -> dc.Array:
    """Batch mean of ``(200/H) sum |y - yhat| / (|y| + |yhat| + eps)``."""
    return dc.mean(sample_losses("smape", yhat, y, epsilon))


def lookback_mase_scale(x, period: int, epsilon: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = period if x.shape[-1] > period else 1
    return np.maximum(np.abs(x[..., s:] - x[..., :-s]).mean(axis=-1), epsilon)


# -- sampling ----------------------------------------------------------------

class WindowSampler:
    """Draws (x, y) windows: a uniform eligible series, then an anchor.

    With probability ``recent_mass`` the anchor is one of the last ``H``
    eligible anchors, otherwise uniform over all of them.
    """

    def __init__(self, series: Sequence, lookback: int, horizon: int,
                 rng: np.random.Generator, recent_mass: float = 0.5):
        self.lookback, self.horizon = lookback, horizon
        self.rng = rng
        self.recent_mass = recent_mass
        self.series = [np.asarray(s, dtype=np.float64) for s in series]
        self.eligible = [i for i, s in enumerate(self.series) if s.size >= lookback + horizon]
        self.dropped = len(self.series) - len(self.eligible)

    def __len__(self) -> int:
        return len(self.eligible)

    def sample(self, n: int):
        """Returns ``(x (n, t), y (n, H), series index (n,))``."""
        if not self.eligible:
            raise DataError("no series long enough to sample a window")
        t, H = self.lookback, self.horizon
        picks = self.rng.integers(len(self.eligible), size=n)
        recent = self.rng.random(n) < self.recent_mass
        u = self.rng.random(n)
        xs, ys, src = np.empty((n, t)), np.empty((n, H)), np.empty(n, dtype=int)
        for j in range(n):
            i = self.eligible[picks[j]]
            s = self.series[i]
            hi = s.size - H  # largest anchor
            lo = t
            if recent[j]:
                lo = max(lo, hi - H + 1)
            a = lo + int(u[j] * (hi - lo + 1))
            xs[j] = s[a - t:a]
            ys[j] = s[a:a + H]
            src[j] = i
        return xs, ys, src


# -- training ----------------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, train_loss, val_smape)
    initial_val_smape: float = float("nan")
    used: int = 0
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_smape"])
        for step, loss, val in self.rows:
            w.writerow([step, repr(float(loss)), repr(float(val))])
        return buf.getvalue()


def train_step(model: IDEAModel, batch, loss: str, optimizer: dc.Adam,
               rng: np.random.Generator, epsilon: float = 1e-8, period: int = 1) -> float:
    """One optimisation step on raw windows ``batch = (x, y)``; returns the mean loss."""
    x, y = np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    scale = window_scale(x)[:, None]
    xs, ys = x / scale, y / scale
    mscale = lookback_mase_scale(xs, period, epsilon) if loss == "mase" else None
    optimizer.zero_grad()
    with dc.ComputationRecord() as rec:
        forecast, _ = model.forward(xs, training=True, rng=rng)
        per = sample_losses(loss, forecast, ys, epsilon, mscale)
        total = dc.mean(per)
    bad = np.flatnonzero(~np.isfinite(per.value))
    if bad.size:
        raise FloatingPointError(f"non-finite loss at batch sample {int(bad[0])}")
    dc.backward(rec, total)
    optimizer.step()
    return float(total.value)


def forecast_windows(model: IDEAModel, x) -> np.ndarray:
    """Forecasts for raw lookback windows ``(B, t)``, rescaled back."""
    x = np.asarray(x, dtype=np.float64)
    scale = window_scale(x)[:, None]
    return model.predict(x / scale) * scale


def forecast_series(model: IDEAModel, series: Sequence) -> np.ndarray:
    """Forecast after the last ``t`` points of each series; all must be long enough."""
    t = model.config.lookback
    arrs = [np.asarray(s, dtype=np.float64) for s in series]
    short = [i for i, s in enumerate(arrs) if s.size < t]
    if short:
        raise DataError(f"series {short[0]} is shorter than the lookback {t}")
    if not arrs:
        return np.zeros((0, model.config.horizon))
    return forecast_windows(model, np.stack([s[-t:] for s in arrs]))


def validation_smape(model: IDEAModel, val_x, val_y) -> float:
    if len(val_x) == 0:
        return float("nan")
    fc = forecast_windows(model, val_x)
    return float(np.mean([smape(f, y) for f, y in zip(fc, val_y)]))


def fit(model: IDEAModel, series: Sequence, config: TrainConfig, period: int = 1) -> TrainingLog:
    """Train on the given train regions.

    The last ``H`` points of each series are held out for validation; training
    windows come from the remainder.
    """
    config.validate()
    t, H = model.config.lookback, model.config.horizon
    arrs = [np.asarray(s, dtype=np.float64) for s in series]
    if not arrs:
        raise DataError("empty dataset")
    val = [s for s in arrs if s.size >= t + H]
    val_x = np.stack([s[-H - t:-H] for s in val]) if val else np.zeros((0, t))
    val_y = np.stack([s[-H:] for s in val]) if val else np.zeros((0, H))
    sampler_rng, dropout_rng = (np.random.default_rng(s)
                                for s in np.random.SeedSequence(config.seed).spawn(2))
    sampler = WindowSampler([s[:-H] for s in arrs], t, H, sampler_rng, config.recent_mass)
    out = TrainingLog(used=len(sampler), dropped=sampler.dropped)
    if config.steps == 0:
        return out
    if len(sampler) == 0:
        raise DataError(f"no training series is longer than lookback + 2 x horizon = {t + 2 * H}")
    out.initial_val_smape = validation_smape(model, val_x, val_y)
    opt = dc.Adam(model.parameters(), lr=config.lr)
    pending = []
    for step in range(1, config.steps + 1):
        opt.state.lr = config.lr_at(step)
        x, y, _ = sampler.sample(config.batch_size)
        pending.append(train_step(model, (x, y), config.loss, opt, dropout_rng,
                                  config.epsilon, period))
        if step % config.val_interval == 0 or step == config.steps:
            out.rows.append((step, float(np.mean(pending)), validation_smape(model, val_x, val_y)))
            log.info("step %d loss %.4f val_smape %.4f", *out.rows[-1])
            pending = []
    return out


# -- lookback ensemble -------------------------------------------------------

@dataclass
class Slot:
    lookback: int
    model: IDEAModel
    log: TrainingLog
    used: int
    dropped: int


def lookback_lengths(horizon: int, multipliers: Sequence[int] = DEFAULT_MULTIPLIERS) -> list[int]:
    return [m * horizon for m in multipliers]


def build_lookback_ensemble(series: Sequence, horizon: int, model_config: ModelConfig,
                            train_config: TrainConfig,
                            multipliers: Sequence[int] = DEFAULT_MULTIPLIERS,
                            period: int = 1) -> list[Slot]:
    """One independently trained model per lookback ``m x H``."""
    slots = []
    for m in multipliers:
        t = m * horizon
        cfg = replace(model_config, lookback=t, horizon=horizon)
        pool = [s for s in series if np.asarray(s).size >= t + horizon]
        dropped = len(series) - len(pool)
        if dropped:
            log.warning("lookback %d: %d of %d series too short, dropped", t, dropped, len(series))
        model = IDEAModel(cfg)
        tl = fit(model, pool, train_config, period) if pool else TrainingLog()
        slots.append(Slot(t, model, tl, len(pool), dropped))
    return slots


def ensemble_forecast(models: Sequence[IDEAModel], series: Sequence) -> np.ndarray:
    """Per-series median over the members whose lookback fits that series.

    Members need the same horizon. A series shorter than every lookback raises.
    """
    if not models:
        raise ValueError("ensemble has no members")
    H = models[0].config.horizon
    if any(m.config.horizon != H for m in models):
        raise ValueError("ensemble members disagree on the horizon")
    arrs = [np.asarray(s, dtype=np.float64) for s in series]
    out = np.empty((len(arrs), H))
    fcs = []
    for m in models:
        t = m.config.lookback
        ok = [i for i, s in enumerate(arrs) if s.size >= t]
        fc = np.full((len(arrs), H), np.nan)
        if ok:
            fc[ok] = forecast_series(m, [arrs[i] for i in ok])
        fcs.append(fc)
    stacked = np.stack(fcs)
    for i in range(len(arrs)):
        member = stacked[:, i][~np.isnan(stacked[:, i, 0])]
        if member.size == 0:
            raise DataError(f"series {i} is shorter than every ensemble lookback")
        out[i] = np.median(member, axis=0)
    return out
