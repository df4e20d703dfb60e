"""Forecast accuracy metrics, the naive2 reference and score tables."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MASE_DENOMINATORS = ("paper", "insample")


class DegenerateSeriesError(ValueError):
    pass


@dataclass
class EvalSeries:
    train: np.ndarray
    test: np.ndarray
    period: int = 1
    frequency: str = ""
    id: str = ""

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.float64)
        self.test = np.asarray(self.test, dtype=np.float64)
        if self.period < 1:
            raise ValueError(f"seasonal period must be >= 1, got {self.period}")
        if self.test.size < 1:
            raise ValueError("test horizon must contain at least one value")

    @property
    def horizon(self) -> int:
        return self.test.size


def _pair(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"forecast shape {yhat.shape} does not match target shape {y.shape}")
    return yhat, y


def smape(yhat, y) -> float:
    """Symmetric MAPE in percent; a term with ``|y| + |yhat| == 0`` counts as 0."""
    yhat, y = _pair(yhat, y)
    denom = np.abs(y) + np.abs(yhat)
    num = np.abs(y - yhat)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom != 0)
    return float(200.0 * terms.mean())


def mape(yhat, y) -> float:
    yhat, y = _pair(yhat, y)
    zero = np.flatnonzero(y == 0)
    if zero.size:
        raise ValueError(f"MAPE undefined: target is zero at index {int(zero[0])}")
    return float(100.0 * np.mean(np.abs(y - yhat) / np.abs(y)))


def mase_scale(series: EvalSeries, denominator: str = "paper") -> float:
    """Mean absolute seasonal difference used as the MASE denominator.

    ``paper`` runs the sum over the train and test values concatenated;
    ``insample`` uses the train values only (the usual M4 convention).
    """
    if denominator not in MASE_DENOMINATORS:
        raise ValueError(f"mase denominator must be one of {MASE_DENOMINATORS}")
    s = series.period
    full = np.concatenate([series.train, series.test]) if denominator == "paper" else series.train
    if full.size <= s:
        raise DegenerateSeriesError(f"series {series.id!r} too short for lag-{s} differences")
    scale = float(np.mean(np.abs(full[s:] - full[:-s])))
    if scale == 0.0:
        raise DegenerateSeriesError(f"series {series.id!r} has a zero MASE denominator (constant at lag {s})")
    return scale


def mase(yhat, series: EvalSeries, denominator: str = "paper") -> float:
    yhat, y = _pair(yhat, series.test)
    return float(np.mean(np.abs(y - yhat)) / mase_scale(series, denominator))


# -- reference forecasters ---------------------------------------------------

def acf(x, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    denom = float(np.sum(d * d))
    if denom == 0.0:
        return 0.0
    return float(np.sum(d[lag:] * d[:-lag]) / denom) if lag > 0 else 1.0


def seasonality_test(train, period: int) -> bool:
    """90% autocorrelation test for seasonality at lag ``period``."""
    train = np.asarray(train, dtype=np.float64)
    if period <= 1:
        return False
    if train.size <= period + 2:
        return False
    r = [acf(train, i) for i in range(1, period)]
    limit = 1.645 * np.sqrt((1.0 + 2.0 * np.sum(np.square(r))) / train.size)
    return bool(abs(acf(train, period)) > limit)


def seasonal_indices(train, period: int) -> np.ndarray:
    """Multiplicative classical decomposition: per-phase indices, phase 0 = first value.

    The trend is a centred moving average (a 2xm average for even periods);
    the indices are phase means of ``train / trend``, normalised to mean one.
    """
    x = np.asarray(train, dtype=np.float64)
    n = x.size
    if period % 2 == 0:
        w = np.r_[0.5, np.ones(period - 1), 0.5] / period
    else:
        w = np.ones(period) / period
    half = w.size // 2
    trend = np.full(n, np.nan)
    trend[half:n - half] = np.convolve(x, w, mode="valid")
    ratio = x / trend
    idx = np.array([np.nanmean(ratio[p::period]) for p in range(period)])
    return idx / idx.mean()


def naive_forecast(train, horizon: int) -> np.ndarray:
    return np.repeat(float(np.asarray(train)[-1]), horizon)


def seasonal_naive_forecast(train, horizon: int, period: int) -> np.ndarray:
    train = np.asarray(train, dtype=np.float64)
    if period <= 1 or train.size < period:
        return naive_forecast(train, horizon)
    last = train[-period:]
    return np.array([last[h % period] for h in range(horizon)])


def naive2_forecast(series: EvalSeries) -> np.ndarray:
    """Naive forecast on seasonally adjusted data, re-seasonalised.

    Falls back to plain naive when the period is 1, the series is shorter
    than three periods, or the seasonality test fails.
    """
    train, s, h = series.train, series.period, series.horizon
    if s <= 1:
        return naive_forecast(train, h)
    if train.size < 3 * s:
        log.info("naive2: series %r shorter than 3 periods, using naive", series.id)
        return naive_forecast(train, h)
    if not seasonality_test(train, s):
        return naive_forecast(train, h)
    idx = seasonal_indices(train, s)
    n = train.size
    adjusted_last = train[-1] / idx[(n - 1) % s]
    return np.array([adjusted_last * idx[(n + i) % s] for i in range(h)])


# -- OWA ---------------------------------------------------------------------

def owa(yhat, series: EvalSeries, denominator: str = "paper") -> float:
    """Single-series OWA against naive2."""
    return owa_dataset([yhat], [series], denominator=denominator)


def owa_dataset(forecasts: Sequence, series: Sequence[EvalSeries], denominator: str = "paper",
                per_series: bool = False) -> float:
    """OWA over a collection.

    Default: average sMAPE and MASE over the series for the method and for
    naive2, then combine the ratios of those averages.  ``per_series=True``
    averages the per-series OWA values instead.
    """
    if len(forecasts) != len(series):
        raise ValueError("need one forecast per series")
    sm, ms, sm2, ms2 = [], [], [], []
    for yhat, ser in zip(forecasts, series):
        ref = naive2_forecast(ser)
        sm.append(smape(yhat, ser.test))
        ms.append(mase(yhat, ser, denominator))
        sm2.append(smape(ref, ser.test))
        ms2.append(mase(ref, ser, denominator))
    sm, ms, sm2, ms2 = map(np.asarray, (sm, ms, sm2, ms2))
    if per_series:
        if np.any(sm2 == 0) or np.any(ms2 == 0):
            raise DegenerateSeriesError("naive2 is exact on some series; per-series OWA undefined")
        return float(np.mean(0.5 * (sm / sm2 + ms / ms2)))
    if sm2.mean() == 0 or ms2.mean() == 0:
        raise DegenerateSeriesError("naive2 metrics are zero; OWA undefined")
    return float(0.5 * (sm.mean() / sm2.mean() + ms.mean() / ms2.mean()))


def weighted_average_mape(per_freq: Mapping[str, float], counts: Mapping[str, float]) -> float:
    """``sum_f (N_f / N_tot) * value_f`` with ``N_tot`` summed over all supplied counts."""
    if any(c <= 0 for c in counts.values()):
        raise ValueError("weights must be positive")
    total = float(sum(counts.values()))
    missing = set(per_freq) - set(counts)
    if missing:
        raise KeyError(f"no weight for frequencies {sorted(missing)}")
    return float(sum(counts[f] / total * v for f, v in per_freq.items()))


# weights that reproduce the published averages
TOURISM_WEIGHTS = {"Yearly": 4 * 518, "Quarterly": 8 * 427, "Monthly": 24 * 366}
M4_WEIGHTS = {"Yearly": 23000, "Quarterly": 24000, "Monthly": 48000, "Others": 5000}
# horizon x count weights as printed; they reproduce none of the published averages
PRINTED_WEIGHTS = {"Yearly": 6 * 645, "Quarterly": 8 * 756, "Monthly": 18 * 1428,
                   "Others": 8 * 174}


# -- score tables ------------------------------------------------------------

@dataclass
class ScoreRow:
    method: str
    frequency: str
    metric: str
    value: float


def score_method(name: str, forecasts: Sequence, series: Sequence[EvalSeries],
                 denominator: str = "paper") -> list[ScoreRow]:
    """Per-frequency and ``Average`` rows of sMAPE, MAPE, MASE and OWA.

    Averages: sMAPE and MASE weight every series equally; MAPE weights each
    frequency by ``series count x horizon``; OWA is recomputed from the
    pooled series.  MAPE is omitted where a target is zero.
    """
    by_freq: dict[str, list[int]] = {}
    for i, ser in enumerate(series):
        by_freq.setdefault(ser.frequency or "All", []).append(i)
    rows: list[ScoreRow] = []
    mape_vals, mape_w = {}, {}
    all_sm, all_ms = [], []
    for freq, idx in by_freq.items():
        fc = [forecasts[i] for i in idx]
        ss = [series[i] for i in idx]
        sm = [smape(f, s.test) for f, s in zip(fc, ss)]
        ms = [mase(f, s, denominator) for f, s in zip(fc, ss)]
        all_sm += sm
        all_ms += ms
        rows.append(ScoreRow(name, freq, "smape", float(np.mean(sm))))
        try:
            mp = float(np.mean([mape(f, s.test) for f, s in zip(fc, ss)]))
        except ValueError as exc:
            log.warning("MAPE skipped for %s/%s: %s", name, freq, exc)
        else:
            rows.append(ScoreRow(name, freq, "mape", mp))
            mape_vals[freq] = mp
            mape_w[freq] = len(ss) * ss[0].horizon
        rows.append(ScoreRow(name, freq, "mase", float(np.mean(ms))))
        rows.append(ScoreRow(name, freq, "owa", owa_dataset(fc, ss, denominator)))
    if len(by_freq) > 1:
        rows.append(ScoreRow(name, "Average", "smape", float(np.mean(all_sm))))
        if len(mape_vals) == len(by_freq):
            rows.append(ScoreRow(name, "Average", "mape", weighted_average_mape(mape_vals, mape_w)))
        rows.append(ScoreRow(name, "Average", "mase", float(np.mean(all_ms))))
        rows.append(ScoreRow(name, "Average", "owa", owa_dataset(list(forecasts), list(series), denominator)))
    return rows


def format_value(v: float) -> str:
    return repr(float(v))


def write_score_csv(rows: Iterable[ScoreRow], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["method", "frequency", "metric", "value"])
    for r in rows:
        writer.writerow([r.method, r.frequency, r.metric, format_value(r.value)])


def score_csv_text(rows: Iterable[ScoreRow]) -> str:
    buf = io.StringIO()
    write_score_csv(rows, buf)
    return buf.getvalue()
