"""Series loading, splitting, windowing and synthetic generators."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# frequency -> (seasonal period, horizon)
M4_FREQUENCIES = {
    "yearly": (1, 6),
    "quarterly": (4, 8),
    "monthly": (12, 18),
    "weekly": (1, 13),
    "daily": (1, 14),
    "hourly": (24, 48),
}
TOURISM_FREQUENCIES = {
    "tourism-yearly": (1, 4),
    "tourism-quarterly": (4, 8),
    "tourism-monthly": (12, 24),
}
FREQUENCIES = {**M4_FREQUENCIES, **TOURISM_FREQUENCIES}
# reporting buckets: the short sub-daily/daily/weekly sets are merged
REPORT_BUCKETS = {"yearly": "Yearly", "quarterly": "Quarterly", "monthly": "Monthly",
                  "weekly": "Others", "daily": "Others", "hourly": "Others",
                  "tourism-yearly": "Yearly", "tourism-quarterly": "Quarterly",
                  "tourism-monthly": "Monthly"}


class DataError(ValueError):
    pass


@dataclass
class SeriesRecord:
    id: str
    values: np.ndarray
    frequency: str = ""
    period: int = 1
    horizon: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise DataError(f"series {self.id!r} is empty")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"series {self.id!r} contains non-finite values")

    @property
    def bucket(self) -> str:
        return REPORT_BUCKETS.get(self.frequency, self.frequency.capitalize() or "All")


def frequency_info(freq: str) -> tuple[int, int]:
    try:
        return FREQUENCIES[freq.lower()]
    except KeyError:
        raise DataError(f"unknown frequency {freq!r}; known: {', '.join(sorted(FREQUENCIES))}") from None


@dataclass
class ManifestEntry:
    prefix: str
    frequency: str
    period: int
    horizon: int


def load_manifest(path) -> list[ManifestEntry]:
    """Sidecar CSV ``id_prefix,frequency,period,horizon`` (header optional)."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0] == "id_prefix":
                continue
            try:
                prefix, freq, period, horizon = row[:4]
                entries.append(ManifestEntry(prefix, freq.strip().lower(), int(period), int(horizon)))
            except ValueError:
                raise DataError(f"{path}: malformed manifest line {lineno}: {row}") from None
    return entries


def _lookup(entries: Sequence[ManifestEntry], series_id: str) -> ManifestEntry | None:
    best = None
    for e in entries:
        if series_id.startswith(e.prefix) and (best is None or len(e.prefix) > len(best.prefix)):
            best = e
    return best


def load_csv(path, manifest=None, freq: str | None = None, horizon: int | None = None,
             period: int | None = None) -> list[SeriesRecord]:
    """Read ``id,V1,V2,...`` rows; trailing empty cells are dropped.

    Frequency comes from a manifest (longest matching id prefix) or from ``freq``
    for single-frequency files; ``horizon``/``period`` override either.
    """
    entries = load_manifest(manifest) if manifest else []
    records, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if rowno == 1 and row and row[0].strip().lower() == "id":
                continue
            if not row or not any(cell.strip() for cell in row):
                continue
            sid = row[0].strip()
            if sid in seen:
                raise DataError(f"{path}: duplicate series id {sid!r} at row {rowno}")
            seen.add(sid)
            cells = row[1:]
            while cells and not cells[-1].strip():
                cells.pop()
            values = []
            for col, cell in enumerate(cells, start=2):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: malformed number {cell!r} at row {rowno}, column {col}") from None
            entry = _lookup(entries, sid) if entries else None
            if entry is not None:
                f, s, h = entry.frequency, entry.period, entry.horizon
            elif freq is not None:
                f = freq.lower()
                s, h = FREQUENCIES.get(f, (1, 1))
            else:
                raise DataError(f"{path}: no frequency for series {sid!r}; pass a manifest or --freq")
            records.append(SeriesRecord(sid, np.array(values), f,
                                        period if period is not None else s,
                                        horizon if horizon is not None else h))
    return records


def format_number(v: float) -> str:
    return f"{float(v):.10g}"


def write_csv(records: Iterable[SeriesRecord], path) -> None:
    records = list(records)
    width = max((r.values.size for r in records), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"V{i + 1}" for i in range(width)])
        for r in records:
            writer.writerow([r.id] + [format_number(v) for v in r.values])


def split_train_test(record: SeriesRecord, horizon: int | None = None):
    """Last ``horizon`` observations are the test part."""
    h = record.horizon if horizon is None else horizon
    if h < 1:
        raise DataError(f"horizon must be >= 1, got {h}")
    if record.values.size <= h:
        raise DataError(f"series {record.id!r} (length {record.values.size}) is too short for horizon {h}")
    return record.values[:-h].copy(), record.values[-h:].copy()


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of a synthetic collection.

    ``noise_scale`` is relative: to the seasonal amplitude for ``trend_season``
    series and to the jump size for ``silent`` ones.
    """
    kind: str = "trend_season"
    count: int = 100
    length: int = 120
    period: int = 12
    level_range: tuple = (50.0, 100.0)
    slope_range: tuple = (0.1, 1.0)
    amplitude_range: tuple = (5.0, 20.0)
    noise_scale: float = 0.05
    jump_range: tuple = (20.0, 60.0)
    seed: int = 0
    frequency: str = "monthly"
    horizon: int = 24
    prefix: str = ""

    def __post_init__(self):
        if self.kind not in ("trend_season", "silent"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.count < 0 or self.length < 2 or self.period < 1:
            raise ValueError("count >= 0, length >= 2 and period >= 1 required")


def generate_synthetic(spec: SyntheticSpec) -> list[SeriesRecord]:
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    prefix = spec.prefix or ("S" if spec.kind == "silent" else "T")
    out = []
    for i in range(spec.count):
        level = rng.uniform(*spec.level_range)
        if spec.kind == "trend_season":
            slope = rng.uniform(*spec.slope_range)
            amp = rng.uniform(*spec.amplitude_range)
            phase = rng.uniform(0, 2 * np.pi)
            y = level + slope * t
            if spec.period > 1:
                y = y + amp * np.sin(2 * np.pi * t / spec.period + phase)
            y = y + rng.normal(0.0, spec.noise_scale * amp, spec.length)
        else:
            jump = rng.uniform(*spec.jump_range)
            y = level + rng.normal(0.0, spec.noise_scale * jump, spec.length)
            y[-1] += jump
        out.append(SeriesRecord(f"{prefix}{i + 1}", y, spec.frequency, spec.period, spec.horizon))
    return out


# -- windows -----------------------------------------------------------------

@dataclass
class SeriesWindow:
    x: np.ndarray
    y: np.ndarray
    period: int = 1
    series: int = -1


@dataclass
class WindowSet:
    x: np.ndarray  # (N, t)
    y: np.ndarray  # (N, H)
    series: np.ndarray  # (N,) index of the source record
    skipped: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i) -> SeriesWindow:
        return SeriesWindow(self.x[i], self.y[i], series=int(self.series[i]))


def make_windows(series: Sequence, lookback: int, horizon: int) -> WindowSet:
    """Every ``(x, y)`` pair with ``x`` immediately before ``y`` inside each series.

    ``series`` holds the train regions (arrays or records); series shorter
    than ``lookback + horizon`` are skipped and counted.
    """
    if lookback < 1 or horizon < 1:
        raise ValueError("lookback and horizon must be >= 1")
    xs, ys, src = [], [], []
    skipped = 0
    for i, s in enumerate(series):
        v = s.values if isinstance(s, SeriesRecord) else np.asarray(s, dtype=np.float64)
        n = v.size - lookback - horizon + 1
        if n < 1:
            skipped += 1
            continue
        idx = np.arange(n)[:, None]
        xs.append(v[idx + np.arange(lookback)])
        ys.append(v[idx + lookback + np.arange(horizon)])
        src.append(np.full(n, i))
    if not xs:
        return WindowSet(np.zeros((0, lookback)), np.zeros((0, horizon)), np.zeros(0, dtype=int), skipped)
    return WindowSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(src), skipped)


def window_scale(x, eps: float = 1e-8) -> np.ndarray:
    """Per-window divisor: max |x| over the lookback, or 1 when that is below ``eps``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.abs(x).max(axis=-1)
    return np.where(m > eps, m, 1.0)


def series_stats(records: Sequence[SeriesRecord]) -> list[dict]:
    """Count and length summary per reporting bucket."""
    groups: dict[str, list[SeriesRecord]] = {}
    for r in records:
        groups.setdefault(r.frequency or "all", []).append(r)
    out = []
    for freq in sorted(groups):
        lengths = np.array([r.values.size for r in groups[freq]])
        out.append({"frequency": freq, "count": len(lengths),
                    "horizon": groups[freq][0].horizon, "period": groups[freq][0].period,
                    "min_length": int(lengths.min()), "mean_length": float(lengths.mean()),
                    "max_length": int(lengths.max())})
    return out
