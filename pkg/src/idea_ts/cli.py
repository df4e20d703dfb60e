"""Command-line entry point: train, eval, forecast, shift-experiment, stats."""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import sys
from collections import Counter
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import (DataError, SeriesRecord, SyntheticSpec, format_number, frequency_info,
                     generate_synthetic, load_csv, series_stats, split_train_test)
from .evalkit import (MASE_DENOMINATORS, DegenerateSeriesError, EvalSeries, ScoreRow,
                      naive2_forecast, naive_forecast, score_method, seasonal_naive_forecast,
                      write_score_csv)
from .gating import TOKEN_MODES
from .model import IDEAModel, ModelConfig, load_checkpoint
from .train import (DEFAULT_MULTIPLIERS, LOSSES, LR_SCHEDULES, TrainConfig,
                    build_lookback_ensemble, ensemble_forecast, fit)

log = logging.getLogger("idea_ts")

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]

DEFAULTS = {
    **{k: v for k, v in asdict(ModelConfig(lookback=1, horizon=1)).items()},
    **asdict(TrainConfig()),
    "lookback": None,  # 2 x horizon
    "horizon": None,  # from the frequency table
    "period": None,
    "data": None,
    "test_data": None,
    "manifest": None,
    "freq": None,
    "out": "out",
    "checkpoint": None,
    "mase_denominator": "paper",
    "ensemble": False,
    "multipliers": list(DEFAULT_MULTIPLIERS),
    "baseline": [],
    "plot_data": False,
    "synthetic": None,
    "synthetic_count": 50,
    "synthetic_length": 120,
    "noise_scale": 0.05,
    "sample_seed": None,  # shift experiment samples; defaults to seed
}

# typical at 1-indexed positions 1-10 and 16-25, silent at 11-15 and 26-30
SHIFT_LAYOUT = ["typical"] * 10 + ["silent"] * 5 + ["typical"] * 10 + ["silent"] * 5
SHIFT_SWITCHES = (10, 25)  # 0-indexed first silent sample after typical ones


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of settings (flags override it)")
    p.add_argument("--data", default=S, help="series CSV: id,V1,V2,...")
    p.add_argument("--test-data", dest="test_data", default=S,
                   help="CSV with the future values; without it the last H points of --data are held out")
    p.add_argument("--manifest", default=S, help="sidecar id_prefix,frequency,period,horizon")
    p.add_argument("--freq", default=S, help="frequency of a single-frequency file")
    p.add_argument("--horizon", type=int, default=S)
    p.add_argument("--period", type=int, default=S)
    p.add_argument("--lookback", type=int, default=S)
    p.add_argument("--mode", choices=("interpretable", "generic"), default=S)
    p.add_argument("--token-mode", dest="token_mode", choices=TOKEN_MODES, default=S)
    p.add_argument("--groups", type=int, default=S)
    p.add_argument("--learners", type=int, default=S)
    p.add_argument("--topk", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--context", type=int, default=S)
    p.add_argument("--d-k", dest="d_k", type=int, default=S)
    p.add_argument("--d-v", dest="d_v", type=int, default=S)
    p.add_argument("--d-c", dest="d_c", type=int, default=S)
    p.add_argument("--trend-degree", dest="trend_degree", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--comm-dropout", dest="comm_dropout", type=float, default=S)
    p.add_argument("--loss", choices=LOSSES, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--batch", dest="batch_size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--lr-decay", dest="lr_decay", choices=LR_SCHEDULES, default=S)
    p.add_argument("--val-interval", dest="val_interval", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--checkpoint", nargs="+", default=S)
    p.add_argument("--mase-denominator", dest="mase_denominator", choices=MASE_DENOMINATORS, default=S)
    p.add_argument("--synthetic", choices=("trend_season", "silent"), default=S,
                   help="generate seeded synthetic series instead of reading --data")
    p.add_argument("--synthetic-count", dest="synthetic_count", type=int, default=S)
    p.add_argument("--synthetic-length", dest="synthetic_length", type=int, default=S)
    p.add_argument("--noise-scale", dest="noise_scale", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idea-ts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train", help="train a model (or a six-lookback ensemble)")
    _common(p)
    p.add_argument("--ensemble", action="store_true", default=argparse.SUPPRESS,
                   help="train one model per lookback multiplier")
    p.add_argument("--multipliers", type=int, nargs="+", default=argparse.SUPPRESS)
    p = sub.add_parser("eval", help="score checkpoints and baselines")
    _common(p)
    p.add_argument("--baseline", nargs="+", choices=("naive2", "naive", "snaive"),
                   default=argparse.SUPPRESS)
    p = sub.add_parser("forecast", help="write H-step forecasts")
    _common(p)
    p.add_argument("--plot-data", dest="plot_data", action="store_true", default=argparse.SUPPRESS)
    p = sub.add_parser("shift-experiment", help="activation map over typical and silent samples")
    _common(p)
    p.add_argument("--sample-seed", dest="sample_seed", type=int, default=argparse.SUPPRESS)
    p = sub.add_parser("stats", help="per-frequency dataset summary")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags."""
    cfg = dict(DEFAULTS)
    flags = vars(args).copy()
    command = flags.pop("command")
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        unknown = set(loaded) - set(DEFAULTS) - {"command"}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    cfg.update(flags)
    if isinstance(cfg["checkpoint"], str):
        cfg["checkpoint"] = [cfg["checkpoint"]]
    cfg["command"] = command
    return cfg


# -- helpers -----------------------------------------------------------------

def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_log(out: Path, text: str) -> None:
    # the only place wall-clock time is written
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {text}\n")


def _write_summary(out: Path, lines) -> None:
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _horizon_period(cfg) -> tuple[int | None, int | None]:
    h, s = cfg["horizon"], cfg["period"]
    if cfg["freq"]:
        fs, fh = frequency_info(cfg["freq"])
        h = fh if h is None else h
        s = fs if s is None else s
    return h, s


def load_records(cfg, key: str = "data") -> list[SeriesRecord]:
    horizon, period = _horizon_period(cfg)
    if cfg[key]:
        return load_csv(cfg[key], manifest=cfg["manifest"], freq=cfg["freq"], horizon=horizon,
                        period=period)
    if key == "data" and cfg["synthetic"]:
        spec = SyntheticSpec(kind=cfg["synthetic"], count=cfg["synthetic_count"],
                             length=cfg["synthetic_length"], period=period or 1,
                             noise_scale=cfg["noise_scale"], seed=cfg["seed"],
                             frequency=(cfg["freq"] or "synthetic").lower(), horizon=horizon or 1)
        return generate_synthetic(spec)
    raise CliError(f"--{key.replace('_', '-')} is required")


def split_records(cfg, records):
    """``[(record, train, test or None)]``; test comes from --test-data or the held-out tail."""
    if cfg["test_data"]:
        future = {r.id: r.values for r in load_records(cfg, "test_data")}
        missing = [r.id for r in records if r.id not in future]
        if missing:
            raise DataError(f"test data lacks series {missing[0]!r}")
        return [(r, r.values, future[r.id][:r.horizon]) for r in records]
    out = []
    for r in records:
        train, test = split_train_test(r)
        out.append((r, train, test))
    return out


def _uniform(records, attr):
    vals = sorted({getattr(r, attr) for r in records})
    if len(vals) != 1:
        raise CliError(f"series disagree on {attr} ({vals}); train one frequency at a time")
    return vals[0]


def model_config(cfg, horizon: int) -> ModelConfig:
    values = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    values["horizon"] = horizon
    values["lookback"] = cfg["lookback"] or 2 * horizon
    return ModelConfig(**values).validate()


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS}).validate()


def _method_name(model: IDEAModel) -> str:
    return "IDEA-" + model.config.mode.capitalize()


def load_models(cfg):
    paths = cfg["checkpoint"] or []
    if not paths:
        raise CliError("--checkpoint is required")
    models = []
    for p in paths:
        try:
            models.append(load_checkpoint(p))
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load checkpoint {p}: {exc}") from None
    return models


def check_compatible(models, records) -> None:
    for model, extra in models:
        H = model.config.horizon
        freq = extra.get("frequency")
        for r in records:
            if r.horizon != H:
                raise CliError(f"horizon mismatch: checkpoint has H={H}, series {r.id!r} has H={r.horizon}")
            if freq and r.frequency and freq != r.frequency:
                raise CliError(f"frequency mismatch: checkpoint is {freq!r}, series {r.id!r} is {r.frequency!r}")


# -- commands ----------------------------------------------------------------

def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    records = load_records(cfg)
    if not records:
        raise DataError("no series to train on")
    H = _uniform(records, "horizon")
    period = _uniform(records, "period")
    freq = _uniform(records, "frequency")
    pairs = split_records(cfg, records)
    train_series = [train for _, train, _ in pairs]
    mcfg = model_config(cfg, H)
    tcfg = train_config(cfg)
    extra = {"frequency": freq, "period": period, "seed": cfg["seed"]}
    _echo_config(cfg, out)
    _run_log(out, f"train start: {len(records)} series, H={H}")
    lines = [f"series: {len(records)}", f"frequency: {freq}", f"horizon: {H}", f"period: {period}"]
    if cfg["ensemble"]:
        slots = build_lookback_ensemble(train_series, H, mcfg, tcfg, cfg["multipliers"], period)
        paths = []
        for slot in slots:
            path = out / f"model_t{slot.lookback}.npz"
            slot.model.save(path, extra)
            (out / f"train_log_t{slot.lookback}.csv").write_text(slot.log.to_csv(), encoding="utf-8")
            paths.append(path.name)
            lines.append(f"lookback {slot.lookback}: used {slot.used}, dropped {slot.dropped}, "
                         f"final val sMAPE {_final_val(slot.log)}")
        (out / "checkpoints.txt").write_text("\n".join(paths) + "\n", encoding="utf-8")
    else:
        model = IDEAModel(mcfg)
        tlog = fit(model, train_series, tcfg, period)
        path = Path(cfg["checkpoint"][0]) if cfg["checkpoint"] else out / "model.npz"
        model.save(path, extra)
        (out / "train_log.csv").write_text(tlog.to_csv(), encoding="utf-8")
        lines += [f"lookback: {mcfg.lookback}", f"used: {tlog.used}", f"dropped: {tlog.dropped}",
                  f"initial val sMAPE: {format_number(tlog.initial_val_smape)}",
                  f"final val sMAPE: {_final_val(tlog)}"]
    _write_summary(out, lines)
    _run_log(out, "train done")
    return 0


def _final_val(tlog) -> str:
    return format_number(tlog.rows[-1][2]) if tlog.rows else "n/a"


def _eval_series(pairs) -> list[EvalSeries]:
    return [EvalSeries(train, test, r.period, r.bucket, r.id) for r, train, test in pairs]


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    records = load_records(cfg)
    models = load_models(cfg) if cfg["checkpoint"] else []
    if not models and not cfg["baseline"]:
        raise CliError("nothing to evaluate: pass --checkpoint and/or --baseline")
    check_compatible(models, records)
    pairs = split_records(cfg, records)
    series = _eval_series(pairs)
    trains = [train for _, train, _ in pairs]
    denom = cfg["mase_denominator"]
    _echo_config(cfg, out)
    rows: list[ScoreRow] = []
    try:
        for name in cfg["baseline"]:
            if name == "naive2":
                fcs = [naive2_forecast(s) for s in series]
            elif name == "naive":
                fcs = [naive_forecast(s.train, s.horizon) for s in series]
            else:
                fcs = [seasonal_naive_forecast(s.train, s.horizon, s.period) for s in series]
            rows += score_method(name, fcs, series, denom)
        if models:
            nets = [m for m, _ in models]
            name = _method_name(nets[0])
            rows += score_method(name, list(ensemble_forecast(nets, trains)), series, denom)
            if len(nets) > 1:
                rows += _slot_average(name + "-slotavg", nets, trains, series, denom)
    except DegenerateSeriesError as exc:
        raise CliError(str(exc)) from None
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        write_score_csv(rows, fh)
    _write_summary(out, [f"{r.method} {r.frequency} {r.metric} {format_number(r.value)}" for r in rows])
    _run_log(out, f"eval: {len(series)} series")
    return 0


def _slot_average(name, nets, trains, series, denom) -> list[ScoreRow]:
    """Per-slot metrics averaged over the slots."""
    acc: dict[tuple, list] = {}
    for net in nets:
        for r in score_method(name, list(ensemble_forecast([net], trains)), series, denom):
            acc.setdefault((r.frequency, r.metric), []).append(r.value)
    return [ScoreRow(name, f, m, float(np.mean(v))) for (f, m), v in acc.items()]


def cmd_forecast(cfg) -> int:
    out = _out_dir(cfg)
    records = load_records(cfg)
    models = load_models(cfg)
    check_compatible(models, records)
    nets = [m for m, _ in models]
    future = {}
    if cfg["test_data"]:
        future = {r.id: r.values for r in load_records(cfg, "test_data")}
    _echo_config(cfg, out)
    shortest = min(n.config.lookback for n in nets)
    failed = []
    rows, plot_rows = [], []
    for r in records:
        if r.values.size < shortest:
            failed.append(r.id)
            print(f"error: series {r.id!r} (length {r.values.size}) is shorter than the lookback {shortest}",
                  file=sys.stderr)
            continue
        fc = ensemble_forecast(nets, [r.values])[0]
        for h, v in enumerate(fc, start=1):
            rows.append([r.id, h, format_number(v)])
        if cfg["plot_data"]:
            t = max(n.config.lookback for n in nets if n.config.lookback <= r.values.size)
            for i, v in enumerate(r.values[-t:]):
                plot_rows.append([r.id, i - t, format_number(v), "", ""])
            y = future.get(r.id)
            for h, v in enumerate(fc):
                known = format_number(y[h]) if y is not None and h < y.size else ""
                plot_rows.append([r.id, h, "", known, format_number(v)])
    with open(out / "forecasts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "step", "forecast"])
        w.writerows(rows)
    if cfg["plot_data"]:
        with open(out / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "position", "x", "y", "yhat"])
            w.writerows(plot_rows)
    _write_summary(out, [f"series: {len(records)}", f"forecast: {len(records) - len(failed)}",
                         f"failed: {len(failed)}"])
    _run_log(out, "forecast done")
    return 1 if failed else 0


# -- distribution-shift experiment ------------------------------------------

def shift_samples(lookback: int, period: int, seed: int, noise_scale: float = 0.05) -> np.ndarray:
    """The 30 windows of the experiment in ``SHIFT_LAYOUT`` order, shape ``(30, t)``."""
    n_typ = SHIFT_LAYOUT.count("typical")
    n_sil = SHIFT_LAYOUT.count("silent")
    typ = generate_synthetic(SyntheticSpec(kind="trend_season", count=n_typ, length=lookback,
                                           period=period, noise_scale=noise_scale, seed=seed))
    sil = generate_synthetic(SyntheticSpec(kind="silent", count=n_sil, length=lookback,
                                           period=period, noise_scale=noise_scale, seed=seed + 1))
    it = {"typical": iter(typ), "silent": iter(sil)}
    return np.stack([next(it[kind]).values for kind in SHIFT_LAYOUT])


def first_group_activations(model: IDEAModel, windows) -> tuple[np.ndarray, np.ndarray]:
    """``(active (N, G) bool, relevance (N, G))`` of the first group, one window at a time."""
    acts, rels = [], []
    for w in np.asarray(windows, dtype=np.float64):
        scale = np.abs(w).max()
        x = w / (scale if scale > 1e-8 else 1.0)
        _, traces = model.forward(x[None, :])
        acts.append(traces[0].activation.active[:, 0])
        rels.append(traces[0].activation.relevance[:, 0])
    return np.array(acts), np.array(rels)


def shift_summary(active: np.ndarray, layout=SHIFT_LAYOUT, switches=SHIFT_SWITCHES) -> dict:
    sets = [tuple(np.flatnonzero(a)) for a in active]
    kinds = np.array(layout)
    modal = {k: Counter(s for s, kk in zip(sets, kinds) if kk == k).most_common(1)[0][0]
             for k in ("typical", "silent")}
    changes = [sets[i] != sets[i - 1] for i in range(1, len(sets))]  # changes[i-1]: i-1 -> i
    near = {}
    for b in switches:
        near[b] = any(changes[j - 1] for j in (b - 1, b, b + 1) if 1 <= j < len(sets))
    return {"sets": sets, "modal": modal, "modal_differs": modal["typical"] != modal["silent"],
            "changed_near_switch": near, "change_rate": float(np.mean(changes)) if changes else 0.0}


def cmd_shift(cfg) -> int:
    out = _out_dir(cfg)
    model, extra = load_models(cfg)[0]
    H, period = _horizon_period(cfg)
    if H is not None and H != model.config.horizon:
        raise CliError(f"horizon mismatch: checkpoint has H={model.config.horizon}, requested {H}")
    period = period or extra.get("period", 1)
    seed = cfg["sample_seed"] if cfg["sample_seed"] is not None else cfg["seed"]
    _echo_config(cfg, out)
    windows = shift_samples(model.config.lookback, period, seed, cfg["noise_scale"])
    active, relevance = first_group_activations(model, windows)
    with open(out / "activations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "learner_index", "activated", "relevance"])
        for i in range(active.shape[0]):
            for g in range(active.shape[1]):
                w.writerow([i, g, int(active[i, g]), repr(float(relevance[i, g]))])
    summ = shift_summary(active)
    lines = ["sample_index is 0-based; add 1 for the 1-based positions of the layout",
             "layout: " + "".join("T" if k == "typical" else "S" for k in SHIFT_LAYOUT),
             f"modal set typical: {list(map(int, summ['modal']['typical']))}",
             f"modal set silent: {list(map(int, summ['modal']['silent']))}",
             f"modal sets differ: {summ['modal_differs']}",
             f"overall change rate: {format_number(summ['change_rate'])}"]
    for b, hit in summ["changed_near_switch"].items():
        lines.append(f"set changes within 1 of switch at sample {b}: {hit}")
    _write_summary(out, lines)
    _run_log(out, "shift-experiment done")
    return 0


def cmd_stats(cfg) -> int:
    out = _out_dir(cfg)
    records = load_records(cfg)
    _echo_config(cfg, out)
    stats = series_stats(records)
    keys = ["frequency", "count", "horizon", "period", "min_length", "mean_length", "max_length"]
    with open(out / "stats.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for s in stats:
            w.writerow([format_number(s[k]) if isinstance(s[k], float) else s[k] for k in keys])
    _write_summary(out, [f"{s['frequency']}: {s['count']} series, length {s['min_length']}-{s['max_length']}"
                         for s in stats])
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "forecast": cmd_forecast,
            "shift-experiment": cmd_shift, "stats": cmd_stats}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg["command"]](cfg)
    except (CliError, DataError, DegenerateSeriesError, dc.ShapeError, ValueError, KeyError,
            OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
