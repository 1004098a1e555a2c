"""Command-line front end: ``airgraph <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig
from .data import (format_timestamp, impute_and_normalize, parse_timestamp, split_rows,
                   synth_generate, write_edges, write_readings, write_stations)
from .moran import knn_weights, local_moran
from .pipeline import (READINGS_FILE, STATIONS_FILE, TRUE_GRAPH_FILE, load_data_dir,
                       model_from_checkpoint, prepare_for_checkpoint, run_training)
from .tensor import no_grad
from .train import LOG_HEADER, EvalReport, baseline_persistence, baseline_seasonal, evaluate

CHECKPOINT_FILE = "checkpoint.ckpt"
LOG_FILE = "train_log.csv"
REPORT_FILE = "eval_report.csv"
SWEEP_PARAMS = {"h": "heads", "b": "blocks", "lambda": "lambda"}

log = logging.getLogger("airgraph")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {d}: {exc.strerror}") from None
    if not d.is_dir():
        raise CliError(f"output path {d} is not a directory")
    return d


def _load_config(path, overrides) -> RunConfig:
    cfg = RunConfig.from_file(path) if path else RunConfig()
    pairs = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return RunConfig.from_pairs(pairs, base=cfg) if pairs else cfg


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- commands ------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        stations, frame, adj = synth_generate(args.nodes, args.steps, args.seed, args.graph)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args.out_dir)
    tag = "config_hash=" + _hash_text(
        f"synth nodes={args.nodes} steps={args.steps} graph={args.graph} seed={args.seed}")
    write_stations(out / STATIONS_FILE, stations, tag)
    write_readings(out / READINGS_FILE, frame, tag)
    write_edges(out / TRUE_GRAPH_FILE, adj, stations.station_ids, tag)
    print(f"wrote {STATIONS_FILE}, {READINGS_FILE}, {TRUE_GRAPH_FILE} to {out}")
    return 0


def _train_to(cfg: RunConfig, data_dir, out: Path, resume: Checkpoint | None = None):
    run = run_training(cfg, data_dir, resume)
    run.checkpoint.save(out / CHECKPOINT_FILE)
    log_path = out / LOG_FILE
    rows = [r.csv() for r in run.result.log]
    if resume is not None and log_path.is_file():
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.writelines(r + "\n" for r in rows)
    else:
        log_path.write_text(
            f"# config_hash={cfg.hash}\n{LOG_HEADER}\n" + "".join(r + "\n" for r in rows),
            encoding="utf-8")
    return run


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    data_dir = args.data_dir or cfg.data_dir
    out_dir = args.out_dir or cfg.out_dir
    if not data_dir or not out_dir:
        raise CliError("train needs --data-dir and --out-dir (or data_dir/out_dir in the config)")
    resume = Checkpoint.load(args.resume) if args.resume else None
    out = _out_dir(out_dir)
    t0 = time.perf_counter()
    run = _train_to(cfg, data_dir, out, resume)
    res = run.result
    print(f"config_hash={cfg.hash} epochs={len(res.log)} steps={res.steps} "
          f"best_epoch={res.best_epoch} best_val_mae={res.best_val_mae:.6g} "
          f"time={time.perf_counter() - t0:.1f}s")
    print(f"wrote {out / CHECKPOINT_FILE} and {out / LOG_FILE}")
    return 0


def _split(prep, name: str):
    return {"train": prep.train, "val": prep.val, "test": prep.test}[name]


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    prep = prepare_for_checkpoint(ckpt, args.data_dir)
    model = model_from_checkpoint(ckpt, prep)
    windows = _split(prep, args.split)
    h = ckpt.config.hash
    report = evaluate(model, windows, h)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / REPORT_FILE
    out.write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    persistence = baseline_persistence(windows, h)
    print(f"# baseline persistence mae={persistence.aggregate_mae:.6g} "
          f"rmse={persistence.aggregate_rmse:.6g}")
    try:
        seasonal = baseline_seasonal(windows, ckpt.config.season_period, h)
        print(f"# baseline seasonal mae={seasonal.aggregate_mae:.6g} rmse={seasonal.aggregate_rmse:.6g}")
    except ValueError as exc:
        print(f"# baseline seasonal unavailable: {exc}")
    print(f"# wrote {out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    prep = prepare_for_checkpoint(ckpt, args.data_dir)
    model = model_from_checkpoint(ckpt, prep)
    cfg = ckpt.config
    frame = prep.frame
    try:
        at = parse_timestamp(args.at)
    except ValueError:
        raise CliError(f"cannot parse timestamp {args.at!r}") from None
    hits = np.nonzero(frame.timestamps == at)[0]
    if hits.size == 0:
        raise CliError(f"timestamp {format_timestamp(at)} is not on the data grid "
                       f"({format_timestamp(frame.timestamps[0])} .. "
                       f"{format_timestamp(frame.timestamps[-1])}, step {frame.interval})")
    end = int(hits[0])
    if end < cfg.in_steps - 1:
        raise CliError(f"timestamp {format_timestamp(at)} has only {end + 1} prior steps, "
                       f"need {cfg.in_steps}")
    x = frame.values[end - cfg.in_steps + 1:end + 1].transpose(1, 0, 2)  # (N, T, C)
    with no_grad():
        y_hat, _, _ = model.forward(x)
    pred = frame.scaler.denormalize(y_hat.data[..., 0], prep.target_index)  # (N, tau)
    target = frame.features[prep.target_index]
    lines = [f"# config_hash={cfg.hash}", f"# window_end={format_timestamp(at)}",
             f"timestamp,station_id,horizon,{target}"]
    for n, sid in enumerate(prep.stations.station_ids):
        for h in range(cfg.out_steps):
            ts = format_timestamp(at + (h + 1) * frame.interval)
            lines.append(f"{ts},{sid},{h + 1},{float(pred[n, h])!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_graph_export(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    prep = prepare_for_checkpoint(ckpt, args.data_dir)
    model = model_from_checkpoint(ckpt, prep)
    windows = _split(prep, args.split)
    total = np.zeros((model.config.n_nodes,) * 2)
    with no_grad():
        for i in range(0, len(windows), 256):
            idx = np.arange(i, min(i + 256, len(windows)))
            g = model.graph(windows.inputs(idx))
            total += g.a_fused.data.sum(axis=0)
    adj = total / max(len(windows), 1)
    write_edges(args.out, adj, prep.stations.station_ids, f"config_hash={ckpt.config.hash}",
                include_zero=args.include_zero)
    print(f"wrote {args.out} ({len(windows)} {args.split} windows averaged)")
    return 0


def cmd_moran(args) -> int:
    stations, frame = load_data_dir(args.data_dir)
    n = len(stations)
    if not 1 <= args.k < n:
        raise CliError(f"--k must satisfy 1 <= k < n_stations (k={args.k}, n={n})")
    w = knn_weights(stations.coords, args.k)
    c = frame.feature_index(args.feature)
    # Moran values are invariant to the per-feature affine normalisation, so the imputed
    # normalised series gives the same statistic as the raw one.
    train_rows = split_rows(frame.n_steps, RunConfig().split)[0]
    filled = impute_and_normalize(frame, train_rows).values[..., c]
    m = local_moran(filled, w)  # (time, N)
    tag = _hash_text(f"moran k={args.k} feature={args.feature}")
    lines = [f"# config_hash={tag}", "timestamp,station_id,local_moran"]
    for t, ts in enumerate(frame.timestamps):
        stamp = format_timestamp(ts)
        lines += [f"{stamp},{sid},{float(m[t, i])!r}" for i, sid in enumerate(stations.station_ids)]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out} ({frame.n_steps} timestamps x {n} stations)")
    return 0


def degradation_table(values: list[str], reports: list[EvalReport]):
    """Rows of (value, mae, rmse, mae % worse than best, rmse % worse than best)."""
    maes = [r.aggregate_mae for r in reports]
    rmses = [r.aggregate_rmse for r in reports]
    best_mae, best_rmse = min(maes), min(rmses)
    rows = []
    for v, m, r in zip(values, maes, rmses):
        rows.append((v, m, r, 100.0 * (m - best_mae) / best_mae if best_mae > 0 else 0.0,
                     100.0 * (r - best_rmse) / best_rmse if best_rmse > 0 else 0.0))
    return rows


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise CliError(f"unknown sweep parameter {args.param!r} (choose from h, b, lambda)")
    base = _load_config(args.config, args.set)
    data_dir = args.data_dir or base.data_dir
    out_dir = args.out_dir or base.out_dir
    if not data_dir or not out_dir:
        raise CliError("sweep needs --data-dir and --out-dir (or data_dir/out_dir in the config)")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise CliError("--values is empty")
    out = _out_dir(out_dir)
    key = SWEEP_PARAMS[args.param]
    reports = []
    for i, v in enumerate(values):
        cfg = RunConfig.from_pairs({key: v}, base=base)
        run_dir = _out_dir(out / f"run{i:02d}_{args.param}={v}")
        run = _train_to(cfg, data_dir, run_dir)
        report = evaluate(run.model, run.prep.test, cfg.hash)
        (run_dir / REPORT_FILE).write_text(report.to_csv(), encoding="utf-8")
        reports.append(report)
        print(f"{args.param}={v}: mae={report.aggregate_mae:.6g} rmse={report.aggregate_rmse:.6g}")
    lines = [f"# config_hash={base.hash}",
             "param,value,mae,rmse,mae_degradation_pct,rmse_degradation_pct"]
    for v, m, r, dm, dr in degradation_table(values, reports):
        lines.append(f"{args.param},{v},{m!r},{r!r},{dm!r},{dr!r}")
    path = out / "sweep.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


# -- entry point ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="airgraph", description="Adaptive-graph air-quality forecasting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset with a known graph")
    s.add_argument("--nodes", type=int, default=12)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--graph", choices=["ring", "clusters", "random"], default="ring")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    def run_opts(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--data-dir")
        sp.add_argument("--out-dir")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train a model and write checkpoint + log")
    run_opts(t)
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    def ckpt_opts(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data-dir", required=True)

    e = sub.add_parser("evaluate", help="per-horizon MAE/RMSE of a checkpoint")
    ckpt_opts(e)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--out", help=f"report path (default: {REPORT_FILE} next to the checkpoint)")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="forecast the steps after a given timestamp")
    ckpt_opts(pr)
    pr.add_argument("--at", required=True, help="ISO-8601 timestamp of the last input step")
    pr.add_argument("--out", help="CSV path (default: stdout)")
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("graph-export", help="write the mean learned adjacency as edges")
    ckpt_opts(g)
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=["train", "val", "test"], default="test")
    g.add_argument("--include-zero", action="store_true", help="also write zero-weight edges")
    g.set_defaults(func=cmd_graph_export)

    m = sub.add_parser("moran", help="local Moran statistic per station and timestamp")
    m.add_argument("--data-dir", required=True)
    m.add_argument("--k", type=int, default=8)
    m.add_argument("--feature", default="PM2.5")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_moran)

    sw = sub.add_parser("sweep", help="train/evaluate once per value of one parameter")
    run_opts(sw)
    sw.add_argument("--param", required=True, help="h (heads), b (blocks) or lambda")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).strip().replace("\n", " ") or type(exc).__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
