"""Glue between files on disk, the run configuration, the model and checkpoints."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptive import build_initial_adjacency
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .data import (DataError, Scaler, StationTable, ReadingsFrame, WindowSet, drop_sparse_stations,
                   impute_and_normalize, load_csv, make_windows, split_rows)
from .model import STForecaster
from .moran import SpatialWeights, knn_weights
from .train import TrainResult, train

STATIONS_FILE = "stations.csv"
READINGS_FILE = "readings.csv"
TRUE_GRAPH_FILE = "true_graph.csv"


class ShapeConflict(ValueError):
    """Checkpoint and data disagree on nodes, features or window lengths."""


@dataclass
class Prepared:
    stations: StationTable
    frame: ReadingsFrame  # imputed and normalised
    train: WindowSet
    val: WindowSet
    test: WindowSet
    a0: np.ndarray
    weights: SpatialWeights
    target_index: int


def load_data_dir(data_dir) -> tuple[StationTable, ReadingsFrame]:
    d = Path(data_dir)
    for name in (STATIONS_FILE, READINGS_FILE):
        if not (d / name).is_file():
            raise DataError(f"missing input file: {d / name}")
    return load_csv(d / STATIONS_FILE, d / READINGS_FILE)


def prepare(data_dir, cfg: RunConfig, scaler: Scaler | None = None,
            keep_ids: list[str] | None = None) -> Prepared:
    """Load, clean, normalise and window a data directory.

    ``keep_ids`` pins the station set (used when a checkpoint already fixed it); otherwise
    stations with more than ``cfg.max_missing`` missing values are dropped.
    """
    stations, frame = load_data_dir(data_dir)
    if keep_ids is None:
        stations, frame = drop_sparse_stations(stations, frame, cfg.max_missing)
    else:
        missing = [s for s in keep_ids if s not in stations.station_ids]
        if missing or len(keep_ids) != len(stations):
            raise ShapeConflict(
                f"shape conflict: checkpoint expects {len(keep_ids)} stations, data has "
                f"{len(stations)}" + (f" (absent: {', '.join(missing[:5])})" if missing else "")
            )
        order = [stations.station_ids.index(s) for s in keep_ids]
        stations = stations.subset(order)
        frame = _reorder(frame, order)
    if len(stations) < 2:
        raise DataError("need at least two stations after cleaning")
    target_index = frame.feature_index(cfg.target)
    train_rows = split_rows(frame.n_steps, cfg.split)[0]
    frame = impute_and_normalize(frame, train_rows, scaler)
    sets = make_windows(frame, cfg.in_steps, cfg.out_steps, cfg.stride, cfg.split, target_index)
    a0 = build_initial_adjacency(stations.coords, cfg.sigma_km, cfg.adj_threshold)
    weights = knn_weights(stations.coords, min(cfg.moran_k, len(stations) - 1))
    if cfg.use_moran:
        for s in sets:
            s.attach_moran(weights)
    return Prepared(stations, frame, *sets, a0, weights, target_index)


def _reorder(frame: ReadingsFrame, order: list[int]) -> ReadingsFrame:
    return ReadingsFrame(frame.timestamps, [frame.station_ids[i] for i in order],
                         list(frame.features), frame.values[:, order], frame.mask[:, order],
                         frame.scaler)


def build_model(cfg: RunConfig, prep: Prepared) -> STForecaster:
    mc = cfg.model_config(len(prep.stations), len(prep.frame.features), prep.target_index)
    return STForecaster(mc, prep.a0, seed=cfg.seed)


# -- checkpoints -------------------------------------------------------------------------------


def make_checkpoint(cfg: RunConfig, model: STForecaster, prep: Prepared, epoch: int = 0,
                    best_epoch: int = 0, optimizer_state: dict | None = None) -> Checkpoint:
    meta = {
        "n_nodes": str(model.config.n_nodes),
        "in_features": str(model.config.in_features),
        "features": ";".join(prep.frame.features),
        "stations": ";".join(prep.stations.station_ids),
        "target_index": str(prep.target_index),
        "epoch": str(epoch),
        "best_epoch": str(best_epoch),
    }
    tensors = OrderedDict((f"param.{k}", p.data) for k, p in model.params.items())
    tensors["buffer.a0"] = model.a0
    tensors["buffer.scaler.mean"] = prep.frame.scaler.mean
    tensors["buffer.scaler.std"] = prep.frame.scaler.std
    for k, v in sorted((optimizer_state or {}).items()):
        tensors[f"opt.{k}"] = v
    return Checkpoint(cfg, meta, tensors)


def prepare_for_checkpoint(ckpt: Checkpoint, data_dir) -> Prepared:
    """Load data under the checkpoint's configuration, station order and normalisation."""
    t = ckpt.tensors
    scaler = Scaler(t["buffer.scaler.mean"], t["buffer.scaler.std"])
    ids = ckpt.meta["stations"].split(";")
    features = ckpt.meta["features"].split(";")
    stations, frame = load_data_dir(data_dir)
    if frame.features != features:
        raise ShapeConflict(
            f"shape conflict: checkpoint expects {len(features)} features ({', '.join(features)}), "
            f"data has {len(frame.features)} ({', '.join(frame.features)})"
        )
    return prepare(data_dir, ckpt.config, scaler, keep_ids=ids)


def model_from_checkpoint(ckpt: Checkpoint, prep: Prepared) -> STForecaster:
    cfg = ckpt.config
    n_nodes = int(ckpt.meta["n_nodes"])
    n_feat = int(ckpt.meta["in_features"])
    if (len(prep.stations), len(prep.frame.features)) != (n_nodes, n_feat):
        raise ShapeConflict(
            f"shape conflict: checkpoint expects {n_nodes} nodes x {n_feat} features, data has "
            f"{len(prep.stations)} x {len(prep.frame.features)}"
        )
    model = STForecaster(cfg.model_config(n_nodes, n_feat, int(ckpt.meta["target_index"])),
                         ckpt.tensors["buffer.a0"], seed=cfg.seed)
    stored = ckpt.params()
    if list(stored) != list(model.params):
        raise CheckpointError("checkpoint parameter set does not match its configuration")
    for name, p in model.params.items():
        if stored[name].shape != p.shape:
            raise ShapeConflict(
                f"shape conflict: parameter {name} expected {p.shape}, checkpoint has {stored[name].shape}"
            )
        p.data = stored[name].copy()
    return model


# -- training run -------------------------------------------------------------------------------


@dataclass
class RunOutput:
    checkpoint: Checkpoint
    result: TrainResult
    model: STForecaster
    prep: Prepared


def run_training(cfg: RunConfig, data_dir, resume: Checkpoint | None = None) -> RunOutput:
    if resume is not None:
        if resume.config.hash != cfg.hash:
            # training knobs may change on resume; the architecture may not
            mc_old = resume.config.model_config(1, 1, 0)
            mc_new = cfg.model_config(1, 1, 0)
            if mc_old != mc_new or resume.config.target != cfg.target:
                raise ShapeConflict("shape conflict: resume config changes the model architecture")
        prep = prepare_for_checkpoint(resume, data_dir)
        model = model_from_checkpoint(resume, prep)
        start = int(resume.meta["epoch"])
        opt_state = resume.optimizer_state()
    else:
        prep = prepare(data_dir, cfg)
        model = build_model(cfg, prep)
        start, opt_state = 0, None
    result = train(model, prep.train, prep.val, cfg.train_config(), start_epoch=start,
                   optimizer_state=opt_state)
    best_epoch = result.best_epoch if result.log else int(resume.meta["best_epoch"]) if resume else 0
    ckpt = make_checkpoint(cfg, model, prep, result.last_epoch, best_epoch, result.optimizer_state)
    return RunOutput(ckpt, result, model, prep)
