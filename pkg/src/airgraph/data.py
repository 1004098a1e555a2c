"""Station/readings ingestion, imputation, normalisation, windowing and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .moran import SpatialWeights, moran_targets

DEFAULT_SPLIT = (0.7, 0.1, 0.2)
STD_FLOOR = 1e-6


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# -- containers ------------------------------------------------------------------------


@dataclass
class StationTable:
    station_ids: list[str]
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        if len(set(self.station_ids)) != len(self.station_ids):
            raise DataError("duplicate station ids")
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise DataError("station coordinates out of range")

    def __len__(self) -> int:
        return len(self.station_ids)

    @property
    def coords(self) -> list[tuple[float, float]]:
        return list(zip(self.lat.tolist(), self.lon.tolist()))

    def subset(self, keep: Sequence[int]) -> "StationTable":
        return StationTable([self.station_ids[i] for i in keep], self.lat[keep], self.lon[keep])


@dataclass
class Scaler:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,), already floored

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray, feature: int | None = None) -> np.ndarray:
        if feature is None:
            return values * self.std + self.mean
        return values * self.std[feature] + self.mean[feature]


@dataclass
class ReadingsFrame:
    timestamps: np.ndarray  # datetime64[s], strictly increasing, uniform
    station_ids: list[str]
    features: list[str]
    values: np.ndarray  # (time, N, C); NaN where missing until imputed
    mask: np.ndarray  # (time, N, C); True where the value was originally absent
    scaler: Scaler | None = None

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def interval(self) -> np.timedelta64:
        if self.n_steps < 2:
            raise DataError("interval undefined for fewer than two timestamps")
        return self.timestamps[1] - self.timestamps[0]

    def feature_index(self, name: str) -> int:
        try:
            return self.features.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}; available: {', '.join(self.features)}") from None


# -- CSV I/O ----------------------------------------------------------------------------


def parse_timestamp(text: str) -> np.datetime64:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    dt = datetime.fromisoformat(t)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


def _rows(path: Path):
    """Yield (line_number, row) skipping blank lines and '#' comments."""
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].startswith("#")):
                continue
            yield lineno, row


def _parse_float(text: str, path, lineno: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {column!r}: cannot parse {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: column {column!r}: non-finite value {text!r}")
    return v


def load_stations(path) -> StationTable:
    path = Path(path)
    rows = _rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    if [h.strip() for h in header] != ["station_id", "lat", "lon"]:
        raise DataError(f"{path}:1: expected header station_id,lat,lon, got {','.join(header)}")
    ids, lat, lon = [], [], []
    for lineno, row in rows:
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        sid = row[0].strip()
        if sid in ids:
            raise DataError(f"{path}:{lineno}: duplicate station_id {sid!r}")
        la = _parse_float(row[1], path, lineno, "lat")
        lo = _parse_float(row[2], path, lineno, "lon")
        if not (-90 <= la <= 90 and -180 <= lo <= 180):
            raise DataError(f"{path}:{lineno}: coordinates ({la}, {lo}) out of range")
        ids.append(sid)
        lat.append(la)
        lon.append(lo)
    if not ids:
        raise DataError(f"{path}: no stations")
    return StationTable(ids, np.array(lat), np.array(lon))


def load_readings(path, stations: StationTable) -> ReadingsFrame:
    path = Path(path)
    rows = _rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    if header[:2] != ["timestamp", "station_id"] or len(header) < 3:
        raise DataError(f"{path}:1: expected header timestamp,station_id,<features...>")
    features = header[2:]
    index = {sid: i for i, sid in enumerate(stations.station_ids)}
    records: dict[tuple[np.datetime64, int], list[float]] = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            ts = parse_timestamp(row[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: column 'timestamp': cannot parse {row[0]!r}") from None
        sid = row[1].strip()
        if sid not in index:
            raise DataError(f"{path}:{lineno}: unknown station {sid!r}")
        key = (ts, index[sid])
        if key in records:
            raise DataError(f"{path}:{lineno}: duplicate reading for {sid} at {row[0]}")
        records[key] = [
            math.nan if cell.strip() == "" else _parse_float(cell, path, lineno, name)
            for cell, name in zip(row[2:], features)
        ]
    if not records:
        raise DataError(f"{path}: no readings")
    stamps = np.array(sorted({k[0] for k in records}), dtype="datetime64[s]")
    if len(stamps) > 1:
        steps = np.diff(stamps)
        if np.any(steps != steps[0]):
            bad = int(np.argmax(steps != steps[0]))
            raise DataError(
                f"{path}: non-uniform timestamp interval: {format_timestamp(stamps[bad])} -> "
                f"{format_timestamp(stamps[bad + 1])} differs from {steps[0]}"
            )
    row_of = {ts: i for i, ts in enumerate(stamps.tolist())}
    values = np.full((len(stamps), len(stations), len(features)), np.nan)
    for (ts, node), vals in records.items():
        values[row_of[ts.item()], node] = vals
    return ReadingsFrame(stamps, list(stations.station_ids), features, values, np.isnan(values))


def load_csv(stations_path, readings_path) -> tuple[StationTable, ReadingsFrame]:
    stations = load_stations(stations_path)
    return stations, load_readings(readings_path, stations)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_stations(path, stations: StationTable, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "lat", "lon"])
        for sid, la, lo in zip(stations.station_ids, stations.lat, stations.lon):
            w.writerow([sid, repr(float(la)), repr(float(lo))])


def write_readings(path, frame: ReadingsFrame, comment: str | None = None) -> None:
    vals = np.where(frame.mask, np.nan, frame.values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "station_id", *frame.features])
        for t, ts in enumerate(frame.timestamps):
            stamp = format_timestamp(ts)
            for n, sid in enumerate(frame.station_ids):
                w.writerow([stamp, sid, *(_fmt(v) for v in vals[t, n])])


def write_edges(path, adjacency: np.ndarray, station_ids: Sequence[str],
                comment: str | None = None, include_zero: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for i, src in enumerate(station_ids):
            for j, dst in enumerate(station_ids):
                if include_zero or adjacency[i, j] != 0:
                    w.writerow([src, dst, repr(float(adjacency[i, j]))])


def load_edges(path, station_ids: Sequence[str]) -> np.ndarray:
    index = {sid: i for i, sid in enumerate(station_ids)}
    a = np.zeros((len(station_ids), len(station_ids)))
    rows = _rows(Path(path))
    next(rows)
    for lineno, row in rows:
        try:
            a[index[row[0]], index[row[1]]] = _parse_float(row[2], path, lineno, "weight")
        except KeyError:
            raise DataError(f"{path}:{lineno}: unknown station in edge {row[0]}->{row[1]}") from None
    return a


# -- cleaning ----------------------------------------------------------------------------


def drop_sparse_stations(stations: StationTable, frame: ReadingsFrame,
                         max_missing: float = 0.5) -> tuple[StationTable, ReadingsFrame]:
    """Exclude stations whose share of missing cells exceeds ``max_missing``."""
    missing = frame.mask.mean(axis=(0, 2))
    keep = [i for i, m in enumerate(missing) if m <= max_missing]
    if not keep:
        raise DataError("every station exceeds the missing-data threshold")
    if len(keep) == len(stations):
        return stations, frame
    return stations.subset(keep), replace(
        frame,
        station_ids=[frame.station_ids[i] for i in keep],
        values=frame.values[:, keep],
        mask=frame.mask[:, keep],
    )


def _forward_fill(values: np.ndarray) -> np.ndarray:
    out = values.copy()
    for t in range(1, out.shape[0]):
        gap = np.isnan(out[t])
        out[t][gap] = out[t - 1][gap]
    return out


def impute_and_normalize(frame: ReadingsFrame, train_range: tuple[int, int],
                         scaler: Scaler | None = None) -> ReadingsFrame:
    """Forward-fill, fill leading gaps with the train mean, z-score with train statistics.

    Passing ``scaler`` reuses previously fitted statistics (e.g. from a checkpoint).
    """
    start, stop = train_range
    if not 0 <= start < stop <= frame.n_steps:
        raise DataError(f"train range {train_range} outside frame of {frame.n_steps} steps")
    raw = np.where(frame.mask, np.nan, frame.values)
    if scaler is None:
        train = raw[start:stop]
        mean = np.empty(len(frame.features))
        std = np.empty(len(frame.features))
        for c, name in enumerate(frame.features):
            obs = train[..., c][~np.isnan(train[..., c])]
            if obs.size == 0:
                raise DataError(f"feature {name!r} is entirely missing in the training split")
            mean[c] = obs.mean()
            std[c] = max(obs.std(), STD_FLOOR)
        scaler = Scaler(mean, std)
    elif np.shape(scaler.mean) != (len(frame.features),):
        raise DataError(f"scaler has {np.size(scaler.mean)} features, frame has {len(frame.features)}")
    filled = _forward_fill(raw)
    filled = np.where(np.isnan(filled), scaler.mean, filled)
    return replace(frame, values=scaler.normalize(filled), mask=frame.mask.copy(), scaler=scaler)


# -- windows -------------------------------------------------------------------------------


def split_rows(n: int, split: Sequence[float] = DEFAULT_SPLIT) -> list[tuple[int, int]]:
    """Chronological train/val/test row ranges: floor for train and val, remainder to test."""
    if len(split) != 3 or any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
        raise DataError(f"split must be three non-negative fractions summing to 1, got {split}")
    n_train = math.floor(round(split[0] * n, 9))
    n_val = math.floor(round(split[1] * n, 9))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)]


@dataclass
class WindowBatch:
    x: np.ndarray  # (B, N, T, C)
    y: np.ndarray  # (B, N, tau, 1)
    y_mask: np.ndarray  # (B, N, tau, 1), True where the target was originally missing
    y_moran: np.ndarray | None  # (B, N, tau, 1)
    starts: np.ndarray  # (B,) row index of each window's first input step


@dataclass
class WindowSet:
    """Windows over one split; inputs are materialised lazily from the shared frame."""

    values: np.ndarray  # (time, N, C) normalised values of the whole frame
    mask: np.ndarray
    target_index: int
    in_steps: int
    out_steps: int
    starts: np.ndarray
    row_range: tuple[int, int]
    scaler: Scaler | None = None
    y_moran: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.starts)

    def _take(self, arr: np.ndarray, starts: np.ndarray, offset: int, length: int) -> np.ndarray:
        idx = starts[:, None] + offset + np.arange(length)
        return arr[idx].transpose(0, 2, 1, 3)  # (B, N, L, C)

    def inputs(self, idx=None) -> np.ndarray:
        s = self.starts if idx is None else self.starts[idx]
        return self._take(self.values, s, 0, self.in_steps)

    def targets(self, idx=None) -> np.ndarray:
        s = self.starts if idx is None else self.starts[idx]
        c = self.target_index
        return self._take(self.values[..., c:c + 1], s, self.in_steps, self.out_steps)

    def target_mask(self, idx=None) -> np.ndarray:
        s = self.starts if idx is None else self.starts[idx]
        c = self.target_index
        return self._take(self.mask[..., c:c + 1], s, self.in_steps, self.out_steps)

    def batch(self, idx) -> WindowBatch:
        idx = np.asarray(idx)
        ym = None if self.y_moran is None else self.y_moran[idx]
        return WindowBatch(self.inputs(idx), self.targets(idx), self.target_mask(idx), ym,
                           self.starts[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[WindowBatch]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size])

    def attach_moran(self, weights: SpatialWeights) -> "WindowSet":
        """Precompute local-Moran targets from denormalised ground truth."""
        y = self.targets()
        if self.scaler is not None:
            y = self.scaler.denormalize(y, self.target_index)
        self.y_moran = moran_targets(y, weights)
        return self


def make_windows(frame: ReadingsFrame, in_steps: int, out_steps: int, stride: int = 1,
                 split: Sequence[float] = DEFAULT_SPLIT, target_index: int = 0) -> list[WindowSet]:
    """Train/val/test window sets; windows never cross a split boundary."""
    if in_steps < 1 or out_steps < 1 or stride < 1:
        raise DataError("in_steps, out_steps and stride must be positive")
    sets = []
    for name, (lo, hi) in zip(("train", "val", "test"), split_rows(frame.n_steps, split)):
        if hi - lo < in_steps + out_steps:
            raise DataError(
                f"{name} split has {hi - lo} rows, fewer than in_steps+out_steps={in_steps + out_steps}"
            )
        starts = np.arange(lo, hi - in_steps - out_steps + 1, stride)
        sets.append(WindowSet(frame.values, frame.mask, target_index, in_steps, out_steps,
                              starts, (lo, hi), frame.scaler))
    return sets


def single_window_set(frame: ReadingsFrame, in_steps: int, out_steps: int,
                      target_index: int = 0, stride: int = 1) -> WindowSet:
    """All windows of the whole series treated as one split."""
    n = frame.n_steps
    if n < in_steps + out_steps:
        raise DataError(f"series of {n} rows is shorter than in_steps+out_steps")
    starts = np.arange(0, n - in_steps - out_steps + 1, stride)
    return WindowSet(frame.values, frame.mask, target_index, in_steps, out_steps, starts, (0, n),
                     frame.scaler)


# -- synthetic data --------------------------------------------------------------------------

SYNTH_FEATURES = ["PM2.5", "temperature"]
SYNTH_START = np.datetime64("2020-01-01T00:00:00", "s")
_KM_PER_DEG = 111.195
RING_RADIUS_KM = 600.0


def _offset(lat0: float, lon0: float, dx_km, dy_km):
    lat = lat0 + np.asarray(dy_km) / _KM_PER_DEG
    lon = lon0 + np.asarray(dx_km) / (_KM_PER_DEG * math.cos(math.radians(lat0)))
    return lat, lon


def _synthetic_layout(n: int, kind: str, rng: np.random.Generator):
    """Coordinates and binary symmetric true graph (no self-loops)."""
    a = np.zeros((n, n))
    if kind == "ring":
        # radius chosen so ring neighbours sit ~310 km apart (12 nodes), typical city spacing
        theta = 2 * np.pi * np.arange(n) / n
        lat, lon = _offset(30.0, 115.0, RING_RADIUS_KM * np.cos(theta), RING_RADIUS_KM * np.sin(theta))
        if n > 1:
            for i in range(n):
                a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    elif kind == "clusters":
        group = (np.arange(n) >= (n + 1) // 2).astype(int)
        centers = [(30.0, 110.0), (30.0, 125.0)]
        lat, lon = np.empty(n), np.empty(n)
        for i in range(n):
            r = 80 * math.sqrt(rng.uniform(0.1, 1.0))
            ang = rng.uniform(0, 2 * np.pi)
            lat[i], lon[i] = _offset(*centers[group[i]], r * math.cos(ang), r * math.sin(ang))
        a = (group[:, None] == group[None, :]).astype(float)
        np.fill_diagonal(a, 0.0)
    elif kind == "random":
        lat = rng.uniform(25.0, 40.0, n)
        lon = rng.uniform(105.0, 122.0, n)
        p = min(1.0, 3.0 / max(n - 1, 1))
        upper = np.triu(rng.uniform(size=(n, n)) < p, k=1)
        a = (upper | upper.T).astype(float)
    else:
        raise ValueError(f"unknown graph kind {kind!r} (ring, clusters, random)")
    return lat, lon, a


def synth_generate(n_nodes: int, steps: int, seed: int, graph_kind: str = "ring", *,
                   alpha: float = 0.8, noise: float = 0.1, amplitude: float = 1.0,
                   period: int = 24, interval_hours: int = 1, burn_in: int = 100):
    """Graph-diffusion series x_{t+1} = alpha * A_hat x_t + seasonal(t) + noise.

    ``A_hat`` is the row-normalised true graph with self-loops. Returns
    ``(stations, frame, true_adjacency)``; fully determined by ``seed``.
    """
    if steps < 200:
        raise ValueError(f"steps must be >= 200, got {steps}")
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    rng = np.random.default_rng(seed)
    lat, lon, adj = _synthetic_layout(n_nodes, graph_kind, rng)
    a_hat = adj + np.eye(n_nodes)
    a_hat /= a_hat.sum(axis=1, keepdims=True)

    total = steps + burn_in
    t_axis = np.arange(total)
    seasonal = amplitude * np.sin(2 * np.pi * t_axis / period)
    eps = rng.normal(0.0, 1.0, (total, n_nodes)) * noise
    x = np.zeros((total, n_nodes))
    for t in range(1, total):
        x[t] = alpha * (a_hat @ x[t - 1]) + seasonal[t - 1] + eps[t]
    temp_noise = rng.normal(0.0, 1.0, (total, n_nodes)) * noise
    temperature = 10.0 * amplitude * np.cos(2 * np.pi * t_axis / period)[:, None] + temp_noise

    values = np.stack([x, temperature], axis=-1)[burn_in:]
    stamps = SYNTH_START + np.arange(steps) * np.timedelta64(interval_hours * 3600, "s")
    ids = [f"S{i:03d}" for i in range(n_nodes)]
    stations = StationTable(ids, lat, lon)
    frame = ReadingsFrame(stamps, ids, list(SYNTH_FEATURES), values,
                          np.zeros(values.shape, dtype=bool))
    return stations, frame, adj
