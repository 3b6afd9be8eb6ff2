"""CSV ingestion, train-split normalization and sliding windows."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import ROAD_TYPES, RoadGraph, SchemaError


class InsufficientDataError(ValueError):
    pass


@dataclass
class RawData:
    speeds: np.ndarray  # [T, N, P]
    features: np.ndarray  # [T, N, L]
    feature_names: tuple[str, ...]
    node_ids: tuple[str, ...]

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.speeds.ndim == 2:
            self.speeds = self.speeds[:, :, None]
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[:2] != self.speeds.shape[:2]:
            raise ValueError(f"features {self.features.shape} vs speeds {self.speeds.shape}")

    @property
    def n_steps(self) -> int:
        return self.speeds.shape[0]


def _forward_fill(a: np.ndarray) -> np.ndarray:
    """Fill NaNs down each column with the last seen value; leading gaps become 0."""
    a = a.copy()
    for t in range(1, a.shape[0]):
        gap = np.isnan(a[t])
        a[t, gap] = a[t - 1, gap]
    return np.nan_to_num(a, nan=0.0)


def read_node_csv(path: Path, node_ids: tuple[str, ...]) -> np.ndarray:
    """Read a time-by-node CSV and reorder columns to ``node_ids``."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError(f"missing data file {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        pos = {h: k for k, h in enumerate(header)}
        for nid in node_ids:
            if nid not in pos:
                raise SchemaError(f"{path.name}: missing column for node {nid!r}")
        cols = [pos[nid] for nid in node_ids]
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path.name} line {line}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for c in cols:
                cell = row[c].strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise SchemaError(f"{path.name} line {line}, column {header[c]!r}: "
                                      f"non-numeric cell {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return np.array(rows, dtype=np.float64)


def ingest(data_dir: str | Path, graph: RoadGraph) -> RawData:
    """Load ``speeds.csv`` and every ``features_<name>.csv`` (names sorted)."""
    d = Path(data_dir)
    speeds = _forward_fill(read_node_csv(d / "speeds.csv", graph.node_ids))
    names = sorted(p.stem[len("features_"):] for p in d.glob("features_*.csv"))
    feats = []
    for name in names:
        f = _forward_fill(read_node_csv(d / f"features_{name}.csv", graph.node_ids))
        if f.shape != speeds.shape:
            raise SchemaError(f"features_{name}.csv has {f.shape[0]} rows, speeds.csv has {speeds.shape[0]}")
        feats.append(f)
    features = np.stack(feats, axis=-1) if feats else np.zeros(speeds.shape + (0,))
    return RawData(speeds, features, tuple(names), graph.node_ids)


# ------------------------------------------------------------ normalization

FEATURE_KINDS = {"I": "binary", "O": "ratio", "L": "onehot"}


def feature_kind(name: str) -> str:
    return FEATURE_KINDS.get(name, "minmax")


@dataclass(frozen=True)
class NormalizationSpec:
    """Min/max per channel, taken from the training split only."""

    state_min: np.ndarray
    state_max: np.ndarray
    feature_names: tuple[str, ...]
    feature_min: np.ndarray
    feature_max: np.ndarray

    @staticmethod
    def _scale(v, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (v - lo) / safe, 0.0)
        return np.clip(out, 0.0, 1.0)

    def normalize_states(self, v: np.ndarray) -> np.ndarray:
        return self._scale(v, self.state_min, self.state_max)

    def denormalize_states(self, u: np.ndarray) -> np.ndarray:
        return u * (self.state_max - self.state_min) + self.state_min

    def feature_layout(self) -> list[tuple[str, list[int]]]:
        """Expanded column indices per named factor."""
        layout, k = [], 0
        for name in self.feature_names:
            width = len(ROAD_TYPES) if feature_kind(name) == "onehot" else 1
            layout.append((name, list(range(k, k + width))))
            k += width
        return layout

    @property
    def expanded_width(self) -> int:
        return sum(len(cols) for _, cols in self.feature_layout())

    def transform_features(self, f: np.ndarray) -> np.ndarray:
        """``[T, N, L]`` raw channels to ``[T, N, L']`` model inputs."""
        out = []
        for k, name in enumerate(self.feature_names):
            col = f[..., k]
            kind = feature_kind(name)
            if kind in ("binary", "ratio"):
                out.append(col[..., None])
            elif kind == "onehot":
                out.append(np.stack([(col == r).astype(np.float64) for r in ROAD_TYPES], axis=-1))
            else:
                out.append(self._scale(col, self.feature_min[k], self.feature_max[k])[..., None])
        if not out:
            return np.zeros(f.shape[:2] + (0,))
        return np.concatenate(out, axis=-1)

    @classmethod
    def fit(cls, raw: RawData) -> "NormalizationSpec":
        s, f = raw.speeds, raw.features
        return cls(s.min(axis=(0, 1)), s.max(axis=(0, 1)), tuple(raw.feature_names),
                   f.min(axis=(0, 1)) if f.shape[-1] else np.zeros(0),
                   f.max(axis=(0, 1)) if f.shape[-1] else np.zeros(0))


@dataclass
class WindowSource:
    """One contiguous, normalized split."""

    x: np.ndarray  # [T_split, N, P]
    z: np.ndarray  # [T_split, N, L']
    offset: int  # absolute index of the first step
    name: str = ""

    def __len__(self) -> int:
        return self.x.shape[0]


def _slice(raw: RawData, lo: int, hi: int) -> RawData:
    return RawData(raw.speeds[lo:hi], raw.features[lo:hi], raw.feature_names, raw.node_ids)


def split_bounds(n_steps: int, ratios: tuple[float, float, float]) -> list[tuple[int, int]]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    a = int(n_steps * ratios[0])
    b = a + int(n_steps * ratios[1])
    return [(0, a), (a, b), (b, n_steps)]


def split_and_normalize(raw: RawData, ratios=(0.7, 0.1, 0.2), history: int = 12,
                        horizon: int = 3) -> tuple[WindowSource, WindowSource, WindowSource, NormalizationSpec]:
    """Chronological train/val/test split; min/max are fitted on train only."""
    bounds = split_bounds(raw.n_steps, tuple(ratios))
    for (lo, hi), name in zip(bounds, ("train", "val", "test")):
        if hi - lo < history + horizon:
            raise InsufficientDataError(f"{name} split has {hi - lo} steps, needs at least {history + horizon}")
    spec = NormalizationSpec.fit(_slice(raw, *bounds[0]))
    sources = []
    for (lo, hi), name in zip(bounds, ("train", "val", "test")):
        x = spec.normalize_states(raw.speeds[lo:hi])
        z = spec.transform_features(raw.features[lo:hi])
        sources.append(WindowSource(x, z, lo, name))
    return sources[0], sources[1], sources[2], spec


# ------------------------------------------------------------------ windows


@dataclass
class StateWindow:
    x: np.ndarray  # [Q, N, P]
    z: np.ndarray  # [Q, N, L']
    y: np.ndarray  # [T, N, P]
    t0: int


def window_count(length: int, history: int, horizon: int, stride: int = 1) -> int:
    if length < history + horizon:
        return 0
    return (length - history - horizon) // stride + 1


def window_starts(source: WindowSource, history: int, horizon: int, stride: int = 1) -> np.ndarray:
    """Local start indices of every window inside ``source``."""
    return np.arange(window_count(len(source), history, horizon, stride)) * stride


def windows(source: WindowSource, history: int, horizon: int, stride: int = 1) -> Iterator[StateWindow]:
    if history < 1 or horizon < 1 or stride < 1:
        raise ValueError("history, horizon and stride must be >= 1")
    for s in window_starts(source, history, horizon, stride):
        s = int(s)
        yield StateWindow(source.x[s:s + history], source.z[s:s + history],
                          source.x[s + history:s + history + horizon], source.offset + s)


class WindowBatcher:
    """Array view of all windows of a source for fast mini-batch gathering."""

    def __init__(self, source: WindowSource, history: int, horizon: int, stride: int = 1):
        self.source = source
        self.history, self.horizon = history, horizon
        self.starts = window_starts(source, history, horizon, stride)
        # [n_win, N, P, Q] views, moved to [n_win, Q, N, P] on gather
        if len(self.starts):
            self._xv = sliding_window_view(source.x, history, axis=0)
            self._zv = sliding_window_view(source.z, history, axis=0)
            self._yv = sliding_window_view(source.x[history:], horizon, axis=0)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def t0(self) -> np.ndarray:
        return self.source.offset + self.starts

    def gather(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = self.starts[np.asarray(idx)]
        x = np.ascontiguousarray(np.moveaxis(self._xv[s], -1, 1))
        z = np.ascontiguousarray(np.moveaxis(self._zv[s], -1, 1))
        y = np.ascontiguousarray(np.moveaxis(self._yv[s], -1, 1))
        return x, z, y

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for k in range(0, len(order), batch_size):
            yield self.gather(order[k:k + batch_size])
