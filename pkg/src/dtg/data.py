"""CSV ingestion, windowing and project configuration."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .entity_graph import FeatureSeries
from .g2g import TrainConfig
from .gaen import FusionConfig

log = logging.getLogger(__name__)


class IngestionError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = str(path), line


@dataclass
class GapReport:
    feature_id: str
    interior_filled: list[int] = field(default_factory=list)
    edge_filled: list[int] = field(default_factory=list)


def _fill_gaps(values: np.ndarray, report: GapReport) -> np.ndarray:
    missing = np.isnan(values)
    if not missing.any():
        return values
    idx = np.arange(values.size)
    known = idx[~missing]
    if known.size == 0:
        raise ValueError(f"feature {report.feature_id!r} has no observed values")
    for i in idx[missing]:
        if i < known[0] or i > known[-1]:
            report.edge_filled.append(int(i))
        else:
            report.interior_filled.append(int(i))
    # np.interp holds the end values constant outside the known range
    return np.interp(idx, known, values[known])


def ingest(path: str | Path) -> tuple[list[FeatureSeries], np.ndarray, list[GapReport]]:
    """Read ``timestamp,<feature>,...`` CSV into one series per feature column.

    Empty cells are filled by linear interpolation between the nearest
    observed neighbours; leading and trailing gaps take the nearest observed
    value. Returns the series, the timestamps and a per-feature gap report.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(path, 1, "empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "timestamp":
            raise IngestionError(path, 1, "header must be 'timestamp,<feature>,...'")
        if len(set(header)) != len(header):
            raise IngestionError(path, 1, "duplicate column names")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(path, lineno, f"expected {len(header)} cells, got {len(row)}")
            try:
                ts = float(row[0])
            except ValueError:
                raise IngestionError(path, lineno, f"non-numeric timestamp {row[0]!r}") from None
            if stamps and ts == stamps[-1]:
                raise IngestionError(path, lineno, f"duplicate timestamp {row[0]}")
            if stamps and ts < stamps[-1]:
                raise IngestionError(path, lineno, "rows are not in ascending time order")
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(path, lineno, f"non-numeric cell {cell!r}") from None
                if not np.isfinite(v):
                    raise IngestionError(path, lineno, f"non-finite cell {cell!r}")
                vals.append(v)
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise IngestionError(path, 2, "no data rows")
    data = np.asarray(rows, dtype=np.float64)
    series, gaps = [], []
    for j, name in enumerate(header[1:]):
        rep = GapReport(name)
        try:
            col = _fill_gaps(data[:, j], rep)
        except ValueError as exc:
            raise IngestionError(path, 1, str(exc)) from None
        series.append(FeatureSeries(name, col))
        gaps.append(rep)
        if rep.interior_filled or rep.edge_filled:
            log.info("%s: filled %d gap(s) in %s", path.name,
                     len(rep.interior_filled) + len(rep.edge_filled), name)
    return series, np.asarray(stamps), gaps


def window(series, T: int, stride: int = 1) -> list[np.ndarray]:
    """Overlapping ``N_f x T`` windows of a feature matrix (or list of series).

    Yields ``floor((len - T) / stride) + 1`` windows.
    """
    if isinstance(series, np.ndarray):
        M = np.atleast_2d(series)
    else:
        M = np.vstack([s.values for s in series])
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if T < 1 or M.shape[1] < T:
        raise ValueError(f"series of length {M.shape[1]} is shorter than window {T}")
    return [M[:, i:i + T] for i in range(0, M.shape[1] - T + 1, stride)]


@dataclass
class ProjectConfig:
    delta: float = 0.3
    lam: float = 1.0
    window: int = 8
    stride: int = 1
    hidden_dims: list[int] | None = None
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 1000
    row_normalize: bool = False
    epsilon: float = 1e-4
    max_iters: int = 100
    ridge: float = 1e-8
    seed: int = 0
    dkm_timeout: float = 5.0
    fusion: dict = field(default_factory=dict)
    data_dir: str = "."
    db_dir: str = "dtg_db"
    output_dir: str = "out"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.lam < 0 or self.window < 1 or self.stride < 1 or self.epochs < 0:
            raise ValueError("lam >= 0, window >= 1, stride >= 1, epochs >= 0 required")
        if self.epsilon <= 0 or self.max_iters < 1 or self.ridge < 0:
            raise ValueError("epsilon > 0, max_iters >= 1, ridge >= 0 required")
        self.fusion_config()  # validates the nested block

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lam, self.learning_rate, self.momentum, self.epochs, self.delta,
                           self.hidden_dims, self.seed, self.row_normalize)

    def fusion_config(self) -> FusionConfig:
        opts = dict(self.fusion)
        opts.setdefault("seed", self.seed)
        if "band" in opts:
            opts["band"] = tuple(opts["band"])
        try:
            return FusionConfig(**opts)
        except TypeError as exc:
            raise ValueError(f"fusion block: {exc}") from None

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "ProjectConfig":
        raw = {}
        base = Path(".")
        if path is not None:
            base = Path(path).resolve().parent
            raw = json.loads(Path(path).read_text())
        raw.update(overrides or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        # relative paths resolve against the config file's directory
        for key in ("data_dir", "db_dir", "output_dir"):
            p = Path(getattr(cfg, key))
            setattr(cfg, key, str(p if p.is_absolute() else base / p))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)
