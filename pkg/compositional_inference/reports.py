"""
Experiment reports: a JSON summary plus one CSV per trajectory.

CSV layout: a header row ``t,<column>,...`` followed by one row per time
step, every value written with ``%.17g`` so that parsing the file back
recovers the floats exactly. Scaling tables use the system size as their
index column instead of ``t``. Column order is the insertion order of the
trajectory. Timestamps appear only in the JSON ``metadata`` block, so
re-running a configuration reproduces the CSV files byte for byte.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from compositional_inference import __version__
from compositional_inference.exceptions import InvalidParams, IoError, LengthMismatch
from compositional_inference.metrics import MetricReport

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"


@dataclass
class Trajectory:
    name: str
    times: np.ndarray
    columns: Dict[str, np.ndarray]
    index: str = "t"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        for key, values in self.columns.items():
            values = np.asarray(values, dtype=float).reshape(-1)
            if values.shape != self.times.shape:
                raise LengthMismatch(
                    f"Column '{key}' of trajectory '{self.name}' has {values.shape[0]} rows, expected {self.times.shape[0]}"
                )
            self.columns[key] = values

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({self.index: self.times, **self.columns})

    @property
    def filename(self) -> str:
        return f"{self.name}.csv"


@dataclass
class ExperimentReport:
    scenario: str
    config: Dict[str, Any]
    metrics: List[MetricReport] = field(default_factory=list)
    trajectories: List[Trajectory] = field(default_factory=list)
    data_hashes: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def metric(self, method: str) -> MetricReport:
        for report in self.metrics:
            if report.method == method:
                return report
        raise InvalidParams(f"No metrics recorded for method '{method}'")

    def add_trajectory(self, name: str, times, columns: Mapping[str, Any], index: str = "t"):
        if any(t.name == name for t in self.trajectories):
            raise InvalidParams(f"Duplicate trajectory name '{name}'")
        self.trajectories.append(Trajectory(name, times, dict(columns), index))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "version": self.version,
            "config": self.config,
            "metrics": [report.to_dict() for report in self.metrics],
            "summary": _jsonable(self.summary),
            "data_hashes": dict(self.data_hashes),
            "trajectories": [t.filename for t in self.trajectories],
        }


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def read_trajectory(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def emit_reports(report: ExperimentReport, directory: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> List[Path]:
    """
    Write ``report.json`` and one CSV per trajectory into ``directory``.

    Args:
        report: Experiment report
        directory: Output directory, created if missing
        metadata: Extra run metadata for the JSON file (wall-clock stamps)

    Returns:
        Paths of every written file, JSON first

    Raises:
        IoError: If the directory or a file cannot be written
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        summary = report.to_dict()
        summary["metadata"] = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **(metadata or {})}
        json_path = out / "report.json"
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=False) + "\n", encoding="utf-8")
        written.append(json_path)
        for trajectory in report.trajectories:
            path = out / trajectory.filename
            trajectory.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            written.append(path)
    except OSError as e:
        logger.error(f"Cannot write reports to '{out}': {e}")
        raise IoError(f"Cannot write reports to '{out}': {e}") from e
    logger.info(f"Wrote {len(written)} report files to {out}")
    return written
