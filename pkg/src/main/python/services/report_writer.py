#!/usr/bin/env python3
"""
Report Writer Service

Writes solver trajectories and simulation ensembles as CSV tables and the
diagnostics / cost / verification documents as JSON.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..core.numerics import TimeGrid, Trajectory
from .centralized_solver import NfSolution, RiccatiSolution
from .decentralized_solver import DmRiccatiSet, MeanFieldSolution
from .simulation import ClosedLoopEnsemble, ensemble_to_frame

logger = logging.getLogger(__name__)


def trajectory_columns(name: str, traj: Trajectory) -> Dict[str, np.ndarray]:
    """Flatten a trajectory into columns name_i (vectors) or name_i_j (matrices), 1-based"""
    values = traj.values
    if values.ndim == 2:
        return {f"{name}_{i + 1}": values[:, i] for i in range(values.shape[1])}
    return {f"{name}_{i + 1}_{j + 1}": values[:, i, j]
            for i in range(values.shape[1]) for j in range(values.shape[2])}


def trajectory_frame(grid: TimeGrid, trajectories: Mapping[str, Trajectory]) -> pd.DataFrame:
    columns: Dict[str, np.ndarray] = {"t": np.asarray(grid.times)}
    for name, traj in trajectories.items():
        columns.update(trajectory_columns(name, traj))
    return pd.DataFrame(columns)


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ReportWriter:
    """Service for writing run artifacts into one output directory"""

    def __init__(self, settings, out_dir: Union[str, Path]):
        self.settings = settings
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Initialized Report Writer service ({self.out_dir})")

    def write_frame(self, frame: pd.DataFrame, filename: str) -> Path:
        path = self.out_dir / filename
        try:
            frame.to_csv(path, index=False, float_format=self.settings.CSV_FLOAT_FORMAT, lineterminator="\n")
        except Exception as e:
            logger.error(f"Failed to write {path}: {e}")
            raise
        logger.info(f"Wrote {filename} ({len(frame)} rows)")
        return path

    def write_json(self, document: Union[BaseModel, Mapping[str, Any]], filename: str) -> Path:
        """Pretty-printed, key-sorted JSON"""
        path = self.out_dir / filename
        if isinstance(document, BaseModel):
            document = document.model_dump()
        try:
            path.write_text(json.dumps(document, sort_keys=True, indent=2, default=_jsonable) + "\n",
                            encoding="utf-8")
        except Exception as e:
            logger.error(f"Failed to write {path}: {e}")
            raise
        logger.info(f"Wrote {filename}")
        return path

    def write_dm_riccati(self, riccati: DmRiccatiSet) -> Dict[str, Path]:
        files = {}
        for i, K in enumerate(riccati.K, start=1):
            filename = f"riccati_dm{i}.csv"
            files[filename] = self.write_frame(trajectory_frame(K.grid, {"K": K}), filename)
        return files

    def write_centralized(self, solution: Union[RiccatiSolution, NfSolution]) -> Path:
        columns = {"K": solution.K, "gain": solution.gain}
        if isinstance(solution, NfSolution):
            columns.update(r=solution.r, feed_forward=solution.feed_forward)
        return self.write_frame(trajectory_frame(solution.K.grid, columns), "riccati.csv")

    def write_mean_field(self, mean_field: MeanFieldSolution) -> Path:
        columns: Dict[str, Trajectory] = {"x_bar": mean_field.x_bar}
        for i, r in enumerate(mean_field.r, start=1):
            columns[f"r{i}"] = r
        for i, u in enumerate(mean_field.u_bar, start=1):
            columns[f"u_bar{i}"] = u
        return self.write_frame(trajectory_frame(mean_field.x_bar.grid, columns), "mean_field.csv")

    def write_ensemble(self, ensemble: ClosedLoopEnsemble) -> Path:
        return self.write_frame(ensemble_to_frame(ensemble), "ensemble.csv")
