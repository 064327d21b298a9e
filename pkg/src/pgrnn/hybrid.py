"""Hybrid physics-data inputs and targets.

The process-model output enters the network twice: as extra input columns
next to the meteorological drivers, and as down-weighted pseudo-labels on
cells that have no observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lakesim import DriverSeries, ObservationSet
from .physics import N_DRIVERS, TempField


@dataclass(frozen=True, eq=False)
class TrainingTensor:
    X: np.ndarray  # (T, D) inputs in physical units
    targets: np.ndarray  # (T, n_out)
    weights: np.ndarray  # (T, n_out), 0 where nothing supervises the cell

    def __post_init__(self):
        if self.targets.shape != self.weights.shape:
            raise ValueError(f"targets {self.targets.shape} and weights {self.weights.shape} differ")
        if self.X.shape[0] != self.targets.shape[0]:
            raise ValueError(f"inputs have {self.X.shape[0]} rows, targets {self.targets.shape[0]}")
        if np.any(self.weights < 0):
            raise ValueError("loss weights must be non-negative")

    def rows(self, start: int, stop: int) -> "TrainingTensor":
        return TrainingTensor(self.X[start:stop], self.targets[start:stop], self.weights[start:stop])


def _as_2d(y) -> np.ndarray:
    arr = y.values if isinstance(y, TempField) else np.asarray(y, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def augment_features(drivers, y_phy) -> np.ndarray:
    """``[drivers | y_phy]`` column-wise; 11 + n_out columns."""
    d = drivers.values if isinstance(drivers, DriverSeries) else np.asarray(drivers, dtype=np.float64)
    p = _as_2d(y_phy)
    if d.shape[0] != p.shape[0]:
        raise ValueError(f"drivers have {d.shape[0]} steps but the process-model series has {p.shape[0]}")
    if d.shape[1] != N_DRIVERS:
        raise ValueError(f"expected {N_DRIVERS} driver columns, got {d.shape[1]}")
    return np.concatenate([d, p], axis=1)


def observed_targets(obs: ObservationSet, w_obs: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Targets and weights from observations alone (no pseudo-labels)."""
    if w_obs <= 0:
        raise ValueError("w_obs must be positive")
    targets = np.where(obs.mask, np.nan_to_num(obs.dense()), 0.0)
    return targets, np.where(obs.mask, float(w_obs), 0.0)


def fill_pseudo_labels(obs: ObservationSet, y_phy, w_obs: float = 1.0, w_phy: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Observed cells keep their measurement with weight ``w_obs``; every other
    cell takes the process-model value with weight ``w_phy``."""
    if w_obs <= 0:
        raise ValueError("w_obs must be positive")
    if w_phy < 0:
        raise ValueError("w_phy must be non-negative")
    phy = _as_2d(y_phy)
    if phy.shape != obs.shape:
        raise ValueError(f"observations cover {obs.shape} but the process-model series is {phy.shape}")
    targets = np.where(obs.mask, np.nan_to_num(obs.dense()), phy)
    weights = np.where(obs.mask, float(w_obs), float(w_phy))
    return targets, weights
