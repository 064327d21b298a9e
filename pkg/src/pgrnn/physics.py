"""Physical relations for lake temperature profiles.

Functions that feed the training loss (``density``, ``density_penalty``,
``heat_content``, ``net_surface_flux``, ``energy_penalty``) are written with
:mod:`pgrnn.diffcore` primitives, so they accept either plain arrays or graph
tensors. ``phy_inconsistency`` and the thermocline helpers are evaluation-only
and work on arrays.

Conventions: ``values[t, d]`` is the temperature (deg C) at the end of day
``t`` at depth index ``d`` (surface first). Day ``t + 1``'s forcing carries
``values[t]`` to ``values[t + 1]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

RHO_REF = 1000.0  # kg/m3
C_WATER = 4186.0  # J/(kg degC)
SECONDS_PER_DAY = 86400.0

ALBEDO = 0.07
EMISSIVITY = 0.97
STEFAN_BOLTZMANN = 5.670e-8  # W/(m2 K4)
RHO_AIR = 1.2  # kg/m3
CP_AIR = 1005.0  # J/(kg degC)
BULK_COEFF = 1.3e-3  # shared sensible/latent transfer coefficient
LATENT_HEAT = 2.45e6  # J/kg
AIR_PRESSURE = 1013.25  # hPa
# saturation vapour pressure linearised about 10 degC (Magnus tangent), hPa
SAT_VP_10C = 12.27
SAT_VP_SLOPE = 0.822

DENSITY_RANGE = (-0.5, 40.0)
DENSITY_POLE = -68.12963
DENSITY_MAX_TEMP = 3.9863

DRIVER_COLUMNS = (
    "shortwave",  # W/m2, daily mean
    "longwave_down",  # W/m2
    "air_temp",  # degC
    "wind_speed",  # m/s
    "rel_humidity",  # percent
    "rain",  # mm/day
    "snow_flag",  # 1 when air temperature is below freezing
    "doy_sin",
    "doy_cos",
    "day_length",  # hours
    "cloud_cover",  # fraction
)
N_DRIVERS = len(DRIVER_COLUMNS)
SW, LW, TAIR, WIND, RH, RAIN, SNOW, DOY_SIN, DOY_COS, DAYLEN, CLOUD = range(N_DRIVERS)

THERMOCLINE_MIN_GRADIENT = 0.1  # degC/m


class DensityRangeWarning(UserWarning):
    """Temperature outside the range the density relation was fitted on."""


@dataclass(frozen=True)
class DepthGrid:
    """Depth levels (m, surface first) with the lake area at each level (m2).

    Each level owns the water between the midpoints to its neighbours; the
    first and last levels own half-cells.
    """

    depths: np.ndarray
    layer_areas: np.ndarray
    layer_volumes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=np.float64)
        areas = np.asarray(self.layer_areas, dtype=np.float64)
        if depths.ndim != 1 or depths.size < 2:
            raise ValueError("a depth grid needs at least two levels")
        if areas.shape != depths.shape:
            raise ValueError(f"areas shape {areas.shape} does not match depths shape {depths.shape}")
        if depths[0] < 0 or np.any(np.diff(depths) <= 0):
            raise ValueError("depths must be non-negative and strictly increasing")
        if np.any(areas <= 0) or np.any(np.diff(areas) > 0):
            raise ValueError("areas must be positive and non-increasing with depth")
        bounds = np.concatenate([[depths[0]], 0.5 * (depths[1:] + depths[:-1]), [depths[-1]]])
        volumes = areas * np.diff(bounds)
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "layer_areas", areas)
        object.__setattr__(self, "layer_volumes", volumes)

    @classmethod
    def default(cls, max_depth: float = 25.0, spacing: float = 1.0, surface_area: float = 3.94e7,
                bottom_fraction: float = 0.2) -> "DepthGrid":
        """Evenly spaced grid from the surface with a linear area taper."""
        depths = np.arange(0.0, max_depth + 0.5 * spacing, spacing)
        areas = surface_area * np.linspace(1.0, bottom_fraction, depths.size)
        return cls(depths, areas)

    @property
    def n(self) -> int:
        return self.depths.size

    @property
    def surface_area(self) -> float:
        return float(self.layer_areas[0])

    @property
    def total_volume(self) -> float:
        return float(self.layer_volumes.sum())


@dataclass(frozen=True)
class TempField:
    """Temperatures (deg C) on a depth grid over uniformly spaced days."""

    values: np.ndarray
    grid: DepthGrid
    timestamps: np.ndarray  # days since 1970-01-01

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != self.grid.n:
            raise ValueError(f"values shape {values.shape} does not match grid with {self.grid.n} depths")
        if ts.shape != (values.shape[0],):
            raise ValueError(f"{ts.size} timestamps for {values.shape[0]} rows")
        if not np.all(np.isfinite(values)):
            raise ValueError("temperature field contains non-finite values")
        if ts.size > 1:
            steps = np.diff(ts)
            if np.any(steps <= 0) or np.any(steps != steps[0]):
                raise ValueError("timestamps must be strictly increasing and uniformly spaced")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)

    @property
    def dates(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EnergyLedger:
    """Daily heat budget: ``residual[t] = heat[t+1] - heat[t] - net_flux[t] * A * dt``."""

    net_flux: np.ndarray  # W/m2 driving each transition
    heat: np.ndarray  # J, one per field row
    residual: np.ndarray  # J, one per transition

    def max_relative_residual(self) -> float:
        if self.residual.size == 0:
            return 0.0
        return float(np.max(np.abs(self.residual) / np.abs(self.heat[:-1])))


def _values(x):
    if isinstance(x, TempField):
        return x.values
    return x


def _raw(x) -> np.ndarray:
    return x.value if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)


def _density_anomaly(y):
    """``density(y) - 1000``: the same relation without the large offset, so
    differences between nearby temperatures keep their precision."""
    raw = _raw(y)
    if np.any(raw <= DENSITY_POLE):
        raise ValueError(f"temperature at or below the pole of the density relation ({DENSITY_POLE} degC)")
    if raw.size and (raw.min() < DENSITY_RANGE[0] or raw.max() > DENSITY_RANGE[1]):
        warnings.warn(
            f"temperatures in [{raw.min():.3g}, {raw.max():.3g}] degC exceed the density validity range",
            DensityRangeWarning,
            stacklevel=3,
        )
    if not isinstance(y, dc.Tensor):
        y = raw
    num = (y + 288.9414) * dc.square(y - DENSITY_MAX_TEMP)
    den = 508929.2 * (y + 68.12963)
    return -1000.0 * (num / den)


def density(y):
    """Water density (kg/m3) from temperature (deg C).

    Accepts arrays or graph tensors. Temperatures outside ``DENSITY_RANGE``
    are evaluated but trigger a :class:`DensityRangeWarning`.
    """
    return 1000.0 + _density_anomaly(y)


def density_penalty(field):
    """Mean positive part of ``rho[d] - rho[d+1]`` over all adjacent pairs and days.

    Zero exactly when density never decreases with depth. Works on a
    ``(..., T, n_depths)`` array or tensor.
    """
    y = _values(field)
    if _raw(y).shape[-1] < 2:
        raise ValueError("density penalty needs at least two depths")
    rho = _density_anomaly(y)
    return dc.mean(dc.relu(rho[..., :-1] - rho[..., 1:]))


def phy_inconsistency(field, tolerance: float = 1e-6) -> float:
    """Fraction of adjacent-depth pairs (all days) where density drops with depth by more than ``tolerance``."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    y = _raw(_values(field))
    if y.shape[-1] < 2:
        raise ValueError("need at least two depths")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DensityRangeWarning)
        rho = _density_anomaly(y)
    return float(np.mean(rho[..., :-1] - rho[..., 1:] > tolerance))


def _check_profile(profile, grid: DepthGrid):
    if _raw(profile).shape[-1] != grid.n:
        raise ValueError(f"profile has {_raw(profile).shape[-1]} depths, grid has {grid.n}")


def heat_content(profile, grid: DepthGrid):
    """Heat content (J) relative to 0 degC, using a constant reference density."""
    _check_profile(profile, grid)
    return RHO_REF * C_WATER * dc.sum(profile * grid.layer_volumes, axis=-1)


def volume_avg_temp(profile, grid: DepthGrid):
    _check_profile(profile, grid)
    return dc.sum(profile * grid.layer_volumes, axis=-1) / grid.total_volume


def saturation_vapour_pressure(temp):
    return SAT_VP_10C + SAT_VP_SLOPE * (temp - 10.0)


def net_surface_flux(drivers, surface_temp, albedo: float = ALBEDO, bulk_coeff: float = BULK_COEFF):
    """Net heat flux into the lake surface (W/m2, positive = warming).

    ``drivers`` is ``(..., 11)`` in ``DRIVER_COLUMNS`` order; ``surface_temp``
    broadcasts against ``drivers[..., 0]`` and may be a graph tensor.

    Components: absorbed shortwave, downwelling longwave, grey-body emission,
    and bulk-aerodynamic sensible and latent heat loss sharing one transfer
    coefficient; the latent term uses a linearised saturation curve.
    """
    d = np.asarray(drivers, dtype=np.float64)
    if d.shape[-1] != N_DRIVERS:
        raise ValueError(f"expected {N_DRIVERS} driver columns, got {d.shape[-1]}")
    if not np.all(np.isfinite(d)):
        raise ValueError("drivers contain non-finite values")
    if not isinstance(surface_temp, dc.Tensor):
        surface_temp = np.asarray(surface_temp, dtype=np.float64)
    sw, lw, t_air, wind, rh = d[..., SW], d[..., LW], d[..., TAIR], d[..., WIND], d[..., RH]

    emitted = EMISSIVITY * STEFAN_BOLTZMANN * dc.power(surface_temp + 273.15, 4.0)
    sensible = (RHO_AIR * CP_AIR * bulk_coeff * wind) * (surface_temp - t_air)
    vapour_air = rh / 100.0 * saturation_vapour_pressure(t_air)
    latent_scale = RHO_AIR * LATENT_HEAT * bulk_coeff * wind * 0.622 / AIR_PRESSURE
    latent = latent_scale * (saturation_vapour_pressure(surface_temp) - vapour_air)
    return ((1.0 - albedo) * sw + lw) - emitted - sensible - latent


def energy_residual(field, drivers, grid: DepthGrid, dt: float = SECONDS_PER_DAY):
    """Per-transition imbalance ``dH - flux * A * dt`` (J), shape ``(..., T-1)``."""
    y = _values(field)
    d = np.asarray(drivers, dtype=np.float64)
    if _raw(y).shape[:-1] != d.shape[:-1]:
        raise ValueError(f"field shape {_raw(y).shape} and drivers shape {d.shape} are not time-aligned")
    if _raw(y).shape[-2] < 2:
        raise ValueError("energy residual needs at least two time steps")
    heat = heat_content(y, grid)
    flux = net_surface_flux(d[..., 1:, :], y[..., :-1, 0])
    return heat[..., 1:] - heat[..., :-1] - flux * (grid.surface_area * dt)


def energy_penalty(field, drivers, grid: DepthGrid, tau: float = 0.0, dt: float = SECONDS_PER_DAY):
    """Mean of ``max(0, |residual| - tau)`` over transitions (J).

    The surface flux is evaluated at the field's own surface temperature, so
    the penalty is differentiable in every temperature value.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if np.isinf(tau):
        if _raw(_values(field)).shape[-2] < 2:
            raise ValueError("energy penalty needs at least two time steps")
        return 0.0
    r = energy_residual(field, drivers, grid, dt)
    return dc.mean(dc.relu(dc.absolute(r) - tau))


def thermocline_depth(profile, grid: DepthGrid, min_gradient: float = THERMOCLINE_MIN_GRADIENT):
    """Midpoint depth (m) of the steepest adjacent pair, or ``None`` when the
    steepest gradient is below ``min_gradient`` (deg C/m). Near-ties go to the
    shallowest pair."""
    y = np.asarray(profile, dtype=np.float64)
    _check_profile(y, grid)
    z = grid.depths
    grad = np.abs(np.diff(y)) / np.diff(z)
    top = grad.max()
    if top < min_gradient:
        return None
    i = int(np.flatnonzero(grad >= top * (1.0 - 1e-9))[0])
    return float(0.5 * (z[i] + z[i + 1]))


def thermocline_series(field, grid: DepthGrid | None = None, min_gradient: float = THERMOCLINE_MIN_GRADIENT):
    """Thermocline depth for every row; NaN where no thermocline exists."""
    if isinstance(field, TempField):
        grid = field.grid
    y = _raw(_values(field))
    out = np.full(y.shape[0], np.nan)
    for t, row in enumerate(y):
        depth = thermocline_depth(row, grid, min_gradient)
        if depth is not None:
            out[t] = depth
    return out


def thermocline_roughness(series: np.ndarray) -> float:
    """Mean absolute day-to-day change of thermocline depth (m/day).

    Only consecutive days where both depths exist contribute; NaN when none do.
    """
    s = np.asarray(series, dtype=np.float64)
    step = np.abs(np.diff(s))
    step = step[np.isfinite(step)]
    return float(step.mean()) if step.size else float("nan")
