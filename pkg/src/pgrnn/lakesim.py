"""Synthetic lake: meteorological drivers, a 1-D thermal simulator, sparse
observations, and a scalar seasonal target.

The simulator plays two roles. Run with unit perturbation factors it produces
the ground truth; run with perturbed diffusivity, albedo and bulk transfer
coefficient it plays the imperfect process model whose output is fed to the
hybrid network.

Each simulated day:

1. the net surface flux (evaluated at the previous day's surface temperature)
   heats or cools the top layer;
2. heat diffuses between adjacent layers with a stability-damped eddy
   diffusivity, using explicit substeps;
3. wind stirs the surface: layers are entrained into the surface mixed layer
   while the wind energy covers the potential-energy cost;
4. convective adjustment merges adjacent blocks wherever density decreases
   with depth.

Steps 2 to 4 conserve ``sum(V * T)`` exactly (up to rounding), so the heat
budget closes to the flux of step 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .physics import (
    ALBEDO,
    DensityRangeWarning,
    BULK_COEFF,
    C_WATER,
    DRIVER_COLUMNS,
    N_DRIVERS,
    RHO_AIR,
    RHO_REF,
    SECONDS_PER_DAY,
    DepthGrid,
    EnergyLedger,
    TempField,
    density,
    heat_content,
    net_surface_flux,
)

GRAVITY = 9.81
DRAG_COEFF = 1.3e-3
MOLECULAR_DIFFUSIVITY = 1.4e-7  # m2/s
STABILITY_N2_REF = 2e-5  # s^-2, buoyancy frequency squared that halves diffusivity
DIFFUSION_LIMIT = 0.25  # max explicit diffusion number per substep
MAX_SUBSTEPS = 100_000
CONVECTIVE_TOL = 1e-10  # kg/m3

AR_COEFF = 0.8
LATITUDE = 43.1
DEFAULT_START = "1981-04-01"


class SimulationError(RuntimeError):
    """The explicit scheme could not be kept stable."""


@dataclass(frozen=True)
class Perturbation:
    """Multiplicative factors applied to the simulator for the process-model role."""

    diffusivity: float = 1.0
    albedo: float = 1.0
    bulk_coeff: float = 1.0

    def __post_init__(self):
        for name in ("diffusivity", "albedo", "bulk_coeff"):
            v = getattr(self, name)
            if not 0.25 <= v <= 4.0:
                raise ValueError(f"perturbation factor {name}={v} outside [0.25, 4]")

    @property
    def is_identity(self) -> bool:
        return self == Perturbation()


# factors used for the process-model run unless configured otherwise
PHY_PERTURBATION = Perturbation(diffusivity=2.0, albedo=1.6, bulk_coeff=0.8)


@dataclass(frozen=True)
class SimConfig:
    grid: DepthGrid = field(default_factory=DepthGrid.default)
    diffusivity: float = 2e-5  # m2/s, eddy diffusivity of unstratified water
    wind_mixing_efficiency: float = 0.004
    min_mixed_depth: float = 3.0  # m, always stirred
    initial_temp: float = 4.0
    albedo: float = ALBEDO
    bulk_coeff: float = BULK_COEFF
    perturbation: Perturbation = field(default_factory=Perturbation)
    seed: int = 0

    def __post_init__(self):
        if self.diffusivity <= 0:
            raise ValueError("diffusivity must be positive")
        if self.wind_mixing_efficiency < 0:
            raise ValueError("wind mixing efficiency must be non-negative")


@dataclass(frozen=True)
class DriverSeries:
    """Daily meteorological drivers, one column per entry of ``DRIVER_COLUMNS``."""

    values: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != N_DRIVERS:
            raise ValueError(f"drivers must have {N_DRIVERS} columns, got shape {values.shape}")
        if ts.shape != (values.shape[0],):
            raise ValueError(f"{ts.size} timestamps for {values.shape[0]} rows")
        if not np.all(np.isfinite(values)):
            raise ValueError("drivers contain non-finite values")
        if ts.size > 1 and np.any(np.diff(ts) != 1):
            raise ValueError("driver timestamps must be consecutive days")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)

    columns = DRIVER_COLUMNS

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dates(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, DRIVER_COLUMNS.index(name)]

    def slice(self, start: int, stop: int) -> "DriverSeries":
        return DriverSeries(self.values[start:stop], self.timestamps[start:stop])


@dataclass(frozen=True)
class ObservationSet:
    """Sparse measurements of a ``(T, n)`` field."""

    t_index: np.ndarray
    d_index: np.ndarray
    value: np.ndarray
    mask: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        t = np.asarray(self.t_index, dtype=np.int64)
        d = np.asarray(self.d_index, dtype=np.int64)
        v = np.asarray(self.value, dtype=np.float64)
        if not (t.shape == d.shape == v.shape):
            raise ValueError("entry arrays must have equal length")
        if mask.ndim != 2:
            raise ValueError("mask must be 2-D")
        if t.size and (t.min() < 0 or t.max() >= mask.shape[0] or d.min() < 0 or d.max() >= mask.shape[1]):
            raise ValueError("observation entries fall outside the field")
        check = np.zeros_like(mask)
        check[t, d] = True
        if t.size != int(mask.sum()) or not np.array_equal(check, mask):
            raise ValueError("mask is inconsistent with entries")
        for name, arr in (("mask", mask), ("t_index", t), ("d_index", d), ("value", v)):
            object.__setattr__(self, name, arr)

    @classmethod
    def from_dense(cls, values: np.ndarray, mask: np.ndarray, noise_sigma: float = 0.0) -> "ObservationSet":
        mask = np.asarray(mask, dtype=bool)
        t, d = np.nonzero(mask)
        return cls(t, d, np.asarray(values, dtype=np.float64)[t, d], mask, noise_sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def __len__(self) -> int:
        return self.value.size

    def dense(self) -> np.ndarray:
        """Observed values on the full ``(T, n)`` grid, NaN where missing."""
        out = np.full(self.mask.shape, np.nan)
        out[self.t_index, self.d_index] = self.value
        return out

    def rows(self, start: int, stop: int) -> "ObservationSet":
        return ObservationSet.from_dense(self.dense()[start:stop], self.mask[start:stop], self.noise_sigma)


# ---------------------------------------------------------------------------
# drivers


def _ar1(rng: np.random.Generator, n: int, k: int, coeff: float = AR_COEFF) -> np.ndarray:
    """``k`` independent unit-variance AR(1) series of length ``n``."""
    eps = rng.standard_normal((n, k))
    out = np.empty((n, k))
    out[0] = eps[0]
    scale = math.sqrt(1.0 - coeff * coeff)
    for t in range(1, n):
        out[t] = coeff * out[t - 1] + scale * eps[t]
    return out


def _day_of_year(timestamps: np.ndarray) -> np.ndarray:
    dates = timestamps.astype("datetime64[D]")
    years = dates.astype("datetime64[Y]")
    return (dates - years).astype(np.int64) + 1


def day_length(doy: np.ndarray, latitude: float = LATITUDE) -> np.ndarray:
    decl = np.radians(23.44) * np.sin(2.0 * np.pi * (284 + doy) / 365.0)
    cos_omega = np.clip(-np.tan(np.radians(latitude)) * np.tan(decl), -1.0, 1.0)
    return 24.0 / np.pi * np.arccos(cos_omega)


def generate_drivers(n_days: int, seed: int, start: str = DEFAULT_START) -> DriverSeries:
    """Daily drivers: annual cycles plus AR(1) weather noise (coefficient 0.8).

    Shortwave stays in [0, 350] W/m2, relative humidity in [20, 100] %,
    wind speed above 0.5 m/s, rain is non-negative.
    """
    if n_days < 2:
        raise ValueError("need at least two days of drivers")
    rng = np.random.default_rng(seed)
    start_day = np.datetime64(start, "D").astype(np.int64)
    ts = start_day + np.arange(n_days, dtype=np.int64)
    doy = _day_of_year(ts).astype(np.float64)
    year = 2.0 * np.pi / 365.25
    noise = _ar1(rng, n_days, 7)

    cloud = np.clip(0.5 + 0.08 * np.cos(year * (doy - 15)) + 0.22 * noise[:, 0], 0.0, 1.0)
    clear_sw = 205.0 + 125.0 * np.cos(year * (doy - 172))
    shortwave = np.clip(clear_sw * (1.0 - 0.55 * cloud) + 8.0 * noise[:, 1], 0.0, 350.0)
    air_temp = 10.0 + 11.0 * np.cos(year * (doy - 200)) + 2.5 * noise[:, 2]
    emissivity_air = 0.72 + 0.2 * cloud
    longwave = emissivity_air * 5.670e-8 * (air_temp + 273.15) ** 4 + 4.0 * noise[:, 3]
    wind = np.maximum(3.6 + 0.7 * np.cos(year * (doy - 90)) + 1.1 * noise[:, 4], 0.5)
    humidity = np.clip(72.0 + 4.0 * np.cos(year * (doy - 15)) + 7.0 * noise[:, 5], 20.0, 100.0)
    wetness = noise[:, 6] + 0.25 * np.cos(year * (doy - 170))
    rain = np.where(wetness > 0.7, 9.0 * (wetness - 0.7), 0.0)
    snow = (air_temp < 0.0).astype(np.float64)

    values = np.column_stack([
        shortwave, longwave, air_temp, wind, humidity, rain, snow,
        np.sin(year * doy), np.cos(year * doy), day_length(doy), cloud,
    ])
    return DriverSeries(values, ts)


# ---------------------------------------------------------------------------
# simulator


def _diffusivity(temps: np.ndarray, grid: DepthGrid, base: float) -> np.ndarray:
    rho = density(temps)
    n2 = GRAVITY / RHO_REF * np.maximum(np.diff(rho), 0.0) / np.diff(grid.depths)
    return base / (1.0 + n2 / STABILITY_N2_REF) + MOLECULAR_DIFFUSIVITY


def _diffuse(temps: np.ndarray, grid: DepthGrid, kz: np.ndarray, dt: float, day: int) -> np.ndarray:
    area = 0.5 * (grid.layer_areas[:-1] + grid.layer_areas[1:])
    coupling = kz * area / np.diff(grid.depths)  # m3/s per degC difference
    vol = grid.layer_volumes
    rate = np.zeros_like(vol)
    rate[:-1] += coupling / vol[:-1]
    rate[1:] += coupling / vol[1:]
    n_sub = max(1, math.ceil(rate.max() * dt / DIFFUSION_LIMIT))
    if n_sub > MAX_SUBSTEPS:
        raise SimulationError(f"day {day}: diffusion needs {n_sub} substeps (limit {MAX_SUBSTEPS})")
    step = coupling * (dt / n_sub)
    if rate.max() * dt / n_sub > 0.5:
        raise SimulationError(f"day {day}: explicit diffusion unstable")
    y = temps.copy()
    up, down = step / vol[:-1], step / vol[1:]
    for _ in range(n_sub):
        grad = np.diff(y)
        y[:-1] += up * grad
        y[1:] -= down * grad
    return y


def _merge(y: np.ndarray, vol: np.ndarray, start: int, stop: int) -> None:
    y[start:stop] = np.dot(vol[start:stop], y[start:stop]) / vol[start:stop].sum()


def _wind_mix(y: np.ndarray, grid: DepthGrid, wind: float, efficiency: float, min_depth: float, dt: float) -> None:
    vol = grid.layer_volumes
    height = grid.depths[-1] - grid.depths  # height above the bed
    k = int(np.searchsorted(grid.depths, min_depth, side="right"))
    k = min(max(k, 1), grid.n)
    _merge(y, vol, 0, k)
    energy = efficiency * RHO_AIR * DRAG_COEFF * wind ** 3 * grid.surface_area * dt
    while k < grid.n:
        trial = y[: k + 1].copy()
        before = density(trial)
        _merge(trial, vol[: k + 1], 0, k + 1)
        after = density(trial[0])
        cost = GRAVITY * float(np.dot((after - before) * vol[: k + 1], height[: k + 1]))
        if cost > energy:
            break
        energy -= max(cost, 0.0)
        y[: k + 1] = trial
        k += 1


def convective_adjust(y: np.ndarray, grid: DepthGrid) -> np.ndarray:
    """Merge adjacent blocks to volume-weighted means until density is
    non-decreasing with depth. Heat ``sum(V * T)`` is preserved."""
    y = np.array(y, dtype=np.float64)
    rho = density(y)
    if np.all(rho[:-1] - rho[1:] <= CONVECTIVE_TOL):
        return y
    vol = grid.layer_volumes
    blocks: list[list[float]] = []  # start, stop, sum(V*T), sum(V)
    for i in range(grid.n):
        blocks.append([i, i + 1, vol[i] * y[i], vol[i]])
        while len(blocks) > 1:
            upper, lower = blocks[-2], blocks[-1]
            if density(upper[2] / upper[3]) - density(lower[2] / lower[3]) <= CONVECTIVE_TOL:
                break
            blocks.pop()
            upper[1] = lower[1]
            upper[2] += lower[2]
            upper[3] += lower[3]
    for start, stop, _, _ in blocks:
        if stop - start > 1:
            _merge(y, vol, start, stop)
    return y


def simulate(config: SimConfig, drivers: DriverSeries, initial_profile: np.ndarray | None = None):
    """Run the simulator over every driver row.

    Returns the temperature field (row ``t`` is the state at the end of day
    ``t``) and the energy ledger of its ``T - 1`` transitions.
    """
    grid = config.grid
    pert = config.perturbation
    albedo = config.albedo * pert.albedo
    bulk = config.bulk_coeff * pert.bulk_coeff
    kbase = config.diffusivity * pert.diffusivity
    dt = SECONDS_PER_DAY
    if initial_profile is None:
        y = np.full(grid.n, float(config.initial_temp))
    else:
        y = np.array(initial_profile, dtype=np.float64)
        if y.shape != (grid.n,):
            raise ValueError(f"initial profile has shape {y.shape}, grid has {grid.n} depths")
    d = drivers.values
    area = grid.surface_area
    heat_to_temp = area * dt / (RHO_REF * C_WATER * grid.layer_volumes[0])

    out = np.empty((len(drivers), grid.n))
    fluxes = np.empty(len(drivers))
    with warnings.catch_warnings():
        # intermediate single-layer states may briefly leave the fitted range
        warnings.simplefilter("ignore", DensityRangeWarning)
        _run(config, d, y, out, fluxes, albedo, bulk, kbase, heat_to_temp)

    field_ = TempField(out, grid, drivers.timestamps)

    heat = heat_content(out, grid)
    net = fluxes[1:]
    residual = heat[1:] - heat[:-1] - net * area * dt
    return field_, EnergyLedger(net, heat, residual)


def _run(config, d, y, out, fluxes, albedo, bulk, kbase, heat_to_temp):
    grid = config.grid
    dt = SECONDS_PER_DAY
    for t in range(d.shape[0]):
        flux = float(net_surface_flux(d[t], y[0], albedo=albedo, bulk_coeff=bulk))
        fluxes[t] = flux
        y[0] += flux * heat_to_temp
        y = _diffuse(y, grid, _diffusivity(y, grid, kbase), dt, t)
        _wind_mix(y, grid, d[t, 3], config.wind_mixing_efficiency, config.min_mixed_depth, dt)
        y = convective_adjust(y, grid)
        if not np.all(np.isfinite(y)):
            raise SimulationError(f"day {t}: non-finite temperatures")
        out[t] = y


def run_phy(config: SimConfig, drivers: DriverSeries, perturbation: Perturbation | None = None) -> TempField:
    """The process-model prediction: the simulator with perturbed physics."""
    pert = PHY_PERTURBATION if perturbation is None else perturbation
    field_, _ = simulate(replace(config, perturbation=pert), drivers)
    return field_


# ---------------------------------------------------------------------------
# observations and the scalar target


def sample_observations(truth, missing_rate: float, noise_sigma: float, seed: int) -> ObservationSet:
    """Keep each cell with probability ``1 - missing_rate`` and add Gaussian noise."""
    if not 0.0 <= missing_rate <= 1.0:
        raise ValueError("missing_rate must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    values = truth.values if isinstance(truth, TempField) else np.asarray(truth, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    rng = np.random.default_rng(seed)
    keep = rng.random(values.shape) >= missing_rate
    noisy = values + noise_sigma * rng.standard_normal(values.shape)
    return ObservationSet.from_dense(noisy, keep, noise_sigma)


@dataclass(frozen=True)
class ScalarCoefficients:
    """Coefficients of the seasonal scalar generator (a phosphorus-like series)."""

    offset: float = -0.3
    seasonal_cos: float = 0.55
    seasonal_sin: float = -0.35
    rain: float = 0.5
    warmth: float = 0.45
    trend: float = 0.25  # per decade
    noise: float = 0.45
    scale: float = 0.04  # concentration units (mg/L)


PHY_SCALAR = ScalarCoefficients(offset=-0.1, rain=0.2, warmth=0.8, trend=0.0, noise=0.3)


def _ema(x: np.ndarray, span: float) -> np.ndarray:
    a = 1.0 / span
    out = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = (1.0 - a) * acc + a * v
        out[i] = acc
    return out


def _zscore(x: np.ndarray) -> np.ndarray:
    s = x.std()
    return (x - x.mean()) / (s if s > 0 else 1.0)


def scalar_series(drivers: DriverSeries, seed: int, coeffs: ScalarCoefficients) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(drivers)
    hidden = _ar1(rng, n, 1, coeff=0.97)[:, 0]
    rain = _zscore(_ema(drivers.column("rain"), 20.0))
    warmth = _zscore(_ema(drivers.column("air_temp"), 30.0))
    decades = np.arange(n) / 3652.5
    z = (coeffs.offset
         + coeffs.seasonal_cos * drivers.column("doy_cos")
         + coeffs.seasonal_sin * drivers.column("doy_sin")
         + coeffs.rain * rain
         + coeffs.warmth * warmth
         + coeffs.trend * decades
         + coeffs.noise * hidden)
    return coeffs.scale * np.logaddexp(0.0, z)  # softplus keeps it positive


def generate_scalar_target(drivers: DriverSeries, seed: int, truth_coeffs: ScalarCoefficients | None = None,
                           phy_coeffs: ScalarCoefficients | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Truth and process-model versions of a seasonal scalar series.

    Both share the seeded hidden variability; the process-model version uses
    different sensitivities and misses the slow trend.
    """
    if len(drivers) < 365:
        raise ValueError("the scalar target needs at least one year of drivers")
    truth_coeffs = truth_coeffs or ScalarCoefficients()
    phy_coeffs = phy_coeffs or PHY_SCALAR
    return scalar_series(drivers, seed, truth_coeffs), scalar_series(drivers, seed, phy_coeffs)


# ---------------------------------------------------------------------------
# bundled benchmark


@dataclass(frozen=True)
class LakeDataset:
    drivers: DriverSeries
    truth: TempField
    ledger: EnergyLedger
    phy: TempField
    obs: ObservationSet
    scalar_truth: np.ndarray
    scalar_phy: np.ndarray
    scalar_obs: ObservationSet

    @property
    def grid(self) -> DepthGrid:
        return self.truth.grid


def generate_dataset(n_days: int, seed: int, config: SimConfig | None = None, *,
                     missing_rate: float = 0.8, noise_sigma: float = 0.2,
                     scalar_missing_rate: float = 0.8, scalar_noise_sigma: float = 0.002,
                     phy_perturbation: Perturbation | None = None, start: str = DEFAULT_START) -> LakeDataset:
    """Everything the experiments need, derived deterministically from ``seed``."""
    config = config or SimConfig(seed=seed)
    drivers = generate_drivers(n_days, seed, start)
    truth, ledger = simulate(config, drivers)
    phy = run_phy(config, drivers, phy_perturbation)
    obs = sample_observations(truth, missing_rate, noise_sigma, seed + 1)
    s_truth, s_phy = generate_scalar_target(drivers, seed + 2)
    s_obs = sample_observations(s_truth, scalar_missing_rate, scalar_noise_sigma, seed + 3)
    return LakeDataset(drivers, truth, ledger, phy, obs, s_truth, s_phy, s_obs)
