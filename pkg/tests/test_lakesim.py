import numpy as np
import pytest

from pgrnn import physics as ph
from pgrnn.lakesim import (
    PHY_PERTURBATION,
    ObservationSet,
    Perturbation,
    ScalarCoefficients,
    SimConfig,
    DriverSeries,
    convective_adjust,
    generate_dataset,
    generate_drivers,
    generate_scalar_target,
    run_phy,
    sample_observations,
    simulate,
)


@pytest.fixture(scope="module")
def two_years():
    drivers = generate_drivers(730, seed=11)
    field, ledger = simulate(SimConfig(), drivers)
    return drivers, field, ledger


def test_driver_shape_and_determinism():
    a, b = generate_drivers(400, seed=5), generate_drivers(400, seed=5)
    assert a.values.shape == (400, 11)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, generate_drivers(400, seed=6).values)
    with pytest.raises(ValueError):
        generate_drivers(1, seed=0)


def test_driver_ranges_and_moments():
    d = generate_drivers(3650, seed=0)
    sw = d.column("shortwave")
    assert sw.min() >= 0.0 and sw.max() <= 350.0
    assert 100.0 < sw.mean() < 200.0
    assert np.all(d.column("wind_speed") >= 0.5)
    assert np.all(d.column("rain") >= 0.0)
    rh = d.column("rel_humidity")
    assert rh.min() >= 20.0 and rh.max() <= 100.0
    t = d.column("air_temp")
    assert 8.0 < t.mean() < 12.0
    # annual amplitude close to the configured 11 degC
    assert 8.0 < (np.percentile(t, 95) - np.percentile(t, 5)) / 2 < 16.0
    assert set(np.unique(d.column("snow_flag"))) <= {0.0, 1.0}


def test_driver_series_validation():
    with pytest.raises(ValueError):
        DriverSeries(np.zeros((3, 10)), np.arange(3))
    with pytest.raises(ValueError):
        DriverSeries(np.zeros((3, 11)), np.array([0, 1, 3]))


def test_zero_flux_isothermal_is_fixed_point():
    ts, n = 4.0, 60
    d = np.zeros((n, ph.N_DRIVERS))
    d[:, ph.LW] = ph.EMISSIVITY * ph.STEFAN_BOLTZMANN * (ts + 273.15) ** 4
    drivers = DriverSeries(d, np.arange(n))
    field, _ = simulate(SimConfig(wind_mixing_efficiency=0.0), drivers)
    np.testing.assert_allclose(field.values, ts, rtol=0, atol=1e-9)


def test_single_box_warming_rate():
    """On a column that stays well mixed, the mean temperature follows the flux."""
    grid = ph.DepthGrid.default(max_depth=4.0)
    n = 5
    d = np.zeros((n, ph.N_DRIVERS))
    d[:, ph.SW] = 300.0
    d[:, ph.LW] = 320.0
    d[:, ph.WIND] = 4.0
    drivers = DriverSeries(d, np.arange(n))
    config = SimConfig(grid=grid, min_mixed_depth=10.0, initial_temp=2.0)
    field, ledger = simulate(config, drivers)
    vbar = np.array([float(ph.volume_avg_temp(row, grid)) for row in field.values])
    expected = ledger.net_flux * grid.surface_area * ph.SECONDS_PER_DAY / (ph.RHO_REF * ph.C_WATER * grid.total_volume)
    np.testing.assert_allclose(np.diff(vbar), expected, rtol=1e-9)
    assert np.ptp(field.values, axis=1).max() < 1e-9


def test_ledger_closes(two_years):
    _, _, ledger = two_years
    assert np.all(np.abs(ledger.residual) <= 1e-6 * np.abs(ledger.heat[:-1]))
    assert abs(ledger.residual.sum()) <= 1e-6 * np.abs(ledger.heat).max()


def test_static_stability(two_years):
    _, field, _ = two_years
    rho = ph.density(field.values)
    assert np.all(rho[:, :-1] <= rho[:, 1:] + 1e-9)


def test_summer_stratification_develops(two_years):
    drivers, field, _ = two_years
    july = (drivers.dates.astype("datetime64[M]").astype(int) % 12) == 6
    assert np.mean(field.values[july, 0] - field.values[july, -1]) > 3.0


def test_convective_adjust_conserves_heat():
    grid = ph.DepthGrid.default(max_depth=9.0)
    y = np.random.default_rng(0).uniform(2.0, 25.0, grid.n)
    out = convective_adjust(y.copy(), grid)
    assert float(ph.heat_content(out, grid)) == pytest.approx(float(ph.heat_content(y, grid)), rel=1e-13)
    rho = ph.density(out)
    assert np.all(rho[:-1] <= rho[1:] + 1e-9)


def test_simulation_is_deterministic():
    drivers = generate_drivers(200, seed=3)
    a, _ = simulate(SimConfig(), drivers)
    b, _ = simulate(SimConfig(), drivers)
    assert a.values.tobytes() == b.values.tobytes()


def test_identity_perturbation_reproduces_truth(two_years):
    drivers, field, _ = two_years
    same = run_phy(SimConfig(), drivers, Perturbation())
    assert same.values.tobytes() == field.values.tobytes()


def test_perturbed_process_model_differs_but_stays_stable(two_years):
    drivers, field, _ = two_years
    doubled = run_phy(SimConfig(), drivers, Perturbation(diffusivity=2.0))
    assert np.sqrt(np.mean((doubled.values - field.values) ** 2)) > 0
    phy = run_phy(SimConfig(), drivers)
    assert ph.phy_inconsistency(phy) < 0.01


def test_perturbation_bounds():
    with pytest.raises(ValueError):
        Perturbation(diffusivity=10.0)
    assert Perturbation().is_identity and not PHY_PERTURBATION.is_identity


def test_more_sunshine_never_cools():
    drivers = generate_drivers(365, seed=7)
    bright = drivers.values.copy()
    bright[:, ph.SW] *= 1.1
    grid = SimConfig().grid
    base, _ = simulate(SimConfig(), drivers)
    warm, _ = simulate(SimConfig(), DriverSeries(bright, drivers.timestamps))
    assert float(ph.volume_avg_temp(warm.values[-1], grid)) >= float(ph.volume_avg_temp(base.values[-1], grid))


# --- observations -------------------------------------------------------------

def test_observations_full_copy(two_years):
    _, field, _ = two_years
    obs = sample_observations(field, 0.0, 0.0, seed=0)
    assert obs.mask.all()
    np.testing.assert_array_equal(obs.dense(), field.values)


def test_observations_all_missing(two_years):
    _, field, _ = two_years
    obs = sample_observations(field, 1.0, 0.5, seed=0)
    assert len(obs) == 0 and not obs.mask.any()
    assert np.isnan(obs.dense()).all()


def test_observation_noise_level():
    truth = np.zeros((400, 25))
    obs = sample_observations(truth, 0.0, 0.5, seed=9)
    assert len(obs) == 10_000
    assert abs(obs.value.std() - 0.5) < 0.02


def test_observation_missing_rate_and_errors():
    obs = sample_observations(np.zeros((1000, 10)), 0.8, 0.0, seed=1)
    assert abs(obs.mask.mean() - 0.2) < 0.01
    with pytest.raises(ValueError):
        sample_observations(np.zeros((3, 3)), 1.5, 0.0, seed=0)
    with pytest.raises(ValueError):
        sample_observations(np.zeros((3, 3)), 0.5, -1.0, seed=0)


def test_observation_set_consistency():
    mask = np.array([[True, False], [False, True]])
    obs = ObservationSet.from_dense(np.array([[1.0, 9.0], [9.0, 2.0]]), mask)
    assert obs.value.tolist() == [1.0, 2.0]
    assert obs.rows(1, 2).value.tolist() == [2.0]
    with pytest.raises(ValueError):
        ObservationSet(np.array([0]), np.array([0]), np.array([1.0]), mask)


# --- scalar target ------------------------------------------------------------

def test_scalar_identity_and_positivity():
    drivers = generate_drivers(3 * 365, seed=4)
    truth, phy = generate_scalar_target(drivers, seed=4, phy_coeffs=ScalarCoefficients())
    np.testing.assert_array_equal(truth, phy)
    truth, phy = generate_scalar_target(drivers, seed=4)
    assert truth.min() > 0 and phy.min() > 0
    assert 0.01 < truth.mean() < 0.05
    assert 0.002 < np.sqrt(np.mean((truth - phy) ** 2)) < 0.03
    with pytest.raises(ValueError):
        generate_scalar_target(drivers.slice(0, 300), seed=0)


def test_dataset_bundle_is_deterministic():
    a = generate_dataset(400, seed=2)
    b = generate_dataset(400, seed=2)
    assert a.truth.values.shape == (400, 26) and a.obs.shape == (400, 26)
    assert a.phy.values.tobytes() == b.phy.values.tobytes()
    assert a.obs.value.tobytes() == b.obs.value.tobytes()
    assert a.scalar_obs.shape == (400, 1)
    assert a.scalar_truth.tobytes() == b.scalar_truth.tobytes()
