"""Command-line entry point.

    pgrnn gen          --config run.yaml   simulate drivers, truth, process model, observations
    pgrnn train        --config run.yaml   fit one variant, write checkpoint.json + history.csv
    pgrnn eval         --config run.yaml   metrics.csv (PHY row, plus the model if trained)
    pgrnn thermocline  --config run.yaml   thermocline.csv
    pgrnn export-plot  --config run.yaml   long-format plot.csv

Relative paths in the ``io`` section resolve against ``$PGRNN_OUTPUT_ROOT``
(or the working directory). Exit codes: 0 ok, 2 config, 3 IO, 4 data shape.
"""

from __future__ import annotations

import argparse
import copy
import csv
import math
import os
import re
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import physics
from .lakesim import DriverSeries, ObservationSet, Perturbation, SimConfig, generate_dataset
from .physics import DRIVER_COLUMNS, DensityRangeWarning, DepthGrid
from .seqmodel import load_checkpoint, save_checkpoint
from .train import VARIANTS, Benchmark, TrainConfig, days_in_years, evaluate, predict, train_model, model_inputs

ENV_OUTPUT_ROOT = "PGRNN_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE = 0, 2, 3, 4

DEFAULTS = {
    "sim": {
        "seed": 0,
        "start": "1981-04-01",
        "years": 12,  # simulated years in total
        "train_years": 8,  # leading years used for training
        "max_depth": 25.0,  # m
        "spacing": 1.0,  # m between depth levels
        "surface_area": 3.94e7,  # m2
        "missing_rate": 0.8,  # fraction of temperature cells left unobserved
        "noise_sigma": 0.2,  # degC observation noise
        "scalar_missing_rate": 0.8,
        "scalar_noise_sigma": 0.002,
        "perturbation": {"diffusivity": 2.0, "albedo": 1.6, "bulk_coeff": 0.8},  # process-model error
    },
    "model": {
        "variant": "PGRNN",  # ANN, RNN, PGRNN0 or PGRNN
        "target": "temperature",  # temperature or scalar
        "hidden": 16,
        "window": 200,  # days per training window
    },
    "loss": {
        "lambda_dp": 1.0,
        "lambda_ec": 0.01,
        "w_phy": 0.2,  # pseudo-label weight relative to w_obs = 1
        "tau_fraction": 0.05,  # energy slack as a fraction of the median daily |dH|
    },
    "train": {
        "lr": 5e-3,
        "epochs": 150,
        "batch": 8,  # windows per optimiser step
        "seed": 0,
        "val_fraction": 0.2,
        "clip_norm": 1.0,
    },
    "io": {
        "data_dir": "data",  # written by gen, read by the other commands
        "run_dir": "run",  # checkpoint, history, predictions and exports
        "source": "model",  # series for thermocline: model, phy or truth
    },
}

ISO_DATE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataIOError(CliError):
    code = EXIT_IO


class DataShapeError(CliError):
    code = EXIT_SHAPE


# ---------------------------------------------------------------------------
# config


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{name}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{name}' must be a mapping")
            out[key] = _merge(defaults[key], value, name + ".")
        else:
            out[key] = value
    return out


def _check_types(config: dict, defaults: dict = DEFAULTS, prefix: str = "") -> None:
    for key, default in defaults.items():
        name, value = f"{prefix}{key}", config[key]
        if isinstance(default, dict):
            _check_types(value, default, name + ".")
        elif isinstance(default, bool) or isinstance(default, str):
            if type(value) is not type(default):
                raise ConfigError(f"config key '{name}' must be a {type(default).__name__}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key '{name}' must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"config key '{name}' must be a finite number")
            config[key] = float(value)


def load_config(path) -> dict:
    """Read a YAML config, fill defaults and validate. Unknown keys are errors."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        given = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return resolve_config(given or {})


def resolve_config(given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError("config must be a mapping of sections")
    config = _merge(DEFAULTS, given)
    _check_types(config)
    model, sim = config["model"], config["sim"]
    if model["variant"] not in VARIANTS:
        raise ConfigError(f"config key 'model.variant' must be one of {', '.join(VARIANTS)}")
    if model["target"] not in ("temperature", "scalar"):
        raise ConfigError("config key 'model.target' must be 'temperature' or 'scalar'")
    if config["io"]["source"] not in ("model", "phy", "truth"):
        raise ConfigError("config key 'io.source' must be 'model', 'phy' or 'truth'")
    if not ISO_DATE.match(sim["start"]):
        raise ConfigError("config key 'sim.start' must be an ISO date (YYYY-MM-DD)")
    _parse_date(sim["start"], "sim.start", ConfigError)
    if not 0 < sim["train_years"] < sim["years"]:
        raise ConfigError("config key 'sim.train_years' must lie strictly between 0 and sim.years")
    for key in ("missing_rate", "scalar_missing_rate"):
        if not 0 <= sim[key] < 1:
            raise ConfigError(f"config key 'sim.{key}' must lie in [0, 1)")
    try:
        grid_from(config)
        Perturbation(**sim["perturbation"])
        train_config(config)
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return config


def grid_from(config: dict) -> DepthGrid:
    sim = config["sim"]
    return DepthGrid.default(sim["max_depth"], sim["spacing"], sim["surface_area"])


def train_config(config: dict) -> TrainConfig:
    m, loss, tr = config["model"], config["loss"], config["train"]
    return TrainConfig(hidden=m["hidden"], window=m["window"], epochs=tr["epochs"], batch=tr["batch"],
                       lr=tr["lr"], val_fraction=tr["val_fraction"], lambda_dp=loss["lambda_dp"],
                       lambda_ec=loss["lambda_ec"], w_phy=loss["w_phy"], tau_fraction=loss["tau_fraction"],
                       clip_norm=tr["clip_norm"])


def _root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT) or ".")


def io_path(config: dict, key: str) -> Path:
    p = Path(config["io"][key])
    return p if p.is_absolute() else _root() / p


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _parse_date(text: str, where: str, error=None) -> int:
    error = error or DataShapeError
    if not ISO_DATE.match(text):
        raise error(f"{where}: '{text}' is not an ISO date (YYYY-MM-DD)")
    try:
        return int(np.datetime64(text, "D").astype(np.int64))
    except ValueError as exc:
        raise error(f"{where}: '{text}' is not a valid date") from exc


def _date(day: int) -> str:
    return str(np.datetime64(int(day), "D"))


def depth_header(depth: float) -> str:
    return f"t_{depth:04.1f}"


def write_csv(path: Path, header: list[str], rows) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path: Path, expected: list[str] | None = None) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DataIOError(f"missing input file {path}") from exc
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise DataShapeError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if expected is not None and header != expected:
        raise DataShapeError(f"{path}: expected columns {expected}, found {header}")
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataShapeError(f"{path}:{i}: {len(row)} fields, header has {len(header)}")
    return header, body


def _floats(path: Path, rows: list[list[str]], cols: slice) -> np.ndarray:
    try:
        return np.array([[float(v) for v in r[cols]] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    except ValueError as exc:
        raise DataShapeError(f"{path}: non-numeric value ({exc})") from exc


def _timestamps(path: Path, rows: list[list[str]]) -> np.ndarray:
    return np.array([_parse_date(r[0], f"{path}:{i}") for i, r in enumerate(rows, start=2)], dtype=np.int64)


def write_wide(path: Path, timestamps: np.ndarray, values: np.ndarray, grid: DepthGrid) -> None:
    header = ["timestamp"] + [depth_header(z) for z in grid.depths]
    write_csv(path, header, ([_date(t)] + [_fmt(v) for v in row] for t, row in zip(timestamps, values)))


def read_wide(path: Path, grid: DepthGrid) -> tuple[np.ndarray, np.ndarray]:
    _, rows = read_csv(path, ["timestamp"] + [depth_header(z) for z in grid.depths])
    return _timestamps(path, rows), _floats(path, rows, slice(1, None))


def write_series(path: Path, timestamps: np.ndarray, values: np.ndarray) -> None:
    write_csv(path, ["timestamp", "value"], ([_date(t), _fmt(v)] for t, v in zip(timestamps, values)))


def read_series(path: Path) -> tuple[np.ndarray, np.ndarray]:
    _, rows = read_csv(path, ["timestamp", "value"])
    return _timestamps(path, rows), _floats(path, rows, slice(1, 2))[:, 0]


def write_obs(path: Path, timestamps: np.ndarray, obs: ObservationSet, depths: np.ndarray | None) -> None:
    order = np.lexsort((obs.d_index, obs.t_index))
    if depths is None:
        rows = ([_date(timestamps[t]), _fmt(v)] for t, v in zip(obs.t_index[order], obs.value[order]))
        write_csv(path, ["timestamp", "value"], rows)
        return
    rows = ([_date(timestamps[t]), _fmt(depths[d]), _fmt(v)]
            for t, d, v in zip(obs.t_index[order], obs.d_index[order], obs.value[order]))
    write_csv(path, ["timestamp", "depth_m", "temp_c"], rows)


def read_obs(path: Path, timestamps: np.ndarray, depths: np.ndarray | None) -> ObservationSet:
    scalar = depths is None
    header = ["timestamp", "value"] if scalar else ["timestamp", "depth_m", "temp_c"]
    _, rows = read_csv(path, header)
    days = _timestamps(path, rows)
    t = days - timestamps[0] if timestamps.size else days
    if np.any((t < 0) | (t >= timestamps.size)):
        raise DataShapeError(f"{path}: observation dates fall outside the driver period")
    n = 1 if scalar else depths.size
    if scalar:
        d = np.zeros(len(rows), dtype=np.int64)
        v = _floats(path, rows, slice(1, 2))[:, 0]
    else:
        z = _floats(path, rows, slice(1, 2))[:, 0]
        d = np.searchsorted(depths, z)
        bad = (d >= depths.size) | (depths[np.minimum(d, depths.size - 1)] != z)
        if np.any(bad):
            raise DataShapeError(f"{path}: depth {z[bad][0]} is not on the configured grid")
        v = _floats(path, rows, slice(2, 3))[:, 0]
    mask = np.zeros((timestamps.size, n), dtype=bool)
    mask[t, d] = True
    if mask.sum() != len(rows):
        raise DataShapeError(f"{path}: duplicate observation entries")
    dense = np.zeros(mask.shape)
    dense[t, d] = v
    return ObservationSet.from_dense(dense, mask)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(config: dict) -> None:
    sim = config["sim"]
    grid = grid_from(config)
    out = io_path(config, "data_dir")
    n_days = days_in_years(sim["years"], sim["start"])
    data = generate_dataset(
        n_days, sim["seed"], SimConfig(grid=grid, seed=sim["seed"]),
        missing_rate=sim["missing_rate"], noise_sigma=sim["noise_sigma"],
        scalar_missing_rate=sim["scalar_missing_rate"], scalar_noise_sigma=sim["scalar_noise_sigma"],
        phy_perturbation=Perturbation(**sim["perturbation"]), start=sim["start"],
    )
    ts = data.drivers.timestamps
    write_csv(out / "drivers.csv", ["timestamp", *DRIVER_COLUMNS],
              ([_date(t)] + [_fmt(v) for v in row] for t, row in zip(ts, data.drivers.values)))
    write_wide(out / "truth.csv", ts, data.truth.values, grid)
    write_wide(out / "phy.csv", ts, data.phy.values, grid)
    write_obs(out / "obs.csv", ts, data.obs, grid.depths)
    write_series(out / "scalar_truth.csv", ts, data.scalar_truth)
    write_series(out / "scalar_phy.csv", ts, data.scalar_phy)
    write_obs(out / "scalar_obs.csv", ts, data.scalar_obs, None)


def read_drivers(config: dict) -> DriverSeries:
    path = io_path(config, "data_dir") / "drivers.csv"
    _, rows = read_csv(path, ["timestamp", *DRIVER_COLUMNS])
    ts = _timestamps(path, rows)
    if ts.size > 1 and np.any(np.diff(ts) != 1):
        raise DataShapeError(f"{path}: timestamps must be consecutive days")
    return DriverSeries(_floats(path, rows, slice(1, None)), ts)


def _aligned(path: Path, ts: np.ndarray, expected: np.ndarray) -> None:
    if ts.size != expected.size or not np.array_equal(ts, expected):
        raise DataShapeError(f"{path}: {ts.size} rows do not match the {expected.size} driver days")


def load_benchmark(config: dict) -> Benchmark:
    """Benchmark assembled from the files written by ``gen``."""
    data_dir = io_path(config, "data_dir")
    drivers = read_drivers(config)
    ts = drivers.timestamps
    n_train = days_in_years(config["sim"]["train_years"], _date(ts[0])) if ts.size else 0
    if not 0 < n_train < ts.size:
        raise DataShapeError(f"the training period ({n_train} days) does not fit in {ts.size} driver days")
    if config["model"]["target"] == "scalar":
        p_ts, phy = read_series(data_dir / "scalar_phy.csv")
        _aligned(data_dir / "scalar_phy.csv", p_ts, ts)
        obs = read_obs(data_dir / "scalar_obs.csv", ts, None)
        truth = None
        if (data_dir / "scalar_truth.csv").exists():
            t_ts, t_vals = read_series(data_dir / "scalar_truth.csv")
            _aligned(data_dir / "scalar_truth.csv", t_ts, ts)
            truth = t_vals[:, None]
        return Benchmark(drivers, phy[:, None], obs, n_train, None, truth)
    grid = grid_from(config)
    p_ts, phy = read_wide(data_dir / "phy.csv", grid)
    _aligned(data_dir / "phy.csv", p_ts, ts)
    obs = read_obs(data_dir / "obs.csv", ts, grid.depths)
    truth = None
    if (data_dir / "truth.csv").exists():
        t_ts, truth = read_wide(data_dir / "truth.csv", grid)
        _aligned(data_dir / "truth.csv", t_ts, ts)
    return Benchmark(drivers, phy, obs, n_train, grid, truth)


def _run_name(config: dict) -> str:
    return f"{config['model']['variant']}_seed{config['train']['seed']}"


def checkpoint_path(config: dict) -> Path:
    return io_path(config, "run_dir") / _run_name(config) / "checkpoint.json"


def cmd_train(config: dict) -> None:
    bench = load_benchmark(config)
    variant, seed = config["model"]["variant"], config["train"]["seed"]
    result = train_model(variant, bench, train_config(config), seed)
    run = checkpoint_path(config).parent
    meta = {"variant": variant, "seed": seed, "config": config, "best_epoch": result.best_epoch,
            "tau": result.tau, "energy_scale": result.energy_scale, "density_scale": result.density_scale}
    try:
        run.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run / "checkpoint.json", result.params, meta)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint in {run}: {exc.strerror or exc}") from exc
    write_csv(run / "history.csv", ["epoch", "train_loss", "val_rmse"],
              ([str(e), _fmt(loss), _fmt(val)] for e, loss, val in result.history))


def _load_model(config: dict):
    path = checkpoint_path(config)
    try:
        params, meta = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataIOError(f"missing checkpoint {path}; run 'pgrnn train' first") from exc
    except (OSError, ValueError, KeyError) as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, meta


def model_predictions(config: dict, bench: Benchmark) -> np.ndarray:
    params, meta = _load_model(config)
    X = model_inputs(meta.get("variant", config["model"]["variant"]), bench)
    if params.input_size != X.shape[1] or params.output_size != bench.n_out:
        raise DataShapeError(f"checkpoint {checkpoint_path(config)} does not fit the data "
                             f"({params.input_size} inputs/{params.output_size} outputs vs {X.shape[1]}/{bench.n_out})")
    return predict(params, X, config["model"]["window"])


def _write_predictions(config: dict, bench: Benchmark, pred: np.ndarray) -> None:
    run = checkpoint_path(config).parent
    if bench.grid is None:
        write_series(run / "predictions.csv", bench.timestamps, pred[:, 0])
    else:
        write_wide(run / "predictions.csv", bench.timestamps, pred, bench.grid)


def cmd_eval(config: dict) -> None:
    """metrics.csv with a PHY row and, when a checkpoint exists, a row for the trained variant."""
    bench = load_benchmark(config)
    test_ts = bench.timestamps[bench.n_train:]
    seed = config["train"]["seed"]
    if not bench.test_obs.mask.any():
        raise DataShapeError("no observations in the test period")
    rows = [("PHY", evaluate(bench.phy[bench.n_train:], bench.test_obs, test_ts))]
    if checkpoint_path(config).exists():
        pred = model_predictions(config, bench)
        _write_predictions(config, bench, pred)
        rows.append((config["model"]["variant"], evaluate(pred[bench.n_train:], bench.test_obs, test_ts)))
    header = ["variant", "rmse_overall", "rmse_winter", "rmse_summer", "phy_inconsistency", "seed"]
    write_csv(io_path(config, "run_dir") / "metrics.csv", header,
              ([name, _fmt(m.rmse_overall), _fmt(m.rmse_winter), _fmt(m.rmse_summer),
                _fmt(m.phy_inconsistency), str(seed)] for name, m in rows))


def _profile_series(config: dict, bench: Benchmark, source: str) -> np.ndarray:
    if source == "phy":
        return bench.phy
    if source == "truth":
        if bench.truth is None:
            raise DataIOError(f"missing input file {io_path(config, 'data_dir') / 'truth.csv'}")
        return bench.truth
    return model_predictions(config, bench)


def _require_profiles(config: dict, command: str) -> None:
    if config["model"]["target"] != "temperature":
        raise ConfigError(f"'{command}' needs model.target = 'temperature'")


def cmd_thermocline(config: dict) -> float:
    """Write thermocline.csv for the configured source; returns its roughness (m/day)."""
    _require_profiles(config, "thermocline")
    bench = load_benchmark(config)
    values = _profile_series(config, bench, config["io"]["source"])
    depths = physics.thermocline_series(values, bench.grid)
    write_csv(io_path(config, "run_dir") / "thermocline.csv", ["timestamp", "depth_m"],
              ([_date(t), _fmt(d)] for t, d in zip(bench.timestamps, depths)))
    return physics.thermocline_roughness(depths)


def cmd_export_plot(config: dict) -> None:
    """Long-format plot.csv: temperature and density of truth, process model and
    (when trained) the model, one row per (timestamp, depth, series)."""
    _require_profiles(config, "export-plot")
    bench = load_benchmark(config)
    series = {}
    if bench.truth is not None:
        series["truth"] = bench.truth
    series["phy"] = bench.phy
    if checkpoint_path(config).exists():
        series[config["model"]["variant"]] = model_predictions(config, bench)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DensityRangeWarning)
        for name in list(series):
            series[f"density_{name}"] = physics.density(series[name])
    depths = [_fmt(z) for z in bench.grid.depths]
    dates = [_date(t) for t in bench.timestamps]

    def rows():
        for name, values in series.items():
            for i, day in enumerate(dates):
                for j, z in enumerate(depths):
                    yield day, z, name, _fmt(values[i, j])

    write_csv(io_path(config, "run_dir") / "plot.csv", ["timestamp", "depth", "series", "value"], rows())


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "thermocline": cmd_thermocline,
    "export-plot": cmd_export_plot,
}


def write_default_config(path) -> None:
    Path(path).write_text(yaml.safe_dump(DEFAULTS, sort_keys=False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgrnn", description="Physics-guided recurrent models for lake temperature.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="YAML experiment config")
    p = sub.add_parser("init-config", help="write a config file holding every default")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            try:
                write_default_config(args.path)
            except OSError as exc:
                raise DataIOError(f"cannot write {args.path}: {exc.strerror or exc}") from exc
            return EXIT_OK
        config = load_config(args.config)
        result = COMMANDS[args.command](config)
        if args.command == "thermocline" and result is not None:
            print(f"thermocline roughness {result:.4f} m/day")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        # shape and alignment checks inside the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
