"""Loss assembly, optimisation and evaluation for the model variants.

Variants:

* ``ANN``    feed-forward network on the drivers, one row at a time
* ``RNN``    LSTM on the drivers, observations only
* ``PGRNN0`` LSTM on drivers plus the process-model output, with pseudo-labels
* ``PGRNN``  as ``PGRNN0`` plus the density and energy penalties

``PHY`` (the process model itself) needs no training and is evaluated directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import physics
from .hybrid import TrainingTensor, augment_features, fill_pseudo_labels, observed_targets
from .lakesim import DriverSeries, ObservationSet, generate_dataset
from .physics import DensityRangeWarning, DepthGrid, TempField
from .seqmodel import AnnParams, LstmParams, Normalizer, ann_forward, head, unroll

VARIANTS = ("ANN", "RNN", "PGRNN0", "PGRNN")
SEASONS = {"winter": (12, 1, 2), "summer": (6, 7, 8)}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    sup: float = 1.0
    dp: float = 0.0
    ec: float = 0.0
    w_obs: float = 1.0
    w_phy: float = 0.2

    def __post_init__(self):
        for name in ("sup", "dp", "ec", "w_obs", "w_phy"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")


def supervised_loss(pred, targets: np.ndarray, weights: np.ndarray, scale: float = 1.0):
    """``sum(w * (pred - target)^2) / sum(w)``, divided by ``scale``."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("all loss weights are zero: nothing supervises the prediction")
    diff = pred - np.asarray(targets, dtype=np.float64)
    return dc.sum(dc.square(diff) * (w / (total * scale)))


def total_loss(pred, tensor: TrainingTensor, drivers, grid: DepthGrid | None, weights: LossWeights, *,
               tau: float = 0.0, energy_scale: float = 1.0, density_scale: float = 1.0, sup_scale: float = 1.0):
    """Weighted squared error plus the weighted physics penalties.

    ``pred`` is ``(..., T, n_out)`` in physical units (array, tensor or
    :class:`TempField`). The penalties are divided by ``density_scale`` and
    ``energy_scale`` so that they are of order one; ``sup_scale`` does the
    same for the squared error. Penalties with a zero weight are not
    evaluated at all.
    """
    y = pred.values if isinstance(pred, TempField) else pred
    shape = np.shape(y.value if isinstance(y, dc.Tensor) else y)
    if shape != tensor.targets.shape:
        raise ValueError(f"prediction shape {shape} does not match targets {tensor.targets.shape}")
    if energy_scale <= 0 or density_scale <= 0 or sup_scale <= 0:
        raise ValueError("scales must be positive")
    loss = weights.sup * supervised_loss(y, tensor.targets, tensor.weights, sup_scale)
    if weights.dp > 0 or weights.ec > 0:
        if grid is None:
            raise ValueError("physics penalties need a depth grid")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DensityRangeWarning)
            if weights.dp > 0:
                loss = loss + (weights.dp / density_scale) * physics.density_penalty(y)
            if weights.ec > 0:
                pen = physics.energy_penalty(y, np.asarray(drivers, dtype=np.float64), grid, tau)
                loss = loss + (weights.ec / energy_scale) * pen
    return loss


# ---------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "OptimizerState":
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ValueError("invalid optimiser hyperparameters")
        zeros = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> tuple[dict, OptimizerState]:
    """One adaptive-moment update with bias correction; inputs are not modified."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("parameter, gradient and state keys differ")
    for k, g in grads.items():
        g = np.asarray(g)
        if g.shape != np.shape(params[k]):
            raise dc.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {k}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    """Rescale all gradients together so their joint norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    # scale before squaring so huge but finite gradients do not overflow
    peak = max(float(np.max(np.abs(g), initial=0.0)) for g in grads.values())
    if peak == 0.0:
        return grads
    norm = peak * float(np.sqrt(sum(float(np.sum(np.square(g / peak))) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class Benchmark:
    """One seeded experiment: drivers, process-model output and observations
    for the whole period, split chronologically at ``n_train``."""

    drivers: DriverSeries
    phy: np.ndarray  # (T, n_out)
    obs: ObservationSet
    n_train: int
    grid: DepthGrid | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.drivers)
        if self.phy.shape[0] != T or self.obs.shape[0] != T:
            raise ValueError(f"drivers have {T} steps, process model {self.phy.shape[0]}, observations {self.obs.shape[0]}")
        if self.phy.shape != self.obs.shape:
            raise ValueError(f"process model shape {self.phy.shape} differs from observations {self.obs.shape}")
        if not 0 < self.n_train < T:
            raise ValueError(f"split index {self.n_train} outside (0, {T})")

    @property
    def n_out(self) -> int:
        return self.phy.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.drivers.timestamps

    @property
    def test_obs(self) -> ObservationSet:
        return self.obs.rows(self.n_train, len(self.drivers))


def days_in_years(years: int, start: str = "1981-04-01") -> int:
    begin = np.datetime64(start, "D")
    end = np.datetime64(f"{int(str(begin)[:4]) + years}{str(begin)[4:]}", "D")
    return int((end - begin).astype(int))


def build_benchmark(seed: int, train_years: int = 8, test_years: int = 4, *, scalar: bool = False,
                    **dataset_kwargs) -> Benchmark:
    """Temperature (or scalar) benchmark from the simulator, first ``train_years`` for training."""
    n_days = days_in_years(train_years + test_years)
    n_train = days_in_years(train_years)
    data = generate_dataset(n_days, seed, **dataset_kwargs)
    if scalar:
        return Benchmark(data.drivers, data.scalar_phy[:, None], data.scalar_obs, n_train, None,
                         data.scalar_truth[:, None])
    return Benchmark(data.drivers, data.phy.values, data.obs, n_train, data.grid, data.truth.values)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 16
    window: int = 200
    stride: int | None = None  # defaults to window // 2
    burn_in: int | None = None  # unsupervised leading steps per window; defaults to the stride
    epochs: int = 150
    batch: int = 8
    lr: float = 5e-3
    val_fraction: float = 0.2
    lambda_dp: float = 1.0
    lambda_ec: float = 0.01
    w_obs: float = 1.0
    w_phy: float = 0.2
    tau_fraction: float = 0.05  # energy tolerance as a fraction of the median daily |dH|
    clip_norm: float | None = 1.0  # global gradient-norm clip; None disables

    def __post_init__(self):
        if self.hidden < 1 or self.window < 2 or self.epochs < 1 or self.batch < 1:
            raise ValueError("hidden, window, epochs and batch must be positive (window >= 2)")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.window:
            raise ValueError("burn_in must lie in [0, window)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lr <= 0 or self.tau_fraction < 0:
            raise ValueError("lr must be positive and tau_fraction non-negative")
        LossWeights(1.0, self.lambda_dp, self.lambda_ec, self.w_obs, self.w_phy)

    @property
    def step(self) -> int:
        return self.stride or max(1, self.window // 2)

    @property
    def warmup(self) -> int:
        return self.step if self.burn_in is None else self.burn_in


def variant_weights(variant: str, config: TrainConfig, physics_ok: bool = True) -> LossWeights:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "PGRNN" and physics_ok:
        return LossWeights(1.0, config.lambda_dp, config.lambda_ec, config.w_obs, config.w_phy)
    if variant in ("PGRNN", "PGRNN0"):
        return LossWeights(1.0, 0.0, 0.0, config.w_obs, config.w_phy)
    return LossWeights(1.0, 0.0, 0.0, config.w_obs, 0.0)


def uses_phy(variant: str) -> bool:
    return variant in ("PGRNN0", "PGRNN")


def model_inputs(variant: str, bench: Benchmark) -> np.ndarray:
    if uses_phy(variant):
        return augment_features(bench.drivers, bench.phy)
    return bench.drivers.values.copy()


def training_tensor(variant: str, bench: Benchmark, weights: LossWeights) -> TrainingTensor:
    X = model_inputs(variant, bench)
    if uses_phy(variant):
        targets, w = fill_pseudo_labels(bench.obs, bench.phy, weights.w_obs, weights.w_phy)
    else:
        targets, w = observed_targets(bench.obs, weights.w_obs)
    return TrainingTensor(X, targets, w)


def window_starts(n: int, length: int, stride: int) -> list[int]:
    """Window starts covering ``range(n)``; the last window is flush with the end."""
    if n <= length:
        return [0]
    starts = list(range(0, n - length + 1, stride))
    if starts[-1] + length < n:
        starts.append(n - length)
    return starts


@dataclass(frozen=True, eq=False)
class TrainResult:
    variant: str
    params: LstmParams | AnnParams
    history: list = field(default_factory=list)  # (epoch, train_loss, val_rmse)
    best_epoch: int = 0
    tau: float = 0.0
    energy_scale: float = 1.0
    density_scale: float = 1.0


def _forward(params, Xn):
    if params.kind == "ann":
        return ann_forward(Xn, params)
    return head(unroll(Xn, params), params)


def predict_normalised(params, X: np.ndarray, window: int) -> np.ndarray:
    """Network output for a whole series, run as overlapping stateless windows.

    Every row after the first window is taken from the second half of a
    window, so it has at least ``window // 2`` days of context.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if params.kind == "ann":
        return np.asarray(ann_forward(params.norm.inputs(X), params))
    half = max(1, window // 2)
    starts = window_starts(n, window, half)
    length = min(window, n)
    Xn = params.norm.inputs(np.stack([X[s: s + length] for s in starts]))
    out = np.asarray(_forward(params, Xn))
    pred = np.empty((n, out.shape[-1]))
    pred[:length] = out[0]
    filled = length
    for s, window_out in zip(starts[1:], out[1:]):
        pred[filled: s + length] = window_out[filled - s:]
        filled = s + length
    return pred


def predict(params, X: np.ndarray, window: int = 200) -> np.ndarray:
    """Predictions in physical units for the whole series."""
    if params.norm is None:
        raise ValueError("parameters carry no normalisation statistics")
    return params.norm.restore(predict_normalised(params, X, window))


def _rmse(pred: np.ndarray, obs: ObservationSet) -> float | None:
    if not obs.mask.any():
        return None
    diff = pred[obs.mask] - obs.dense()[obs.mask]
    return float(np.sqrt(np.mean(diff ** 2)))


def density_statistics(phy: np.ndarray) -> float:
    """Mean absolute density step between adjacent depths of the process model (kg/m3)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DensityRangeWarning)
        scale = float(np.mean(np.abs(np.diff(physics.density(phy), axis=-1))))
    return scale if scale > 0 else 1.0


def energy_statistics(phy: np.ndarray, grid: DepthGrid, tau_fraction: float) -> tuple[float, float]:
    """Median absolute daily heat change of the process model, and the tolerance derived from it."""
    heat = physics.heat_content(phy, grid)
    scale = float(np.median(np.abs(np.diff(heat))))
    if not scale > 0:
        scale = 1.0
    return scale, tau_fraction * scale


def train_model(variant: str, data: Benchmark, config: TrainConfig | None = None, seed: int = 0) -> TrainResult:
    """Fit one variant on the training period of ``data``.

    The last ``val_fraction`` of the training period is held out; the
    parameters with the lowest validation RMSE over all epochs are returned.
    """
    config = config or TrainConfig()
    physics_ok = data.grid is not None and data.n_out >= 2
    weights = variant_weights(variant, config, physics_ok)
    full = training_tensor(variant, data, weights)
    n_fit = data.n_train - int(round(config.val_fraction * data.n_train))
    if n_fit < 2:
        raise ValueError("training period too short")
    fit = full.rows(0, n_fit)
    if fit.weights.sum() <= 0:
        raise ValueError("no supervised cells in the training period")
    val_obs = data.obs.rows(n_fit, data.n_train)
    norm = Normalizer.fit(fit.X, fit.targets, fit.weights)
    sup_scale = float(np.mean(norm.y_std ** 2))
    energy_scale, tau = (energy_statistics(data.phy[:n_fit], data.grid, config.tau_fraction)
                         if physics_ok else (1.0, 0.0))
    density_scale = density_statistics(data.phy[:n_fit]) if physics_ok else 1.0

    D = fit.X.shape[1]
    if variant == "ANN":
        params = AnnParams.init(D, config.hidden, data.n_out, seed)
    else:
        params = LstmParams.init(D, config.hidden, data.n_out, seed)
    params = replace(params, norm=norm)

    starts = window_starts(n_fit, config.window, config.step)
    length = min(config.window, n_fit)
    Xw = norm.inputs(np.stack([fit.X[s: s + length] for s in starts]))
    Tw = np.stack([fit.targets[s: s + length] for s in starts])
    Ww = np.stack([fit.weights[s: s + length] for s in starts])
    if variant != "ANN":
        # the state starts from zero in every window, so the leading steps only
        # warm it up; the first window has no earlier context to lose
        for k, s in enumerate(starts):
            if s > 0:
                Ww[k, : min(config.warmup, length)] = 0.0
    Dw = np.stack([data.drivers.values[s: s + length] for s in starts])
    # drop windows that carry no supervision at all
    keep = Ww.reshape(len(starts), -1).sum(axis=1) > 0
    Xw, Tw, Ww, Dw = Xw[keep], Tw[keep], Ww[keep], Dw[keep]

    rng = np.random.default_rng(seed)
    state = OptimizerState.init(params.weights(), lr=config.lr)
    best, best_score, best_epoch = params, np.inf, 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(Xw))
        losses = []
        for b, lo in enumerate(range(0, len(order), config.batch)):
            idx = np.sort(order[lo: lo + config.batch])
            g = dc.Graph()
            bound = params.bind(g)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    pred = norm.restore(_forward(bound, Xw[idx]))
                    batch = TrainingTensor(Xw[idx], Tw[idx], Ww[idx])
                    loss = total_loss(pred, batch, Dw[idx], data.grid, weights, tau=tau,
                                      energy_scale=energy_scale, density_scale=density_scale,
                                      sup_scale=sup_scale)
                    grads = dc.backward(g, loss)
            except (dc.NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            named = clip_gradients({k: grads[t] for k, t in bound.weights().items()}, config.clip_norm)
            new, state = adam_step(params.weights(), named, state)
            params = params.with_weights(new)
            losses.append(float(loss.value))
        train_loss = float(np.mean(losses))
        if val_obs.mask.any():
            pred = predict(params, full.X[: data.n_train], config.window)[n_fit:]
            score = _rmse(pred, val_obs)
        else:
            score = train_loss
        history.append((epoch, train_loss, score))
        if score < best_score:
            best, best_score, best_epoch = params, score, epoch
    return TrainResult(variant, best, history, best_epoch, tau, energy_scale, density_scale)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Metrics:
    rmse_overall: float | None
    rmse_winter: float | None = None
    rmse_summer: float | None = None
    phy_inconsistency: float | None = None


def _months(timestamps: np.ndarray) -> np.ndarray:
    days = np.asarray(timestamps).astype("datetime64[D]")
    return days.astype("datetime64[M]").astype(int) % 12 + 1


def evaluate(pred, obs: ObservationSet, timestamps=None, season_map: dict | None = None) -> Metrics:
    """RMSE over observed cells overall and per season, plus the density
    inconsistency of every predicted cell (profiles only).

    ``pred`` is a :class:`TempField` or a ``(T, n_out)`` array aligned with
    ``obs``; ``timestamps`` is required for arrays when seasons are wanted.
    A season without observations is reported as ``None``.
    """
    season_map = SEASONS if season_map is None else season_map
    if isinstance(pred, TempField):
        timestamps = pred.timestamps if timestamps is None else timestamps
        values = pred.values
    else:
        values = np.asarray(pred, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
    if values.shape != obs.shape:
        raise ValueError(f"prediction shape {values.shape} does not match observations {obs.shape}")
    if not obs.mask.any():
        raise ValueError("no observations to evaluate against")
    seasons = {}
    if timestamps is not None:
        months = _months(timestamps)
        if months.shape[0] != values.shape[0]:
            raise ValueError("timestamps and predictions differ in length")
        for name in ("winter", "summer"):
            rows = np.isin(months, season_map.get(name, ()))
            sub = ObservationSet.from_dense(np.where(obs.mask, np.nan_to_num(obs.dense()), 0.0),
                                            obs.mask & rows[:, None])
            seasons[name] = _rmse(values, sub)
    inconsistency = physics.phy_inconsistency(values) if values.shape[1] >= 2 else None
    return Metrics(_rmse(values, obs), seasons.get("winter"), seasons.get("summer"), inconsistency)


def evaluate_model(result: TrainResult | LstmParams | AnnParams, data: Benchmark, window: int = 200):
    """Test-period predictions and metrics for a trained model."""
    params = result.params if isinstance(result, TrainResult) else result
    variant = result.variant if isinstance(result, TrainResult) else ("ANN" if params.kind == "ann" else None)
    X = model_inputs(variant or ("PGRNN" if params.input_size > physics.N_DRIVERS else "RNN"), data)
    pred = predict(params, X, window)[data.n_train:]
    return pred, evaluate(pred, data.test_obs, data.timestamps[data.n_train:])


def evaluate_phy(data: Benchmark) -> Metrics:
    """Metrics of the process model itself over the test period."""
    return evaluate(data.phy[data.n_train:], data.test_obs, data.timestamps[data.n_train:])


def format_report(variant: str, metrics: Metrics) -> str:
    """One table row, e.g. ``"PGRNN 1.4791 0.0732"``; absent values print as ``-``."""
    def cell(v):
        return "-" if v is None else f"{v:.4f}"
    return f"{variant} {cell(metrics.rmse_overall)} {cell(metrics.phy_inconsistency)}"


def run_experiment(seeds, variants=VARIANTS, config: TrainConfig | None = None, *, scalar: bool = False,
                   include_phy: bool = True, **bench_kwargs) -> list[dict]:
    """Train and evaluate every variant for every seed; one row per (variant, seed)."""
    config = config or TrainConfig()
    rows = []
    for seed in seeds:
        data = build_benchmark(seed, scalar=scalar, **bench_kwargs)
        if include_phy:
            rows.append({"variant": "PHY", "seed": seed, **evaluate_phy(data).__dict__})
        for variant in variants:
            result = train_model(variant, data, config, seed)
            _, metrics = evaluate_model(result, data, config.window)
            rows.append({"variant": variant, "seed": seed, **metrics.__dict__})
    return rows


def median_by_variant(rows: list[dict], key: str) -> dict:
    out = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        vals = [r[key] for r in rows if r["variant"] == variant and r[key] is not None]
        out[variant] = float(np.median(vals)) if vals else None
    return out
