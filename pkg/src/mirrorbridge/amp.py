"""Alternating minimization for the self-coupled bridge.

One outer iteration does two KL projections. The direct projection
keeps the previous symmetric drift as the forward drift, resets the
initial marginal by drawing fresh data samples, simulates a trajectory
cache, and regresses a backward-drift estimate onto finite-difference
targets. The reverse projection is closed form: the new symmetric drift
is the pointwise average of forward and backward drifts.

Time parametrization of the backward estimate: the regression targets
approximate the reversal drift as a function of forward time, while
averaging needs the reversed process's own clock. The backward model is
therefore registered at reversed time (s = 1 - t), so that evaluating
forward and backward models at equal arguments is the correct average.

The affine family is fitted by exact per-time least squares and the
average collapses to a single affine drift. The neural family trains by
minibatch Adam and the pending average is distilled into a fresh
network after every outer iteration, keeping evaluation cost flat; the
distillation fit error is logged so it cannot silently degrade.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mlp
from .data import SampleBatch, empirical_moments
from .drifts import (
    AffineDrift,
    AverageDrift,
    DriftModel,
    NeuralDrift,
    OUDrift,
    average_drifts,
    collapse_affine_average,
    drift_from_json,
    drift_to_json,
)
from .errors import InvalidArgumentError, SimulationBlowupError
from .oracle import GaussianBridgeSolution
from .sde import (
    TimeGrid,
    TrajectoryCache,
    make_time_grid,
    simulate_cache,
    simulate_terminal,
)

METRIC_COLUMNS = (
    "outer_iter",
    "terminal_mean",
    "terminal_var",
    "joint_cov",
    "beta_target",
    "kl_gap",
    "distill_err",
)

# Seed-derivation tags so every random stream is keyed independently.
_TAG_CACHE = 1
_TAG_SIGMA = 2
_TAG_SIM = 3
_TAG_INIT = 4
_TAG_BATCH = 5
_TAG_DISTILL = 6
_TAG_EVAL = 7
_TAG_PROBE = 8


def derive_seed(*parts) -> int:
    """Stable child seed from nonnegative integer parts."""
    entropy = tuple(int(p) for p in parts)
    if any(p < 0 for p in entropy):
        raise InvalidArgumentError("seed parts must be nonnegative")
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class AMPConfig:
    """Everything one training run needs, JSON-serializable and hashable."""

    dim: int = 1
    alpha: float = 1.0
    family: str = "neural"
    outer_iterations: int = 20
    inner_iterations: int = 10_000
    cache_size: int = 10_000
    refresh_period: int = 1_000
    batch_size: int = 128
    grid_mode: str = "uniform"
    num_steps: int = 20
    gamma_min: float = 1e-5
    gamma_max: float = 0.1
    sigma_min: float = 1.0
    sigma_max: float = 1.0
    seed: int = 0
    # "shared" evaluates both drift corrections at the pair's earlier
    # time, matching the printed discretization; "staggered" uses each
    # state's own time. Both are first-order consistent.
    correction_times: str = "shared"
    hidden_width: int = 128
    hidden_depth: int = 4
    learning_rate: float = 1e-4
    distill_iterations: int = 2_000
    eval_paths: int = 100_000
    eval_sigma: float = 1.0
    # Metric evaluation integrates the trained SDE on its own fine
    # uniform grid; the config grid governs training resolution only.
    eval_num_steps: int = 200

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgumentError("dim must be >= 1")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidArgumentError("alpha must be positive")
        if self.family not in ("neural", "affine"):
            raise InvalidArgumentError(f"unknown drift family {self.family!r}")
        if self.outer_iterations < 0 or self.inner_iterations < 0:
            raise InvalidArgumentError("iteration counts must be nonnegative")
        if min(self.cache_size, self.refresh_period, self.batch_size) < 1:
            raise InvalidArgumentError("cache, refresh, and batch sizes must be positive")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise InvalidArgumentError("need 0 < sigma_min <= sigma_max")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be nonnegative")
        if self.correction_times not in ("shared", "staggered"):
            raise InvalidArgumentError("correction_times must be 'shared' or 'staggered'")
        if self.eval_paths < 2:
            raise InvalidArgumentError("eval_paths must be >= 2")
        if self.eval_sigma <= 0:
            raise InvalidArgumentError("eval_sigma must be positive")
        if self.eval_num_steps < 1:
            raise InvalidArgumentError("eval_num_steps must be >= 1")

    def make_grid(self) -> TimeGrid:
        return make_time_grid(self.grid_mode, self.num_steps, self.gamma_min, self.gamma_max)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "AMPConfig":
        return cls(**doc)


@dataclass
class AMPState:
    """Mutable outer-iteration state owned by a single trainer."""

    current_drift: DriftModel
    previous_drift: DriftModel
    optimizer_state: mlp.AdamState | None
    outer_index: int
    metric_log: list = field(default_factory=list)
    last_cache: TrajectoryCache | None = None


def init_amp_state(config: AMPConfig) -> AMPState:
    reference = OUDrift(config.alpha)
    return AMPState(
        current_drift=reference,
        previous_drift=reference,
        optimizer_state=None,
        outer_index=0,
    )


def build_regression_targets(
    cache: TrajectoryCache,
    prior_drift: DriftModel,
    correction_times: str = "shared",
):
    """Finite-difference backward-drift targets from a trajectory cache.

    For consecutive states (X_i, X_{i+1}) of every trajectory, skipping
    the final pair, emits the tuple with t the time of X_{i+1}, input
    X_{i+1}, sigma the trajectory's noise level, and target
    (X_i - X_{i+1}) / gamma + f(X_{i+1}) - f(X_i), where f is the drift
    the cache was generated under. Returns flat arrays (t, x, target,
    sigma) with N * (M - 1) rows.
    """
    grid = cache.grid
    steps = grid.steps
    if np.any(steps <= 0):
        raise InvalidArgumentError("grid contains a non-positive step")
    times = grid.times
    m = grid.num_steps
    n, _, d = cache.states.shape
    if m < 2:
        raise InvalidArgumentError("need at least two steps to form targets")
    sigmas = cache.sigmas

    t_parts, x_parts, y_parts, s_parts = [], [], [], []
    for k in range(m - 1):
        x_lo = cache.states[:, k]
        x_hi = cache.states[:, k + 1]
        if correction_times == "shared":
            t_hi = times[k]
        else:
            t_hi = times[k + 1]
        correction = prior_drift.eval(t_hi, x_hi, sigmas) - prior_drift.eval(
            times[k], x_lo, sigmas
        )
        target = (x_lo - x_hi) / steps[k] + correction
        t_parts.append(np.full(n, times[k + 1]))
        x_parts.append(x_hi)
        y_parts.append(target)
        s_parts.append(sigmas)
    return (
        np.concatenate(t_parts),
        np.concatenate(x_parts),
        np.concatenate(y_parts),
        np.concatenate(s_parts),
    )


def _draw_cache(config: AMPConfig, forward: DriftModel, data_sampler, outer: int, refresh: int):
    """Fresh initial samples, fresh sigmas, one simulated cache."""
    x0 = np.asarray(
        data_sampler(config.cache_size, derive_seed(config.seed, outer, refresh, _TAG_CACHE)),
        dtype=np.float64,
    )
    if x0.ndim == 1:
        x0 = x0[:, None]
    if np.all(x0.std(axis=0) < 1e-12):
        raise InvalidArgumentError(
            "initial distribution is degenerate (zero variance); the bridge collapses"
        )
    gen = np.random.default_rng(derive_seed(config.seed, outer, refresh, _TAG_SIGMA))
    sigmas = gen.uniform(config.sigma_min, config.sigma_max, size=config.cache_size)
    try:
        return simulate_cache(
            x0,
            forward,
            config.make_grid(),
            sigmas,
            rng_seed=derive_seed(config.seed, outer, refresh, _TAG_SIM),
        )
    except SimulationBlowupError as err:
        raise SimulationBlowupError(
            f"outer iteration {outer}: {err}", err.trajectory, err.step
        ) from err


def _reversed_registration_times(grid: TimeGrid) -> np.ndarray:
    """Reversed-time registration knot for each regression pair.

    The pair (X_k, X_{k+1}) spans [t_k, t_{k+1}] and its target is a
    difference quotient over that whole interval, so the fitted piece is
    registered at the interval midpoint (in reversed time). Midpoint
    registration halves the leading discretization bias relative to
    either endpoint. Order matches the pair-major target layout.
    """
    t_mid = 0.5 * (grid.times[:-1] + grid.times[1:])
    return 1.0 - t_mid[:-1]


# Degree bound for smoothing fitted coefficient profiles across time.
_PROFILE_DEGREE = 6


def _smooth_profile(knots: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Project per-knot coefficients onto a low-degree polynomial in t.

    The population coefficient profiles are smooth in time; projecting
    the per-pair estimates onto a Legendre basis removes the sampling
    jitter that otherwise feeds back through the outer iteration.
    """
    degree = min(_PROFILE_DEGREE, knots.size - 1)
    if degree < 1:
        return values
    basis = np.polynomial.legendre.legvander(2.0 * knots - 1.0, degree)
    flat = values.reshape(knots.size, -1)
    coef, *_ = np.linalg.lstsq(basis, flat, rcond=None)
    return (basis @ coef).reshape(values.shape)


def _fit_affine_backward(cache: TrajectoryCache, forward: DriftModel, config: AMPConfig):
    """Exact per-pair least squares, registered at reversed midpoints,
    with the coefficient profiles smoothed across time."""
    _, x, y, _ = build_regression_targets(cache, forward, config.correction_times)
    n = cache.states.shape[0]
    d = x.shape[1]
    knots = _reversed_registration_times(cache.grid)
    mats = np.empty((knots.size, d, d))
    offs = np.empty((knots.size, d))
    for k in range(knots.size):
        rows = slice(k * n, (k + 1) * n)
        design = np.hstack([x[rows], np.ones((n, 1))])
        coef, *_ = np.linalg.lstsq(design, y[rows], rcond=None)
        mats[k] = coef[:d].T
        offs[k] = coef[d]
    mats = _smooth_profile(knots, mats)
    offs = _smooth_profile(knots, offs)
    order = np.argsort(knots)
    return AffineDrift(knots[order], mats[order], offs[order])


def _train_neural_backward(
    state: AMPState, config: AMPConfig, data_sampler, forward: DriftModel
):
    """Minibatch regression of the backward estimate, cache refreshed
    every ``refresh_period`` inner iterations."""
    outer = state.outer_index
    if isinstance(state.current_drift, NeuralDrift):
        params = state.current_drift.params
    else:
        params = mlp.init_mlp(
            config.dim,
            width=config.hidden_width,
            depth=config.hidden_depth,
            seed=derive_seed(config.seed, outer, _TAG_INIT),
        )
    adam = mlp.init_adam(params, learning_rate=config.learning_rate)
    batch_gen = np.random.default_rng(derive_seed(config.seed, outer, _TAG_BATCH))

    cache = None
    arrays = None
    losses = []
    for it in range(config.inner_iterations):
        if it % config.refresh_period == 0:
            cache = _draw_cache(config, forward, data_sampler, outer, it // config.refresh_period)
            _, x, y, sig = build_regression_targets(cache, forward, config.correction_times)
            s = np.repeat(_reversed_registration_times(cache.grid), cache.states.shape[0])
            arrays = (s, x, y, sig)
        k = arrays[0].shape[0]
        if k <= config.batch_size:
            batch = arrays
        else:
            idx = batch_gen.integers(0, k, size=config.batch_size)
            batch = tuple(a[idx] for a in arrays)
        loss, grad = mlp.loss_and_gradient(params, batch)
        params, adam = mlp.adam_step(params, grad, adam)
        losses.append(loss)
    if cache is None:
        cache = _draw_cache(config, forward, data_sampler, outer, 0)
    if losses:
        # 5% headroom so a converged plateau does not alarm on batch noise.
        q = max(1, len(losses) // 10)
        if np.mean(losses[-q:]) > 1.05 * np.mean(losses[:q]):
            warnings.warn(
                f"outer iteration {outer}: training loss did not decrease "
                f"({np.mean(losses[:q]):.4g} -> {np.mean(losses[-q:]):.4g})",
                RuntimeWarning,
                stacklevel=2,
            )
    state.optimizer_state = adam
    state.last_cache = cache
    return NeuralDrift(params)


def direct_projection(state: AMPState, config: AMPConfig, data_sampler):
    """One direct projection: forward drift kept, backward drift fitted.

    Returns (backward_estimate, forward_drift). The forward drift is the
    current symmetric drift, exactly; the backward estimate is trained
    on regression targets and indexed by reversed time (see module
    docstring). The training cache is left on the state for reuse by
    diagnostics and distillation.
    """
    forward = state.current_drift
    if config.family == "affine":
        cache = _draw_cache(config, forward, data_sampler, state.outer_index, 0)
        state.last_cache = cache
        backward = _fit_affine_backward(cache, forward, config)
    else:
        backward = _train_neural_backward(state, config, data_sampler, forward)
    return backward, forward


def _as_affine(drift: DriftModel, dim: int) -> DriftModel:
    """Exact affine form of the reference drift; other drifts unchanged."""
    if isinstance(drift, OUDrift):
        return AffineDrift.constant(-drift.alpha * np.eye(dim), np.zeros(dim))
    return drift


def reverse_projection(forward: DriftModel, backward: DriftModel) -> DriftModel:
    """Closed-form projection onto time-symmetric laws: the drift average.

    Affine pairs collapse to a single affine drift (the reference drift
    counts as affine); other pairs stay as a lazy average for the caller
    to distill.
    """
    if isinstance(backward, AffineDrift):
        forward = _as_affine(forward, backward.dim)
    elif isinstance(forward, AffineDrift):
        backward = _as_affine(backward, forward.dim)
    averaged = average_drifts(forward, backward)
    if isinstance(forward, AffineDrift) and isinstance(backward, AffineDrift):
        return collapse_affine_average(averaged)
    return averaged


def estimate_kl_gap(drift_a: DriftModel, drift_b: DriftModel, cache: TrajectoryCache) -> float:
    """Path-measure divergence surrogate between two drifts.

    Discretizes (1/2 sigma^2) * integral of E||a - b||^2 dt over the
    cache's law: at each step time, the mean over trajectories of the
    squared drift difference scaled by gamma / (2 sigma_j^2), summed
    over steps. Reported without the inaccessible additive constant.
    """
    times = cache.grid.times
    steps = cache.grid.steps
    sig = cache.sigmas
    total = 0.0
    for i, gamma in enumerate(steps):
        x = cache.states[:, i]
        diff = drift_a.eval(times[i], x, sig) - drift_b.eval(times[i], x, sig)
        total += float(np.mean(np.sum(diff**2, axis=1) / (2.0 * sig**2)) * gamma)
    return total


def _distill_average(
    avg: AverageDrift, config: AMPConfig, cache: TrajectoryCache, outer: int
):
    """Fit one fresh network to the pending average on cache-drawn probes.

    Warm start prefers the first child (the previous symmetric drift):
    consecutive averages differ little once the outer loop settles, so
    that child is the closest available starting point.
    """
    if isinstance(avg.first, NeuralDrift):
        params = avg.first.params
    elif isinstance(avg.second, NeuralDrift):
        params = avg.second.params
    else:
        params = mlp.init_mlp(
            config.dim,
            width=config.hidden_width,
            depth=config.hidden_depth,
            seed=derive_seed(config.seed, outer, _TAG_DISTILL, 0),
        )
    adam = mlp.init_adam(params, learning_rate=config.learning_rate)
    gen = np.random.default_rng(derive_seed(config.seed, outer, _TAG_DISTILL, 1))
    times = cache.grid.times
    n, m_plus_1, _ = cache.states.shape

    def draw_probes(size):
        j = gen.integers(0, n, size=size)
        i = gen.integers(0, m_plus_1, size=size)
        t = times[i]
        x = cache.states[j, i]
        s = cache.sigmas[j]
        return t, x, s

    for _ in range(config.distill_iterations):
        t, x, s = draw_probes(config.batch_size)
        target = avg.eval(t, x, s)
        _, grad = mlp.loss_and_gradient(params, (t, x, target, s))
        params, adam = mlp.adam_step(params, grad, adam)

    t, x, s = draw_probes(4096)
    target = avg.eval(t, x, s)
    fitted = mlp.forward(params, t, x, s)
    err = float(np.mean(np.sum((fitted - target) ** 2, axis=1)))
    return NeuralDrift(params), err


def simulate_endpoint_pairs(
    drift: DriftModel, initial_points, grid: TimeGrid, sigma: float, seed: int
):
    """Push initial points through the bridge; returns (x0, x1)."""
    x0 = np.asarray(initial_points, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    sigmas = np.full(x0.shape[0], float(sigma))
    x1 = simulate_terminal(x0, drift, grid, sigmas, rng_seed=seed)
    return x0, x1


def _evaluate(drift: DriftModel, config: AMPConfig, data_sampler, outer: int):
    x0 = np.asarray(
        data_sampler(config.eval_paths, derive_seed(config.seed, outer, _TAG_EVAL, 0)),
        dtype=np.float64,
    )
    x0, x1 = simulate_endpoint_pairs(
        drift,
        x0,
        make_time_grid("uniform", config.eval_num_steps),
        config.eval_sigma,
        seed=derive_seed(config.seed, outer, _TAG_EVAL, 1),
    )
    mean, var, joint = empirical_moments(SampleBatch(x1), SampleBatch(x0))
    return float(mean.mean()), float(var.mean()), float(joint)


class _RunWriter:
    """Incremental metrics/timings CSVs plus per-outer checkpoints."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.run_dir / "metrics.csv"
        self.timings_path = self.run_dir / "timings.csv"

    def reset(self):
        for path, header in (
            (self.metrics_path, METRIC_COLUMNS),
            (self.timings_path, ("outer_iter", "wall_seconds")),
        ):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(header)

    def append(self, row: dict, wall_seconds: float):
        with open(self.metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([_format_metric(row[c]) for c in METRIC_COLUMNS])
        with open(self.timings_path, "a", newline="") as fh:
            csv.writer(fh).writerow([row["outer_iter"], repr(float(wall_seconds))])

    def checkpoint(self, name: str, drift: DriftModel):
        directory = self.run_dir / "checkpoints" / name
        directory.mkdir(parents=True, exist_ok=True)
        doc = drift_to_json(drift, blob_dir=directory)
        (directory / "drift.json").write_text(json.dumps(doc, indent=2) + "\n")

    def load_checkpoint(self, name: str) -> DriftModel:
        directory = self.run_dir / "checkpoints" / name
        doc = json.loads((directory / "drift.json").read_text())
        return drift_from_json(doc, blob_dir=directory)


def _format_metric(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def run_amp(
    config: AMPConfig,
    data_sampler,
    oracle: GaussianBridgeSolution | None = None,
    run_dir=None,
    resume: bool = False,
):
    """Alternate projections for the configured number of outer iterations.

    ``data_sampler(n, seed)`` must return n initial points. After every
    outer iteration the new symmetric drift is evaluated on fresh paths
    at the evaluation sigma and one metric row is logged (and streamed
    to ``run_dir`` with a drift checkpoint when a run directory is
    given). With ``resume`` the run continues after the last completed
    outer iteration found in ``run_dir``; completed work is not redone.
    Returns (final_drift, metric_log).
    """
    writer = _RunWriter(run_dir) if run_dir is not None else None
    state = init_amp_state(config)

    if writer is not None:
        if resume and writer.metrics_path.exists():
            state = _resume_state(config, writer)
        else:
            writer.reset()
            writer.checkpoint("initial", state.current_drift)

    beta_target = oracle.beta if oracle is not None else float("nan")
    for outer in range(state.outer_index, config.outer_iterations):
        started = time.perf_counter()
        backward, forward = direct_projection(state, config, data_sampler)
        symmetric = reverse_projection(forward, backward)
        if isinstance(symmetric, AverageDrift):
            symmetric, distill_err = _distill_average(
                symmetric, config, state.last_cache, outer
            )
        else:
            distill_err = 0.0
        kl_gap = estimate_kl_gap(state.current_drift, symmetric, state.last_cache)
        terminal_mean, terminal_var, joint_cov = _evaluate(
            symmetric, config, data_sampler, outer
        )
        row = {
            "outer_iter": outer + 1,
            "terminal_mean": terminal_mean,
            "terminal_var": terminal_var,
            "joint_cov": joint_cov,
            "beta_target": beta_target,
            "kl_gap": kl_gap,
            "distill_err": distill_err,
        }
        state.metric_log.append(row)
        state.previous_drift = state.current_drift
        state.current_drift = symmetric
        state.outer_index = outer + 1
        if writer is not None:
            writer.append(row, wall_seconds=time.perf_counter() - started)
            writer.checkpoint(f"outer_{outer + 1:04d}", symmetric)
    return state.current_drift, state.metric_log


def _resume_state(config: AMPConfig, writer: _RunWriter) -> AMPState:
    rows = []
    with open(writer.metrics_path, newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                {
                    "outer_iter": int(record["outer_iter"]),
                    **{c: float(record[c]) for c in METRIC_COLUMNS if c != "outer_iter"},
                }
            )
    state = init_amp_state(config)
    state.metric_log = rows
    state.outer_index = len(rows)
    if rows:
        state.current_drift = writer.load_checkpoint(f"outer_{len(rows):04d}")
        if len(rows) > 1:
            state.previous_drift = writer.load_checkpoint(f"outer_{len(rows) - 1:04d}")
    return state
