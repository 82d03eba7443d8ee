"""Time discretization and forward Euler-Maruyama simulation.

Time always lives on [0, 1]. A :class:`TimeGrid` holds M positive step
sizes summing to one; a :class:`TrajectoryCache` holds the M+1 states of
each simulated path together with the per-trajectory noise level used to
generate it. The Ornstein-Uhlenbeck reference process is available both
as a drift for simulation and through its exact transition moments.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    NumericError,
    SerializationError,
    SimulationBlowupError,
)

# Untrained drifts early in training can diverge; fail loudly instead of
# letting inf/nan poison downstream regressions.
BLOWUP_GUARD = 1.0e6

_MAGIC = b"MSBC"
_VERSION = 1


@dataclass(frozen=True)
class OUReference:
    """Mean-reverting reference process dX = -alpha X dt + sigma dW."""

    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidArgumentError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class TimeGrid:
    """Ordered positive step sizes gamma_i with partial sums on [0, 1]."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.float64)
        if steps.ndim != 1 or steps.size < 2:
            raise InvalidArgumentError("a time grid needs at least two steps")
        if not np.all(np.isfinite(steps)) or np.any(steps <= 0):
            raise InvalidArgumentError("all step sizes must be positive and finite")
        if abs(steps.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError("step sizes must sum to 1 within 1e-9")
        steps = steps.copy()
        steps.flags.writeable = False
        object.__setattr__(self, "steps", steps)

    @property
    def num_steps(self) -> int:
        return int(self.steps.size)

    @property
    def partial_sums(self) -> np.ndarray:
        """gamma_bar_i = sum of the first i steps, i = 1..M."""
        return np.cumsum(self.steps)

    @property
    def total(self) -> float:
        return float(self.steps.sum())

    @property
    def times(self) -> np.ndarray:
        """State times t_0 = 0, t_i = gamma_bar_i; length M+1."""
        return np.concatenate(([0.0], self.partial_sums))


def make_time_grid(
    mode: str,
    num_steps: int,
    gamma_min: float = 1e-5,
    gamma_max: float = 0.1,
) -> TimeGrid:
    """Build a uniform or ramp step-size schedule normalized to total 1.

    The ramp increases linearly from ``gamma_min`` to ``gamma_max`` over
    the first half of the steps and decreases symmetrically over the
    second half, then rescales so the steps sum to one. The symmetric
    shape mirrors the time symmetry of the bridge problem.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 2:
        raise InvalidArgumentError(f"num_steps must be an integer >= 2, got {num_steps}")
    if not (np.isfinite(gamma_min) and np.isfinite(gamma_max)):
        raise InvalidArgumentError("gamma bounds must be finite")
    if gamma_min <= 0 or gamma_max <= 0:
        raise InvalidArgumentError("gamma bounds must be positive")
    if gamma_min > gamma_max:
        raise InvalidArgumentError("gamma_min must not exceed gamma_max")
    if mode == "uniform":
        steps = np.full(num_steps, 1.0 / num_steps)
    elif mode == "ramp":
        phase = np.arange(num_steps) / (num_steps - 1)
        steps = gamma_min + (gamma_max - gamma_min) * (1.0 - np.abs(2.0 * phase - 1.0))
    else:
        raise InvalidArgumentError(f"unknown grid mode {mode!r}")
    steps = steps / steps.sum()
    return TimeGrid(steps)


def euler_maruyama_step(x, drift_value, gamma, sigma, z):
    """One explicit step: x + drift*gamma + sigma*sqrt(gamma)*z."""
    if not (np.isfinite(gamma) and gamma > 0):
        raise InvalidArgumentError(f"gamma must be positive, got {gamma}")
    if not (np.isfinite(sigma) and sigma >= 0):
        raise InvalidArgumentError(f"sigma must be nonnegative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    drift_value = np.asarray(drift_value, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    for name, arr in (("x", x), ("drift_value", drift_value), ("z", z)):
        bad = ~np.isfinite(arr)
        if bad.any():
            index = int(np.flatnonzero(bad.ravel())[0])
            raise NumericError(f"non-finite {name} at flat index {index}", index=index)
    return x + drift_value * gamma + sigma * np.sqrt(gamma) * z


def step_noise(seed: int, step_index: int, num_trajectories: int, dim: int) -> np.ndarray:
    """Standard normal increments for one step of every trajectory.

    Keyed by (seed, step) with trajectory j reading row j, so parallel
    construction reproduces the same block regardless of scheduling.
    """
    ss = np.random.SeedSequence(entropy=(int(seed), int(step_index)))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((num_trajectories, dim))


@dataclass(frozen=True)
class TrajectoryCache:
    """Simulated paths: states (N, M+1, d), per-trajectory sigmas, grid."""

    states: np.ndarray
    sigmas: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=np.float64)
        sigmas = np.ascontiguousarray(self.sigmas, dtype=np.float64)
        if states.ndim != 3:
            raise InvalidArgumentError("states must have shape (N, M+1, d)")
        if states.shape[1] != self.grid.num_steps + 1:
            raise InvalidArgumentError(
                f"states hold {states.shape[1]} positions per trajectory, "
                f"expected {self.grid.num_steps + 1}"
            )
        if sigmas.shape != (states.shape[0],):
            raise InvalidArgumentError("need one sigma per trajectory")
        if not np.all(np.isfinite(states)):
            raise InvalidArgumentError("cache states must be finite")
        states.flags.writeable = False
        sigmas.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def num_trajectories(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[2])

    def save(self, path) -> None:
        """Write the binary cache format.

        Layout: magic "MSBC", version u32, then N, M, d as u64 (M is the
        step count; each trajectory stores M+1 positions), then row-major
        float64 states, sigmas, grid steps. All little-endian.
        """
        n, m_plus_1, d = self.states.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<QQQ", n, m_plus_1 - 1, d))
            fh.write(self.states.astype("<f8").tobytes())
            fh.write(self.sigmas.astype("<f8").tobytes())
            fh.write(self.grid.steps.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TrajectoryCache":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise SerializationError(f"{path}: not a trajectory cache file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != _VERSION:
            raise SerializationError(f"{path}: unsupported cache version {version}")
        n, m, d = struct.unpack_from("<QQQ", raw, 8)
        offset = 4 + 4 + 24
        counts = (n * (m + 1) * d, n, m)
        if len(raw) != offset + 8 * sum(counts):
            raise SerializationError(f"{path}: truncated or oversized cache file")
        blocks = []
        for count in counts:
            blocks.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset))
            offset += 8 * count
        states = blocks[0].reshape(n, m + 1, d)
        return cls(states=states, sigmas=blocks[1], grid=TimeGrid(blocks[2]))

    def to_csv(self, path) -> None:
        """Export as rows (traj, step, t, x_0..x_{d-1}, sigma)."""
        times = self.grid.times
        d = self.dim
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["traj", "step", "t"] + [f"x_{k}" for k in range(d)] + ["sigma"])
            for j in range(self.num_trajectories):
                sigma = repr(float(self.sigmas[j]))
                for i, t in enumerate(times):
                    row = [j, i, repr(float(t))]
                    row.extend(repr(float(v)) for v in self.states[j, i])
                    row.append(sigma)
                    writer.writerow(row)


def simulate_cache(initial_samples, drift, grid: TimeGrid, sigmas, rng_seed: int) -> TrajectoryCache:
    """Simulate N forward paths under one drift and per-trajectory sigmas.

    Deterministic given ``rng_seed``; trajectory j uses sigmas[j] in every
    step, and the drift is evaluated at the running partial-sum time of
    the state being advanced. Any coordinate beyond the overflow guard
    aborts with the offending trajectory and step.
    """
    x = np.asarray(initial_samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidArgumentError("initial_samples must be N points in R^d with N >= 1")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("initial samples must be finite")
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.shape != (x.shape[0],):
        raise InvalidArgumentError("need exactly one sigma per trajectory")
    if not np.all(np.isfinite(sig)) or np.any(sig < 0):
        raise InvalidArgumentError("sigmas must be finite and nonnegative")

    n, d = x.shape
    times = grid.times
    states = np.empty((n, grid.num_steps + 1, d))
    states[:, 0] = x
    scale = sig[:, None]
    for i, gamma in enumerate(grid.steps):
        value = np.asarray(drift.eval(times[i], x, sig), dtype=np.float64)
        z = step_noise(rng_seed, i, n, d)
        x = x + value * gamma + scale * np.sqrt(gamma) * z
        inside = np.abs(x) <= BLOWUP_GUARD
        if not inside.all():
            j, _ = np.unravel_index(int(np.flatnonzero(~inside)[0]), x.shape)
            raise SimulationBlowupError(
                f"trajectory {j} left [-{BLOWUP_GUARD:g}, {BLOWUP_GUARD:g}] at step {i + 1}",
                trajectory=int(j),
                step=i + 1,
            )
        states[:, i + 1] = x
    return TrajectoryCache(states=states, sigmas=sig, grid=grid)


def simulate_terminal(initial_samples, drift, grid: TimeGrid, sigmas, rng_seed: int) -> np.ndarray:
    """Like simulate_cache, but returns only the terminal states.

    Bitwise identical to ``simulate_cache(...).states[:, -1]`` while
    keeping memory at one state array; meant for evaluation runs with
    many paths and fine grids.
    """
    x = np.asarray(initial_samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidArgumentError("initial_samples must be N points in R^d with N >= 1")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("initial samples must be finite")
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.shape != (x.shape[0],):
        raise InvalidArgumentError("need exactly one sigma per trajectory")
    if not np.all(np.isfinite(sig)) or np.any(sig < 0):
        raise InvalidArgumentError("sigmas must be finite and nonnegative")

    n, d = x.shape
    times = grid.times
    scale = sig[:, None]
    for i, gamma in enumerate(grid.steps):
        value = np.asarray(drift.eval(times[i], x, sig), dtype=np.float64)
        z = step_noise(rng_seed, i, n, d)
        x = x + value * gamma + scale * np.sqrt(gamma) * z
        inside = np.abs(x) <= BLOWUP_GUARD
        if not inside.all():
            j, _ = np.unravel_index(int(np.flatnonzero(~inside)[0]), x.shape)
            raise SimulationBlowupError(
                f"trajectory {j} left [-{BLOWUP_GUARD:g}, {BLOWUP_GUARD:g}] at step {i + 1}",
                trajectory=int(j),
                step=i + 1,
            )
    return x


def ou_transition_stats(reference: OUReference, sigma: float, x0, t: float):
    """Exact OU transition moments from x0 over elapsed time t.

    Returns (mean, variance) with mean = x0 * exp(-alpha t) and variance
    sigma^2 (1 - exp(-2 alpha t)) / (2 alpha), the variance written via
    expm1 so the Brownian small-alpha limit stays accurate.
    """
    if not (np.isfinite(t) and t > 0):
        raise InvalidArgumentError(f"t must be positive, got {t}")
    if not (np.isfinite(sigma) and sigma >= 0):
        raise InvalidArgumentError(f"sigma must be nonnegative, got {sigma}")
    alpha = reference.alpha
    mean = np.asarray(x0, dtype=np.float64) * np.exp(-alpha * t)
    variance = -float(sigma) ** 2 * np.expm1(-2.0 * alpha * t) / (2.0 * alpha)
    return mean, float(variance)
