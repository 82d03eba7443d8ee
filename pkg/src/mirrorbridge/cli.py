"""Command-line entry point: train, sample, oracle, convergence.

A run is described by one JSON document holding the trainer
configuration, the dataset to bridge, an output directory, the list of
noise levels to evaluate the final drift at, and whether to attach the
closed-form Gaussian oracle. The SHA-256 hash of the canonical config
JSON (output directory excluded) names the run directory, so identical
configurations land in identical places and can be resumed or compared.

Diagnostics go to stderr; stdout is reserved for machine-readable JSON
(the oracle subcommand). Exit codes: 0 success, 2 configuration error,
3 numeric or convergence failure, 4 stored-content integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .amp import AMPConfig, derive_seed, run_amp, simulate_endpoint_pairs
from .data import (
    DatasetSpec,
    SampleBatch,
    empirical_moments,
    energy_distance,
    mixing_rate,
    sample_dataset,
)
from .drifts import drift_from_json
from .errors import (
    ConvergenceError,
    IntegrityError,
    InvalidArgumentError,
    MirrorBridgeError,
    NumericError,
    SerializationError,
    SimulationBlowupError,
)
from .oracle import GaussianBridgeSolution, solve_grid_bridge
from .sde import make_time_grid

# Seed-derivation tags for CLI-level randomness, disjoint from the
# trainer's tags (1..8) so no stream is reused across layers.
_TAG_FINAL_EVAL = 101
_TAG_DATA_NULL = 102

_FINAL_EVAL_COLUMNS = (
    "sigma",
    "terminal_mean",
    "terminal_var",
    "joint_cov",
    "mixing_rate",
    "energy_vs_data",
    "energy_null",
)


@dataclass(frozen=True)
class RunConfig:
    """One training run: trainer config, dataset, outputs, evaluation."""

    amp: AMPConfig
    dataset: dict = field(default_factory=lambda: {"kind": "gaussian", "params": {"dim": 1}})
    output_dir: str = "runs"
    eval_sigmas: tuple = ()
    use_oracle: bool = True

    def __post_init__(self):
        kind = self.dataset.get("kind")
        params = self.dataset.get("params", {})
        # constructing a throwaway spec runs the full dataset validation
        DatasetSpec(kind=kind, count=1, seed=0, params=params)
        for sigma in self.eval_sigmas:
            if not (np.isfinite(sigma) and sigma > 0):
                raise InvalidArgumentError("eval_sigmas entries must be positive")

    def to_json(self) -> dict:
        return {
            "amp": self.amp.to_json(),
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "eval_sigmas": list(self.eval_sigmas),
            "use_oracle": self.use_oracle,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidArgumentError("run config must be a JSON object")
        unknown = set(doc) - {"amp", "dataset", "output_dir", "eval_sigmas", "use_oracle"}
        if unknown:
            raise InvalidArgumentError(f"unknown run config fields: {sorted(unknown)}")
        if "amp" not in doc:
            raise InvalidArgumentError("run config needs an 'amp' section")
        try:
            amp = AMPConfig.from_json(doc["amp"])
        except TypeError as err:
            raise InvalidArgumentError(f"bad trainer config: {err}") from err
        return cls(
            amp=amp,
            dataset=doc.get("dataset", {"kind": "gaussian", "params": {"dim": 1}}),
            output_dir=doc.get("output_dir", "runs"),
            eval_sigmas=tuple(float(s) for s in doc.get("eval_sigmas", [])),
            use_oracle=bool(doc.get("use_oracle", True)),
        )

    def config_hash(self) -> str:
        doc = self.to_json()
        del doc["output_dir"]
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.config_hash()

    def make_sampler(self):
        dataset = self.dataset

        def sampler(n, seed):
            spec = DatasetSpec(
                kind=dataset["kind"], count=n, seed=seed, params=dataset.get("params", {})
            )
            return sample_dataset(spec).points

        return sampler

    def make_oracle(self) -> GaussianBridgeSolution | None:
        if not self.use_oracle or self.dataset.get("kind") != "gaussian":
            return None
        return GaussianBridgeSolution.solve(
            self.amp.alpha, self.amp.eval_sigma, dim=self.amp.dim
        )


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise InvalidArgumentError(f"cannot read config {path}: {err}") from err
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise InvalidArgumentError(
            f"malformed JSON in {path} at byte offset {err.pos}: {err.msg}"
        ) from err
    config = RunConfig.from_json(doc)
    if overrides:
        amp_doc = config.amp.to_json()
        doc = config.to_json()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in amp_doc:
                amp_doc[key] = value
            else:
                doc[key] = value
        doc["amp"] = amp_doc
        config = RunConfig.from_json(doc)
    return config


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def final_evaluation(drift, config: RunConfig) -> list:
    """Moments, mixing, and energy distance at each requested sigma."""
    amp = config.amp
    grid = make_time_grid("uniform", amp.eval_num_steps)
    rows = []
    for j, sigma in enumerate(config.eval_sigmas):
        spec = DatasetSpec(
            kind=config.dataset["kind"],
            count=amp.eval_paths,
            seed=derive_seed(amp.seed, _TAG_FINAL_EVAL, j, 0),
            params=config.dataset.get("params", {}),
        )
        initial = sample_dataset(spec)
        x0, x1 = simulate_endpoint_pairs(
            drift, initial.points, grid, sigma,
            seed=derive_seed(amp.seed, _TAG_FINAL_EVAL, j, 1),
        )
        terminal = SampleBatch(x1)
        mean, var, joint = empirical_moments(terminal, SampleBatch(x0))
        mixed = mixing_rate(initial, terminal) if initial.labels is not None else float("nan")
        fresh_a = sample_dataset(
            DatasetSpec(spec.kind, spec.count, derive_seed(amp.seed, _TAG_DATA_NULL, j, 0), spec.params)
        )
        fresh_b = sample_dataset(
            DatasetSpec(spec.kind, spec.count, derive_seed(amp.seed, _TAG_DATA_NULL, j, 1), spec.params)
        )
        rows.append([
            _fmt(float(sigma)),
            _fmt(float(mean.mean())),
            _fmt(float(var.mean())),
            _fmt(float(joint)),
            _fmt(float(mixed)),
            _fmt(energy_distance(terminal, fresh_a)),
            _fmt(energy_distance(fresh_b, fresh_a)),
        ])
    return rows


def _warn_sigma_range(sigma: float, run_dir: Path):
    """Extrapolation notice when sampling outside the trained range."""
    config_path = run_dir / "config.json"
    if not config_path.exists():
        return
    try:
        doc = json.loads(config_path.read_text(encoding="utf-8"))
        lo = float(doc["amp"]["sigma_min"])
        hi = float(doc["amp"]["sigma_max"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        return
    if not lo <= sigma <= hi:
        print(
            f"warning: sigma={sigma:g} is outside the trained range "
            f"[{lo:g}, {hi:g}]; sampling extrapolates",
            file=sys.stderr,
        )


def cmd_train(args) -> int:
    config = load_run_config(
        args.config,
        overrides={
            "seed": args.seed,
            "outer_iterations": args.outer_iterations,
            "output_dir": args.output_dir,
        },
    )
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"run directory: {run_dir}", file=sys.stderr)
    drift, log = run_amp(
        config.amp,
        config.make_sampler(),
        oracle=config.make_oracle(),
        run_dir=run_dir,
        resume=args.resume,
    )
    if config.eval_sigmas:
        _write_csv(
            run_dir / "final_eval.csv",
            _FINAL_EVAL_COLUMNS,
            final_evaluation(drift, config),
        )
    if log:
        last = log[-1]
        print(
            f"finished outer {last['outer_iter']}: joint_cov={last['joint_cov']:.4f} "
            f"terminal_var={last['terminal_var']:.4f}",
            file=sys.stderr,
        )
    return 0


def _read_samples_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SerializationError(f"{path}: empty CSV") from None
        cols = [i for i, name in enumerate(header) if name.startswith("x_")]
        if not cols:
            raise SerializationError(
                f"{path}: no x_<i> columns in header {header!r}"
            )
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[i]) for i in cols])
            except (IndexError, ValueError) as err:
                raise SerializationError(f"{path}:{line_no}: {err}") from err
    if not rows:
        raise SerializationError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def cmd_sample(args) -> int:
    if args.sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    if args.n_steps < 1:
        raise InvalidArgumentError("n_steps must be >= 1")
    checkpoint = Path(args.checkpoint)
    doc_path = checkpoint / "drift.json"
    if not doc_path.exists():
        raise InvalidArgumentError(f"no checkpoint at {checkpoint}")
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    drift = drift_from_json(doc, blob_dir=checkpoint)
    _warn_sigma_range(args.sigma, checkpoint.parent.parent)
    x0 = _read_samples_csv(args.input)
    if drift.dim is not None and x0.shape[1] != drift.dim:
        raise InvalidArgumentError(
            f"input dimension {x0.shape[1]} does not match drift dimension {drift.dim}"
        )
    grid = make_time_grid("uniform", args.n_steps)
    x0, x1 = simulate_endpoint_pairs(drift, x0, grid, args.sigma, seed=args.seed)
    d = x1.shape[1]
    header = ["idx"] + [f"x0_{k}" for k in range(d)] + [f"x1_{k}" for k in range(d)]
    rows = [
        [str(j)] + [_fmt(v) for v in x0[j]] + [_fmt(v) for v in x1[j]]
        for j in range(x0.shape[0])
    ]
    _write_csv(Path(args.output), header, rows)
    print(f"wrote {len(rows)} paired samples to {args.output}", file=sys.stderr)
    return 0


def cmd_oracle(args) -> int:
    if args.alpha <= 0 or args.sigma <= 0:
        raise InvalidArgumentError("alpha and sigma must be positive")
    solution = GaussianBridgeSolution.solve(args.alpha, args.sigma)
    out = {"beta": solution.beta, "sigma1_sq": solution.sigma1_sq}
    if args.grid is not None:
        n, half_width = args.grid
        bridge = solve_grid_bridge(args.alpha, args.sigma, n=int(n), half_width=float(half_width))
        out["grid_cov"] = bridge.covariance()
        out["grid_abs_error"] = abs(bridge.covariance() - solution.beta)
    print(json.dumps(out))
    return 0


def cmd_convergence(args) -> int:
    config = load_run_config(
        args.config,
        overrides={
            "seed": args.seed,
            "outer_iterations": args.outer_iterations,
            "output_dir": args.output_dir,
        },
    )
    if config.dataset.get("kind") != "gaussian":
        raise InvalidArgumentError("convergence study requires a gaussian dataset")
    if args.trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"run directory: {run_dir}", file=sys.stderr)
    trial_logs = []
    for trial in range(args.trials):
        amp_doc = config.amp.to_json()
        amp_doc["seed"] = config.amp.seed + trial
        trial_config = AMPConfig.from_json(amp_doc)
        oracle = config.make_oracle()
        _, log = run_amp(
            trial_config,
            config.make_sampler(),
            oracle=oracle,
            run_dir=run_dir / "trials" / f"trial_{trial}",
            resume=args.resume,
        )
        trial_logs.append(log)
        if log:
            print(
                f"trial {trial}: final joint_cov={log[-1]['joint_cov']:.4f}",
                file=sys.stderr,
            )
    depth = min(len(log) for log in trial_logs)
    rows = []
    for i in range(depth):
        rows.append([
            str(trial_logs[0][i]["outer_iter"]),
            _fmt(float(np.mean([log[i]["terminal_mean"] for log in trial_logs]))),
            _fmt(float(np.mean([log[i]["terminal_var"] for log in trial_logs]))),
            _fmt(float(np.mean([log[i]["joint_cov"] for log in trial_logs]))),
            _fmt(float(trial_logs[0][i]["beta_target"])),
        ])
    _write_csv(
        run_dir / "averaged.csv",
        ("outer_iter", "terminal_mean", "terminal_var", "joint_cov", "beta_target"),
        rows,
    )
    return 0


def _limit_threads():
    value = os.environ.get("MSB_THREADS")
    if not value:
        return None
    try:
        count = int(value)
    except ValueError:
        raise InvalidArgumentError(f"MSB_THREADS must be an integer, got {value!r}") from None
    if count < 1:
        raise InvalidArgumentError("MSB_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mirrorbridge",
        description="Self-coupled Schrödinger bridge training and sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the alternating minimization end to end")
    train.add_argument("config", help="path to a run config JSON document")
    train.add_argument("--resume", action="store_true", help="continue after the last checkpoint")
    train.add_argument("--seed", type=int, default=None, help="override the config seed")
    train.add_argument("--outer-iterations", type=int, default=None, dest="outer_iterations")
    train.add_argument("--output-dir", default=None, dest="output_dir")
    train.set_defaults(handler=cmd_train)

    sample = sub.add_parser("sample", help="push initial samples through a trained bridge")
    sample.add_argument("checkpoint", help="checkpoint directory (holds drift.json)")
    sample.add_argument("input", help="input samples CSV with x_<i> columns")
    sample.add_argument("--output", required=True, help="paired-samples CSV to write")
    sample.add_argument("--sigma", type=float, required=True)
    sample.add_argument("--n-steps", type=int, default=200, dest="n_steps")
    sample.add_argument("--seed", type=int, default=0)
    sample.set_defaults(handler=cmd_sample)

    oracle = sub.add_parser("oracle", help="closed-form Gaussian bridge statistics")
    oracle.add_argument("alpha", type=float)
    oracle.add_argument("sigma", type=float)
    oracle.add_argument(
        "--grid",
        nargs=2,
        type=float,
        metavar=("N", "L"),
        default=None,
        help="also solve the discretized bridge on n points spanning [-L, L]",
    )
    oracle.set_defaults(handler=cmd_oracle)

    convergence = sub.add_parser(
        "convergence", help="repeat a gaussian run over seeded trials and average"
    )
    convergence.add_argument("config", help="path to a run config JSON document")
    convergence.add_argument("--trials", type=int, default=5)
    convergence.add_argument("--resume", action="store_true")
    convergence.add_argument("--seed", type=int, default=None)
    convergence.add_argument("--outer-iterations", type=int, default=None, dest="outer_iterations")
    convergence.add_argument("--output-dir", default=None, dest="output_dir")
    convergence.set_defaults(handler=cmd_convergence)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _limit_threads()
        try:
            return args.handler(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except IntegrityError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except (SimulationBlowupError, NumericError, ConvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (InvalidArgumentError, SerializationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MirrorBridgeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
