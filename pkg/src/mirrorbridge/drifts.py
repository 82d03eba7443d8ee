"""Evaluable drift models sharing the signature v(t, x, sigma).

Variants: the mean-reverting reference drift, a piecewise-constant-in-
time affine drift, a neural drift wrapping the conditioned MLP, and the
lazy pointwise average of two drifts. All models are immutable and safe
for concurrent evaluation; training produces new snapshots.

Averaging semantics: neural outputs cannot be averaged parameter-wise,
so the average holds two children and averages evaluations. Affine
drifts are closed under output averaging, so a pending average of two
affine children can be collapsed exactly into a single affine drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mlp
from .errors import InvalidArgumentError, NumericError


def _as_points(x):
    """Normalize x to (n, d); report whether the input was a single point."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise InvalidArgumentError(f"x must be a point or batch of points, got shape {arr.shape}")


class DriftModel:
    """Base class; subclasses implement eval(t, x, sigma) on batches."""

    variant = "abstract"

    @property
    def dim(self):
        """Spatial dimension, or None when the drift works in any dimension."""
        return None

    def eval(self, t, x, sigma) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class OUDrift(DriftModel):
    """Reference drift -alpha * x; ignores t and sigma."""

    alpha: float
    variant = "OU"

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidArgumentError(f"alpha must be positive, got {self.alpha}")

    def eval(self, t, x, sigma) -> np.ndarray:
        points, single = _as_points(x)
        out = -self.alpha * points
        return out[0] if single else out


class AffineDrift(DriftModel):
    """Piecewise-constant-in-time affine drift A(t) x + c(t).

    ``knots`` are strictly increasing breakpoints in [0, 1]; the piece
    active at time t is the last knot not exceeding t, clamped at the
    ends so evaluation is defined on all of [0, 1].
    """

    variant = "Affine"

    def __init__(self, knots, matrices, offsets):
        knots = np.asarray(knots, dtype=np.float64)
        matrices = np.asarray(matrices, dtype=np.float64)
        offsets = np.asarray(offsets, dtype=np.float64)
        if knots.ndim != 1 or knots.size < 1:
            raise InvalidArgumentError("need at least one knot")
        if np.any(np.diff(knots) <= 0):
            raise InvalidArgumentError("knots must be strictly increasing")
        if np.any(knots < 0) or np.any(knots > 1):
            raise InvalidArgumentError("knots must lie in [0, 1]")
        k = knots.size
        if matrices.shape[:1] != (k,) or offsets.shape[:1] != (k,):
            raise InvalidArgumentError("need one (A, c) pair per knot")
        if matrices.ndim != 3 or matrices.shape[1] != matrices.shape[2]:
            raise InvalidArgumentError("matrices must be (k, d, d)")
        if offsets.shape != (k, matrices.shape[1]):
            raise InvalidArgumentError("offsets must be (k, d)")
        if not (np.all(np.isfinite(matrices)) and np.all(np.isfinite(offsets))):
            raise InvalidArgumentError("affine coefficients must be finite")
        for arr in (knots, matrices, offsets):
            arr.flags.writeable = False
        self.knots = knots
        self.matrices = matrices
        self.offsets = offsets

    @classmethod
    def constant(cls, matrix, offset) -> "AffineDrift":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        offset = np.atleast_1d(np.asarray(offset, dtype=np.float64))
        return cls([0.0], matrix[None], offset[None])

    @property
    def dim(self):
        return int(self.matrices.shape[1])

    def piece_index(self, t) -> np.ndarray:
        idx = np.searchsorted(self.knots, np.asarray(t, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.knots.size - 1)

    def coefficients_at(self, t):
        """Active (A, c) at scalar time t."""
        idx = int(self.piece_index(t))
        return self.matrices[idx], self.offsets[idx]

    def eval(self, t, x, sigma) -> np.ndarray:
        points, single = _as_points(x)
        if points.shape[1] != self.dim:
            raise InvalidArgumentError(
                f"x has dimension {points.shape[1]}, drift expects {self.dim}"
            )
        idx = self.piece_index(t)
        if idx.ndim == 0:
            out = points @ self.matrices[int(idx)].T + self.offsets[int(idx)]
        else:
            out = (
                np.einsum("nij,nj->ni", self.matrices[idx], points)
                + self.offsets[idx]
            )
        return out[0] if single else out


class NeuralDrift(DriftModel):
    """Drift realized by the sigma- and time-conditioned MLP."""

    variant = "Neural"

    def __init__(self, params: mlp.MLPParams):
        self.params = params

    @property
    def dim(self):
        return self.params.dim

    def eval(self, t, x, sigma) -> np.ndarray:
        points, single = _as_points(x)
        out = mlp.forward(self.params, t, points, sigma)
        return out[0] if single else out


class AverageDrift(DriftModel):
    """Pointwise mean of exactly two children.

    Children may not themselves be averages: the training loop distills
    or collapses after every outer iteration, so at most one lazy level
    can ever be pending and evaluation cost stays flat.
    """

    variant = "Average"

    def __init__(self, first: DriftModel, second: DriftModel):
        if isinstance(first, AverageDrift) or isinstance(second, AverageDrift):
            raise InvalidArgumentError(
                "cannot nest averages; collapse or distill the pending average first"
            )
        dims = {m.dim for m in (first, second) if m.dim is not None}
        if len(dims) > 1:
            raise InvalidArgumentError(f"children disagree on dimension: {sorted(dims)}")
        self.first = first
        self.second = second

    @property
    def dim(self):
        for child in (self.first, self.second):
            if child.dim is not None:
                return child.dim
        return None

    def eval(self, t, x, sigma) -> np.ndarray:
        return 0.5 * (self.first.eval(t, x, sigma) + self.second.eval(t, x, sigma))


def eval_drift(model: DriftModel, t, x, sigma) -> np.ndarray:
    """Checked evaluation: validates t and the finiteness of the output."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < -1e-9) or np.any(t_arr > 1.0 + 1e-9):
        raise InvalidArgumentError(f"t must lie in [0, 1], got {t}")
    points, _ = _as_points(x)
    if not np.all(np.isfinite(points)):
        raise InvalidArgumentError("x must be finite")
    out = model.eval(t, x, sigma)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{model.variant} drift produced a non-finite value")
    return out


def average_drifts(forward: DriftModel, backward: DriftModel) -> AverageDrift:
    """The reverse-KL projection onto time-symmetric laws, in closed form."""
    return AverageDrift(forward, backward)


def collapse_affine_average(avg: AverageDrift) -> AffineDrift:
    """Fold an average of two affine drifts into one affine drift.

    The children may use different knot sets; coefficients are resampled
    on the union of knots, where the average is exact because both
    children are constant between consecutive union knots.
    """
    if not isinstance(avg, AverageDrift):
        raise InvalidArgumentError("expected an Average drift")
    first, second = avg.first, avg.second
    if not (isinstance(first, AffineDrift) and isinstance(second, AffineDrift)):
        raise InvalidArgumentError("both children must be affine to collapse")
    knots = np.union1d(first.knots, second.knots)
    matrices = []
    offsets = []
    for u in knots:
        a1, c1 = first.coefficients_at(u)
        a2, c2 = second.coefficients_at(u)
        matrices.append(0.5 * (a1 + a2))
        offsets.append(0.5 * (c1 + c2))
    return AffineDrift(knots, np.array(matrices), np.array(offsets))


def drift_to_json(model: DriftModel, blob_dir=None) -> dict:
    """Tagged JSON document; neural weights go to a content-hashed blob."""
    if isinstance(model, OUDrift):
        return {"variant": "OU", "payload": {"alpha": model.alpha}}
    if isinstance(model, AffineDrift):
        return {
            "variant": "Affine",
            "payload": {
                "knots": model.knots.tolist(),
                "matrices": model.matrices.tolist(),
                "offsets": model.offsets.tolist(),
            },
        }
    if isinstance(model, NeuralDrift):
        if blob_dir is None:
            raise InvalidArgumentError("serializing a neural drift requires a blob directory")
        name, digest = mlp.write_weights_blob(model.params, Path(blob_dir))
        return {
            "variant": "Neural",
            "payload": {
                "dim": model.params.dim,
                "weights_file": name,
                "weights_sha256": digest,
            },
        }
    if isinstance(model, AverageDrift):
        return {
            "variant": "Average",
            "payload": {
                "children": [
                    drift_to_json(model.first, blob_dir),
                    drift_to_json(model.second, blob_dir),
                ]
            },
        }
    raise InvalidArgumentError(f"cannot serialize drift variant {model.variant!r}")


def drift_from_json(doc: dict, blob_dir=None) -> DriftModel:
    """Inverse of drift_to_json; verifies neural blob content hashes."""
    variant = doc.get("variant")
    payload = doc.get("payload", {})
    if variant == "OU":
        return OUDrift(float(payload["alpha"]))
    if variant == "Affine":
        return AffineDrift(payload["knots"], payload["matrices"], payload["offsets"])
    if variant == "Neural":
        if blob_dir is None:
            raise InvalidArgumentError("loading a neural drift requires a blob directory")
        params = mlp.read_weights_blob(
            Path(blob_dir) / payload["weights_file"],
            expected_digest=payload["weights_sha256"],
        )
        return NeuralDrift(params)
    if variant == "Average":
        children = [drift_from_json(c, blob_dir) for c in payload["children"]]
        return AverageDrift(*children)
    raise InvalidArgumentError(f"unknown drift variant {variant!r}")
