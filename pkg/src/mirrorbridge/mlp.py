"""Small fully-connected network with time and noise conditioning.

The network maps concat(x, enc(t), sigma) -> R^d where enc is a
sinusoidal time encoding. Hidden layers use the SiLU activation
z * sigmoid(z); unlike saturating choices it extends linearly for large
inputs, which matters because drift fields grow linearly in x far from
the data bulk. Everything is float64 and self-contained: forward pass,
exact reverse-mode gradients of the mean squared residual, and an Adam
optimizer with snapshot semantics. Weights serialize to a flat binary
blob whose SHA-256 digest doubles as the reference key used by
drift-model JSON documents.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    IntegrityError,
    InvalidArgumentError,
    NumericError,
    SerializationError,
)

# Number of sinusoidal frequency pairs in the time encoding.
TIME_FREQUENCIES = 8

_MAGIC = b"MSBW"
_VERSION = 1


def encode_time(t) -> np.ndarray:
    """Sinusoidal features [sin(2^k pi t), cos(2^k pi t)], k < 8."""
    t = np.asarray(t, dtype=np.float64)
    angles = np.pi * t[..., None] * (2.0 ** np.arange(TIME_FREQUENCIES))
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def feature_dim(dim: int) -> int:
    """Input width for spatial dimension d: x block, time block, sigma."""
    return dim + 2 * TIME_FREQUENCIES + 1


@dataclass(frozen=True)
class MLPParams:
    """Layer weights/biases; input layout concat(x, enc(t), sigma)."""

    weights: tuple
    biases: tuple
    dim: int

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("need matching nonempty weight/bias tuples")
        expected_in = feature_dim(self.dim)
        for ell, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {ell}: inconsistent shapes")
            if w.shape[1] != expected_in:
                raise InvalidArgumentError(
                    f"layer {ell}: input width {w.shape[1]}, expected {expected_in}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidArgumentError(f"layer {ell}: non-finite parameters")
            expected_in = w.shape[0]
        if self.weights[-1].shape[0] != self.dim:
            raise InvalidArgumentError("output layer must produce d coordinates")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameter_arrays(self) -> tuple:
        """Flat tuple view (W_0, b_0, W_1, b_1, ...) for generic updates."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return tuple(out)


def init_mlp(dim: int, width: int = 128, depth: int = 4, seed: int = 0) -> MLPParams:
    """Seeded uniform init scaled by 1/sqrt(fan_in); depth = hidden layers."""
    if dim < 1 or width < 1 or depth < 0:
        raise InvalidArgumentError("dim and width must be >= 1, depth >= 0")
    gen = np.random.default_rng(seed)
    sizes = [feature_dim(dim)] + [width] * depth + [dim]
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(gen.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(gen.uniform(-bound, bound, size=n_out))
    return MLPParams(weights=tuple(weights), biases=tuple(biases), dim=dim)


def _features(params: MLPParams, t, x, sigma) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.dim:
        raise InvalidArgumentError(f"x has dimension {x.shape[1]}, model expects {params.dim}")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    return np.concatenate([x, encode_time(t), sigma[:, None]], axis=1)


def _forward_trace(params: MLPParams, feats: np.ndarray):
    """Post-activation values, activation derivatives, and the output."""
    hidden, gates = [], []
    h = feats
    last = params.num_layers - 1
    for ell, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation in layer {ell}", index=ell)
        if ell != last:
            gate = expit(z)
            h = z * gate
            hidden.append(h)
            gates.append(gate * (1.0 + z * (1.0 - gate)))
        else:
            h = z
    return hidden, gates, h


def forward(params: MLPParams, t, x, sigma) -> np.ndarray:
    """Evaluate the network on a batch; returns (n, d)."""
    _, _, out = _forward_trace(params, _features(params, t, x, sigma))
    return out


def loss_and_gradient(params: MLPParams, batch):
    """Mean squared residual over a batch and its exact gradient.

    The batch is (t, x, target, sigma) as arrays, or an iterable of such
    tuples per sample. Loss = mean over samples of the squared norm of
    forward(t, x, sigma) - target; the gradient is reverse-mode exact.
    """
    t, x, target, sigma = _as_batch_arrays(batch)
    feats = _features(params, t, x, sigma)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None, :] if target.size == params.dim else target[:, None]
    hidden, gates, out = _forward_trace(params, feats)
    if target.shape != out.shape:
        raise InvalidArgumentError(f"target shape {target.shape} != output shape {out.shape}")
    n = out.shape[0]
    residual = out - target
    loss = float(np.sum(residual**2) / n)

    grad_w = [None] * params.num_layers
    grad_b = [None] * params.num_layers
    delta = 2.0 * residual / n
    for ell in range(params.num_layers - 1, -1, -1):
        upstream = feats if ell == 0 else hidden[ell - 1]
        grad_w[ell] = delta.T @ upstream
        grad_b[ell] = delta.sum(axis=0)
        if ell > 0:
            delta = (delta @ params.weights[ell]) * gates[ell - 1]
    grad = MLPParams(weights=tuple(grad_w), biases=tuple(grad_b), dim=params.dim)
    return loss, grad


def _as_batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 4 and hasattr(batch[1], "ndim"):
        return batch
    rows = list(batch)
    if not rows:
        raise InvalidArgumentError("batch must be nonempty")
    t = np.array([r[0] for r in rows], dtype=np.float64)
    x = np.array([np.atleast_1d(r[1]) for r in rows], dtype=np.float64)
    target = np.array([np.atleast_1d(r[2]) for r in rows], dtype=np.float64)
    sigma = np.array([r[3] for r in rows], dtype=np.float64)
    return t, x, target, sigma


@dataclass(frozen=True)
class AdamState:
    """Adam moment accumulators; shapes mirror MLPParams."""

    m_weights: tuple
    m_biases: tuple
    v_weights: tuple
    v_biases: tuple
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: MLPParams, learning_rate: float = 1e-4) -> AdamState:
    if learning_rate <= 0:
        raise InvalidArgumentError("learning_rate must be positive")
    zeros_w = tuple(np.zeros_like(w) for w in params.weights)
    zeros_b = tuple(np.zeros_like(b) for b in params.biases)
    return AdamState(
        m_weights=zeros_w,
        m_biases=zeros_b,
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
        step=0,
        learning_rate=learning_rate,
    )


def adam_step(params: MLPParams, grad: MLPParams, state: AdamState):
    """One bias-corrected Adam update; returns new (params, state)."""
    if grad.dim != params.dim or grad.num_layers != params.num_layers:
        raise InvalidArgumentError("gradient shape does not match parameters")
    t = state.step + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    def update(p, g, m, v):
        m_new = state.beta1 * m + (1.0 - state.beta1) * g
        v_new = state.beta2 * v + (1.0 - state.beta2) * g**2
        m_hat = m_new / correction1
        v_hat = v_new / correction2
        p_new = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grad.weights, state.m_weights, state.v_weights):
        a, b, c = update(p, g, m, v)
        new_w.append(a), new_mw.append(b), new_vw.append(c)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grad.biases, state.m_biases, state.v_biases):
        a, b, c = update(p, g, m, v)
        new_b.append(a), new_mb.append(b), new_vb.append(c)

    new_params = MLPParams(weights=tuple(new_w), biases=tuple(new_b), dim=params.dim)
    new_state = replace(
        state,
        m_weights=tuple(new_mw),
        m_biases=tuple(new_mb),
        v_weights=tuple(new_vw),
        v_biases=tuple(new_vb),
        step=t,
    )
    return new_params, new_state


def serialize_weights(params: MLPParams) -> bytes:
    """Flat blob: magic, version, layer count, per-layer dims, matrices."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, params.num_layers)]
    for w in params.weights:
        chunks.append(struct.pack("<QQ", w.shape[0], w.shape[1]))
    for w, b in zip(params.weights, params.biases):
        chunks.append(w.astype("<f8").tobytes())
        chunks.append(b.astype("<f8").tobytes())
    return b"".join(chunks)


def deserialize_weights(blob: bytes) -> MLPParams:
    if blob[:4] != _MAGIC:
        raise SerializationError("not a weights blob")
    version, num_layers = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise SerializationError(f"unsupported weights version {version}")
    offset = 12
    shapes = []
    for _ in range(num_layers):
        shapes.append(struct.unpack_from("<QQ", blob, offset))
        offset += 16
    weights, biases = [], []
    for n_out, n_in in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=n_out * n_in, offset=offset)
        offset += 8 * n_out * n_in
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=offset)
        offset += 8 * n_out
        weights.append(w.reshape(n_out, n_in).copy())
        biases.append(b.copy())
    if offset != len(blob):
        raise SerializationError("weights blob has trailing or missing bytes")
    dim = shapes[-1][0]
    return MLPParams(weights=tuple(weights), biases=tuple(biases), dim=int(dim))


def weights_digest(params: MLPParams) -> str:
    return hashlib.sha256(serialize_weights(params)).hexdigest()


def write_weights_blob(params: MLPParams, directory) -> tuple:
    """Write <digest>.msbw under directory; returns (filename, digest)."""
    blob = serialize_weights(params)
    digest = hashlib.sha256(blob).hexdigest()
    name = f"{digest}.msbw"
    path = Path(directory) / name
    path.write_bytes(blob)
    return name, digest


def read_weights_blob(path, expected_digest: str | None = None) -> MLPParams:
    """Load a blob, verifying content hash when a digest is supplied."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if expected_digest is not None:
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected_digest:
            raise IntegrityError(
                f"{path}: weights hash {actual[:12]}... does not match "
                f"expected {expected_digest[:12]}..."
            )
    return deserialize_weights(blob)
