"""Closed-form ground truth for the Gaussian bridge and a grid cross-check.

For a standard normal marginal and the mean-reverting reference, the
optimal coupling of (X_0, X_1) is jointly Gaussian with unit marginals
and off-diagonal coefficient beta(alpha, sigma). An independent brute
force oracle discretizes the static problem on a 1-D grid and solves it
by symmetric Sinkhorn scaling in the log domain, so the two can be
compared without sharing any code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, InvalidArgumentError


def beta(alpha: float, sigma: float) -> float:
    """Off-diagonal coefficient of the optimal Gaussian coupling.

    Algebraically equal to
    [sigma^2 (1 - e^{2a}) + sqrt(16 e^{2a} a^2 + sigma^4 (1 - e^{2a})^2)]
    / (4 a e^a), rewritten so the large-sigma cancellation never occurs;
    the value always lies in [0, 1].
    """
    if not (np.isfinite(alpha) and alpha > 0):
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    a = np.expm1(2.0 * alpha) * sigma**2
    b = 16.0 * alpha**2 * np.exp(2.0 * alpha)
    value = b / ((np.sqrt(a**2 + b) + a) * 4.0 * alpha * np.exp(alpha))
    return float(min(value, 1.0))


def sigma1_sq(alpha: float, sigma: float) -> float:
    """Reference transition variance over unit time."""
    return float(-(sigma**2) * np.expm1(-2.0 * alpha) / (2.0 * alpha))


@dataclass(frozen=True)
class GaussianBridgeSolution:
    """Closed-form solution bundle for one (alpha, sigma) pair."""

    alpha: float
    sigma: float
    beta: float
    sigma1_sq: float
    dim: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgumentError(f"beta must lie in [0, 1], got {self.beta}")
        if self.dim < 1:
            raise InvalidArgumentError("dim must be >= 1")

    @classmethod
    def solve(cls, alpha: float, sigma: float, dim: int = 1) -> "GaussianBridgeSolution":
        return cls(
            alpha=float(alpha),
            sigma=float(sigma),
            beta=beta(alpha, sigma),
            sigma1_sq=sigma1_sq(alpha, sigma),
            dim=dim,
        )

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "sigma": self.sigma,
            "beta": self.beta,
            "sigma1_sq": self.sigma1_sq,
        }


def conditional_stats(solution: GaussianBridgeSolution, x0: float):
    """Conditional law of X_1 given X_0 = x0: mean beta*x0, variance 1-beta^2.

    These are the standard bivariate-normal conditionals of the joint
    covariance [[1, beta], [beta, 1]], applied per coordinate.
    """
    b = solution.beta
    return b * x0, 1.0 - b * b


def joint_covariance(solution: GaussianBridgeSolution) -> np.ndarray:
    """Covariance of (X_0, X_1) stacked: [[I, beta I], [beta I, I]]."""
    d = solution.dim
    eye = np.eye(d)
    top = np.hstack([eye, solution.beta * eye])
    bottom = np.hstack([solution.beta * eye, eye])
    return np.vstack([top, bottom])


@dataclass(frozen=True)
class GridBridge:
    """Discretized static bridge on a uniform 1-D grid."""

    points: np.ndarray
    weights: np.ndarray
    coupling: np.ndarray
    iterations: int
    residual: float

    def covariance(self) -> float:
        """sum_ij x_i x_j P_ij, the brute-force estimate of beta."""
        return float(self.points @ self.coupling @ self.points)


def solve_grid_bridge(
    alpha: float,
    sigma: float,
    n: int = 400,
    half_width: float = 6.0,
    max_iters: int = 50_000,
    tol: float = 1e-10,
) -> GridBridge:
    """Solve the static problem with both marginals the discretized N(0,1).

    The transition kernel factors as diag(r) S diag(c) with S symmetric,
    so with identical marginals the scaling reduces to a single
    potential: P = diag(p) S diag(p). The damped update on log p keeps P
    exactly symmetric at every iterate; iteration stops when both
    marginal residuals drop below ``tol``.
    """
    if n < 50:
        raise InvalidArgumentError("need n >= 50 grid points")
    if half_width < 4.0:
        raise InvalidArgumentError("need half_width >= 4 to cover the Gaussian mass")
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    x = np.linspace(-half_width, half_width, n)
    log_w = -0.5 * x**2
    log_w -= logsumexp(log_w)

    # Kernel K_ij = N(x_j; x_i e^-alpha, s1^2) up to constants absorbed in
    # the scaling; S keeps only the symmetric cross term.
    s1 = sigma1_sq(alpha, sigma)
    decay = np.exp(-alpha)
    log_s = (decay / s1) * np.outer(x, x)
    # Fold the separable Gaussian factors into the starting potential so
    # the iteration works on the full kernel.
    log_r = -0.5 * (x * decay) ** 2 / s1
    log_t = -0.5 * x**2 / s1
    log_s = log_s + 0.5 * (log_r + log_t)[:, None] + 0.5 * (log_r + log_t)[None, :]

    phi = 0.5 * (log_w - logsumexp(log_s, axis=1))
    residual = np.inf
    for iteration in range(1, max_iters + 1):
        row_log = logsumexp(log_s + phi[None, :], axis=1) + phi
        phi = phi + 0.5 * (log_w - row_log)
        if iteration % 10 == 0 or iteration == max_iters:
            log_p = log_s + phi[:, None] + phi[None, :]
            marg = np.exp(logsumexp(log_p, axis=1))
            residual = float(np.max(np.abs(marg - np.exp(log_w))))
            if residual < tol:
                coupling = np.exp(log_p)
                return GridBridge(
                    points=x,
                    weights=np.exp(log_w),
                    coupling=coupling,
                    iterations=iteration,
                    residual=residual,
                )
    raise ConvergenceError(
        f"grid bridge did not reach tol={tol:g} in {max_iters} iterations "
        f"(residual {residual:.3e})"
    )
