"""Full-batch gradient descent for L2-regularized logistic regression."""
import logging
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)


class LogisticFit(NamedTuple):
    weights: np.ndarray
    intercept: float
    converged: bool
    iterations: int
    grad_norm: float


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    lr: Optional[float] = None,
    max_iter: int = 5000,
    l2: float = 0.0,
    tol: float = 1e-6,
    init: Optional[np.ndarray] = None,
) -> LogisticFit:
    """Fits on standardized columns and maps the coefficients back to raw units.

    When `lr` is None the step is fixed at 1/L for the loss's Lipschitz constant
    L, which keeps plain gradient descent stable without tuning. `init` holds
    starting values for [intercept, standardized weights...].
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    A = np.column_stack([np.ones(n), (X - mu) / sd])

    if lr is None:
        lipschitz = 0.25 * np.linalg.eigvalsh(A.T @ A / n).max() + l2
        lr = 1.0 / lipschitz

    theta = np.zeros(d + 1) if init is None else np.array(init, dtype=float)
    penalty = np.full(d + 1, l2)
    penalty[0] = 0.0

    grad_norm = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = A.T @ (expit(A @ theta) - y) / n + penalty * theta
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            break
        theta -= lr * grad

    converged = grad_norm < tol
    if not converged:
        logger.debug("logistic fit stopped after %d iterations, |grad|=%.3g", iterations, grad_norm)
    weights = theta[1:] / sd
    intercept = float(theta[0] - np.sum(theta[1:] * mu / sd))
    return LogisticFit(weights, intercept, converged, iterations, grad_norm)
