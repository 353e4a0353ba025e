"""L2-regularized logistic regression fit by damped Newton iteration.

Features are standardized to zero mean / unit variance on the training data.
The objective is the average log-loss plus (lambda/2)||w||^2 with the bias
unpenalized, so duplicating the dataset leaves the fit unchanged. Newton
steps use backtracking line search and run until the gradient norm drops
below tolerance; the fit is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_L2 = 1.0
GRADIENT_TOL = 1e-6
MAX_NEWTON_ITER = 200


class FitError(ValueError):
    """Raised when the training data cannot support a fit."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log1p_exp(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0))))


@dataclass
class LogisticModel:
    """Standardization parameters plus fitted weights."""

    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: float
    l2: float = DEFAULT_L2

    def decision(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision(X))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticModel":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            scale=np.asarray(data["scale"], dtype=np.float64),
            weights=np.asarray(data["weights"], dtype=np.float64),
            bias=float(data["bias"]),
            l2=float(data["l2"]),
        )


def regularized_loss(Z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float) -> float:
    """Average log-loss plus the ridge penalty (bias unpenalized)."""
    margin = Z @ w + b
    nll = _log1p_exp(margin) - y * margin
    return float(nll.mean() + 0.5 * l2 * (w @ w))


def train_logreg(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = DEFAULT_L2,
    tol: float = GRADIENT_TOL,
    max_iter: int = MAX_NEWTON_ITER,
) -> LogisticModel:
    """Fit a binary classifier; ``y`` holds labels in {0, 1}."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise FitError(f"shape mismatch: X {X.shape}, y {y.shape}")
    classes = np.unique(y)
    if classes.size < 2:
        raise FitError("logistic regression needs both classes present")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale

    n, d = Z.shape
    theta = np.zeros(d + 1)  # weights then bias

    def grad_hess(theta):
        w, b = theta[:-1], theta[-1]
        p = _sigmoid(Z @ w + b)
        resid = (p - y) / n
        g = np.empty(d + 1)
        g[:-1] = Z.T @ resid + l2 * w
        g[-1] = resid.sum()
        weight = p * (1.0 - p) / n
        Zw = Z * weight[:, None]
        H = np.empty((d + 1, d + 1))
        H[:d, :d] = Z.T @ Zw + l2 * np.eye(d)
        H[:d, d] = Zw.sum(axis=0)
        H[d, :d] = H[:d, d]
        H[d, d] = weight.sum()
        return g, H

    loss = regularized_loss(Z, y, theta[:-1], theta[-1], l2)
    for _ in range(max_iter):
        g, H = grad_hess(theta)
        if np.linalg.norm(g) < tol:
            break
        # small diagonal floor keeps the solve well-posed if p saturates
        step = np.linalg.solve(H + 1e-12 * np.eye(d + 1), g)
        t = 1.0
        for _ in range(60):
            cand = theta - t * step
            cand_loss = regularized_loss(Z, y, cand[:-1], cand[-1], l2)
            if cand_loss <= loss:
                break
            t *= 0.5
        theta = theta - t * step
        loss = regularized_loss(Z, y, theta[:-1], theta[-1], l2)

    return LogisticModel(mean=mean, scale=scale, weights=theta[:-1], bias=float(theta[-1]), l2=l2)
