"""L2-regularized logistic probes fitted by Newton's method.

The solver is closed-form per iteration (no stochastic steps), so the fitted
weights depend only on the data and hyperparameters. Features are
standardized on the training set and the scaling is folded back into the
returned weights, so ``score(v) = weight @ v + bias`` on raw activations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from mechpilot.canonical import digest
from mechpilot.workbench.run import ActivationSet, Site

MAX_ITER = 100
TOL = 1e-10


class SingleClass(ValueError):
    pass


class DegenerateActivations(ValueError):
    pass


@dataclass(frozen=True)
class Probe:
    weight: np.ndarray
    bias: float
    site: Site
    train_seed: int
    fit_digest: str

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("probe weights must be finite")
        self.weight.setflags(write=False)

    def score(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.weight + self.bias


def _data_digest(vectors: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(vectors, dtype=np.float32).tobytes())
    h.update(np.packbits(labels).tobytes())
    h.update(str(vectors.shape).encode())
    return "sha256:" + h.hexdigest()


def fit_weights(X: np.ndarray, y: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    """Newton iterations on standardized features; returns raw-space (weight, bias)."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    t = y.astype(np.float64)
    reg = np.full(Z.shape[1], l2)
    reg[-1] = 0.0  # intercept is not penalized
    beta = np.zeros(Z.shape[1])
    for _ in range(MAX_ITER):
        p = expit(Z @ beta)
        grad = Z.T @ (p - t) + reg * beta
        hess = (Z * (p * (1 - p))[:, None]).T @ Z + np.diag(reg)
        step = np.linalg.solve(hess, grad)
        beta -= step
        if np.max(np.abs(step)) < TOL:
            break
    w = beta[:-1] / sd
    return w, float(beta[-1] - w @ mu)


def fit_probe(acts: ActivationSet, labels: Sequence[bool], seed: int, l2: float = 1.0) -> Probe:
    X = np.asarray(acts.vectors, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} activation vectors but {len(y)} labels")
    if y.all() or not y.any():
        raise SingleClass("probe training needs both classes")
    if np.ptp(X, axis=0).max() == 0.0:
        raise DegenerateActivations("all activation vectors are identical while labels differ")

    w, b = fit_weights(X, y, l2)
    fit = digest({
        "data": _data_digest(X, y),
        "hyperparameters": {"l2": l2, "max_iter": MAX_ITER, "solver": "newton", "tol": TOL},
        "seed": seed,
        "site": acts.site.to_json(),
    })
    return Probe(w, b, acts.site, seed, fit)
