"""Leakage metrics and numeric evaluators for the convergence and privacy bounds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FeatureSchema, project_to_original


def privacy_score(x: np.ndarray, x_rec: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Per-row dissimilarity between original and reconstructed rows.

    Continuous features contribute their absolute normalized difference;
    discrete features contribute 1 when the original-unit integers differ.
    The sum is divided by the feature count, so the score lies in [0, 1].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_rec = np.atleast_2d(np.asarray(x_rec, dtype=np.float64))
    if x.shape != x_rec.shape or x.shape[1] != schema.dim:
        raise ValueError(f"rows {x.shape} / {x_rec.shape} do not match schema dim {schema.dim}")
    disc = schema.discrete_mask
    cont = np.abs(x[:, ~disc] - x_rec[:, ~disc]).sum(axis=1)
    if disc.any():
        a = np.round(project_to_original(x, schema)[:, disc])
        b = np.round(project_to_original(x_rec, schema)[:, disc])
        mismatch = (a != b).sum(axis=1)
    else:
        mismatch = np.zeros(len(x))
    return (cont + mismatch) / schema.dim


def label_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"label shapes differ: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ValueError("no labels to compare")
    return float(np.mean(predicted == truth))


# -- convergence bound --------------------------------------------------------


@dataclass
class ConvergenceInputs:
    L: float
    mu: float
    sigma: Sequence[float]
    G: float
    epsilon: float
    gamma: float
    E: int
    K: int
    T: int
    p: Sequence[float]
    init_distance: float

    def validate(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.L < self.mu:
            raise ValueError(f"need L >= mu, got L={self.L}, mu={self.mu}")
        if len(self.sigma) != len(self.p):
            raise ValueError("one sigma per client weight")
        scalars = [self.G, self.epsilon, self.gamma, self.init_distance, *self.sigma, *self.p]
        if any(v < 0 for v in scalars):
            raise ValueError("bound inputs must be non-negative")
        if self.E < 1 or self.K < 1 or self.T < 0:
            raise ValueError("need E >= 1, K >= 1, T >= 0")


def convergence_terms(inp: ConvergenceInputs) -> tuple[float, float]:
    """The (B, C) constants of the federated convergence bound."""
    inp.validate()
    p, sigma = np.asarray(inp.p, dtype=np.float64), np.asarray(inp.sigma, dtype=np.float64)
    B = float(np.sum(p**2 * (inp.epsilon + sigma) ** 2)) + 6 * inp.L * inp.gamma + 8 * (inp.E - 1) ** 2 * (inp.epsilon + inp.G) ** 2
    C = 4.0 / inp.K * inp.E**2 * (inp.epsilon + inp.G) ** 2
    return B, C


def convergence_bound(inp: ConvergenceInputs) -> float:
    """Upper bound on expected optimality gap after T iterations."""
    B, C = convergence_terms(inp)
    kappa = inp.L / inp.mu
    return 2 * kappa / (inp.mu + inp.T) * ((B + C) / inp.mu + 2 * inp.L * inp.init_distance**2)


# -- input-distance lower bound -----------------------------------------------


@dataclass
class DistanceBound:
    lower: float
    general_lower: float
    measured: float
    holds: bool
    M: float


def distance_lower_bound(dW: float, db: float, M: float, x_norm: float = 1.0) -> float:
    """2(||dW|| - ||x|| ||db||) / (2M + ||db||); ``x_norm=1`` gives the unit-ball form."""
    return 2.0 * (dW - x_norm * db) / (2.0 * M + db)


def distance_bound_check(
    x: np.ndarray,
    x_prime: np.ndarray,
    gW: np.ndarray,
    gb: np.ndarray,
    gW_prime: np.ndarray,
    gb_prime: np.ndarray,
    M: float | None = None,
    slack: float = 1e-9,
    unit_ball: bool = True,
) -> DistanceBound:
    """Evaluate the first-layer lower bound on ||x' - x|| for a single row.

    The unit-ball form assumes ||x|| <= 1 and rows outside the unit ball are
    rejected. With ``unit_ball=False`` any row is accepted and ``holds`` is
    judged against ``general_lower``, the bound with the actual ||x||.
    ``M`` defaults to the larger of the two bias-gradient norms.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_prime = np.asarray(x_prime, dtype=np.float64).reshape(-1)
    nb, nbp = float(np.linalg.norm(gb)), float(np.linalg.norm(gb_prime))
    if M is None:
        M = max(nb, nbp)
    if M < max(nb, nbp) * (1 - 1e-12):
        raise ValueError(f"M={M} is below an observed bias-gradient norm ({max(nb, nbp)})")
    if M <= 0:
        raise ValueError("M must be > 0")
    x_norm = float(np.linalg.norm(x))
    if unit_ball and x_norm > 1.0 + 1e-12:
        raise ValueError(f"unit-ball bound needs ||x|| <= 1, got {x_norm:.6g}")
    dW = float(np.linalg.norm(np.asarray(gW_prime) - np.asarray(gW)))
    db = float(np.linalg.norm(np.asarray(gb_prime) - np.asarray(gb)))
    lower = distance_lower_bound(dW, db, M)
    general = distance_lower_bound(dW, db, M, x_norm)
    measured = float(np.linalg.norm(x_prime - x))
    bound = lower if unit_ball else general
    return DistanceBound(lower, general, measured, measured >= bound - slack, M)
