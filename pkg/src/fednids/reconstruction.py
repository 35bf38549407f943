"""Recovering client rows from a shared gradient.

Two routes. Closed-form extraction reads a single input row straight off the
first dense layer, since for one row the weight gradient is the outer product
of the bias gradient and the input. Inversion searches for dummy rows and
labels whose gradient matches the shared one. ``reconstruct`` tries extraction
first, falls back to inversion, and always takes labels from an inversion.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .autodiff import Adam, Tensor, global_norm, grad, inner, relu, sqrt, tsum
from .data import FeatureSchema, canonicalize
from .models import MlpClassifier, ce_loss, param_grads

# |det| of the bias-gradient Gram matrix below this counts as singular
GRAM_TOL = 1e-30
# bias gradients this small are treated as vanished
VANISHED = 1e-15


class ReconstructionError(RuntimeError):
    pass


class UnsupportedArchitecture(ValueError):
    pass


@dataclass
class LeakedUpdate:
    """A gradient as seen by the server, one array per parameter tensor."""

    grads: list[np.ndarray]
    batch_size: int = 1

    @classmethod
    def from_model_delta(cls, before, after, lr: float, batch_size: int = 1) -> "LeakedUpdate":
        """Recover the gradient from a single plain gradient step."""
        return cls([(b - a) / lr for b, a in zip(before, after)], batch_size)

    def first_layer(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.grads) < 2 or np.ndim(self.grads[0]) != 2 or np.ndim(self.grads[1]) != 1:
            raise UnsupportedArchitecture("first layer needs a 2-D weight followed by a 1-D bias")
        gW, gb = self.grads[0], self.grads[1]
        if gW.shape[0] != gb.shape[0]:
            raise UnsupportedArchitecture(f"weight {gW.shape} and bias {gb.shape} disagree")
        return gW, gb


@dataclass
class Extraction:
    x: np.ndarray | None
    ok: bool
    reason: str = ""


def extract_single(update: LeakedUpdate) -> Extraction:
    """Closed-form input recovery from the first layer's (W, b) gradients.

    The bias gradient is broadcast over the claimed batch, giving a B x out
    matrix whose Gram matrix is inverted. For B >= 2 every row is identical and
    the Gram matrix has rank one, so extraction reports failure.
    """
    gW, gb = update.first_layer()
    B = max(1, int(update.batch_size))
    if not np.all(np.isfinite(gW)) or not np.all(np.isfinite(gb)):
        return Extraction(None, False, "non-finite gradient")
    if np.max(np.abs(gb)) <= VANISHED:
        return Extraction(None, False, "bias gradient vanished")
    Gb = np.tile(gb / B, (B, 1))
    gram = Gb @ Gb.T
    if B > 1:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(gram, check_finite=False)
    else:
        lu, piv = gram, None
    pivots = np.abs(np.diag(lu))
    det = float(np.prod(pivots))
    if not det >= GRAM_TOL:
        return Extraction(None, False, f"singular bias Gram matrix (|det|={det:.3g})")
    # LU leaves rank-deficient pivots at rounding level (~1e-19), not zero, so also
    # test them against the largest pivot
    if B > 1 and pivots.min() <= B * np.finfo(np.float64).eps * pivots.max():
        return Extraction(None, False, f"rank-deficient bias Gram matrix (pivot ratio {pivots.min() / pivots.max():.3g})")
    # x^T = gW^T Gb^T (Gb Gb^T)^-1; with B=1 this is gW^T gb / (gb . gb)
    if B == 1:
        x = (gW.T @ gb) / gram[0, 0]
    else:
        x = (gW.T @ Gb.T @ scipy.linalg.lu_solve((lu, piv), np.eye(B))).T
    return Extraction(np.atleast_2d(x), True)


@dataclass
class InversionConfig:
    metric: str = "l2"
    steps: int = 300
    lr: float = 0.1
    restarts: int = 3
    sweeps: int = 1

    def __post_init__(self):
        if self.metric not in ("l2", "cosine"):
            raise ValueError(f"unknown inversion metric {self.metric!r}")
        if self.steps < 1 or self.restarts < 1 or self.sweeps < 1:
            raise ValueError("steps, restarts and sweeps must be >= 1")


def gradient_distance(dummy: list[Tensor], target: list[np.ndarray], metric: str) -> Tensor:
    if metric == "l2":
        return global_norm([d - Tensor(t) for d, t in zip(dummy, target)])
    dot = sum((inner(d, Tensor(t)) for d, t in zip(dummy, target)), Tensor(0.0))
    dn = sqrt(sum((tsum(d * d) for d in dummy), Tensor(0.0)))
    tn = float(np.sqrt(sum(np.sum(t * t) for t in target)))
    return 1.0 - dot / (dn * tn + 1e-30)


@dataclass
class Inversion:
    x: np.ndarray
    y: np.ndarray
    x_raw: np.ndarray
    objective: float
    labels: np.ndarray
    trace: list[float] = field(default_factory=list)
    restarts_used: int = 0


def _run_adam(objective, init: list[np.ndarray], steps: int, lr: float):
    """Adam on ``init``; returns (best params, best value, incumbent trace, diverged)."""
    opt = Adam(init, lr)
    best_val, best = np.inf, [p.copy() for p in init]
    trace = []
    for step in range(steps + 1):
        leaves = [Tensor(p, requires_grad=True) for p in opt.params]
        obj = objective(*leaves)
        value = obj.item()
        if not np.isfinite(value):
            return best, best_val, trace, True
        if value < best_val:
            best_val, best = value, [p.copy() for p in opt.params]
        trace.append(best_val)
        if step == steps:
            break
        gs = grad(obj, leaves, allow_unused=True)
        gs = [np.zeros_like(p) if g is None else g.data for g, p in zip(gs, opt.params)]
        if not all(np.all(np.isfinite(g)) for g in gs):
            return best, best_val, trace, True
        opt.step(gs)
    return best, best_val, trace, False


def invert(
    model: MlpClassifier,
    update: LeakedUpdate,
    cfg: InversionConfig,
    rng: np.random.Generator,
    schema: FeatureSchema | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> Inversion:
    """Match the leaked gradient with a dummy batch of ``update.batch_size`` rows.

    A batch is solved by coordinate descent: each row's (x*, y*) is optimised
    in turn while the other rows stay frozen. The best objective over
    ``restarts`` random starts wins; a non-finite objective just ends that start.
    """
    B = max(1, int(update.batch_size))
    theta = [Tensor(p, requires_grad=True) for p in model.params]
    target = update.grads

    def distance(xb: Tensor, yb: Tensor) -> Tensor:
        dummy = grad(ce_loss(model, xb, yb, theta), theta, create_graph=True)
        return gradient_distance(dummy, target, cfg.metric)

    best = None
    used = 0
    for attempt in range(cfg.restarts):
        used += 1
        if init is not None and attempt == 0:
            X, Y = (np.atleast_2d(np.array(a, dtype=np.float64)) for a in init)
        else:
            X, Y = rng.uniform(size=(B, model.dim)), rng.uniform(size=(B, model.n_classes))
        trace: list[float] = []
        value = np.inf
        for _ in range(cfg.sweeps):
            for i in range(B):
                frozen_x, frozen_y = X.copy(), Y.copy()
                mask = np.zeros((B, 1))
                mask[i] = 1.0

                def row_objective(xi: Tensor, yi: Tensor, fx=frozen_x, fy=frozen_y, m=mask):
                    xb = Tensor(fx * (1 - m)) + Tensor(m) @ xi
                    yb = Tensor(fy * (1 - m)) + Tensor(m) @ yi
                    return distance(xb, yb)

                (xi, yi), value, t, _ = _run_adam(row_objective, [X[i : i + 1], Y[i : i + 1]], cfg.steps, cfg.lr)
                X[i], Y[i] = xi[0], yi[0]
                trace.extend(t)
        if best is None or value < best.objective:
            xc = canonicalize(X, schema) if schema is not None else np.clip(X, 0.0, 1.0)
            best = Inversion(xc, Y.copy(), X.copy(), float(value), Y.argmax(axis=1), trace, used)
        if best.objective == 0.0:
            break
    best.restarts_used = used
    return best


def invert_labels(
    model: MlpClassifier,
    update: LeakedUpdate,
    x: np.ndarray,
    cfg: InversionConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Inversion over y* alone with the input rows fixed at ``x``.

    With x fixed the dummy gradient is linear in y*, so it is assembled once
    from the gradients of the unit label vectors and the same Adam search runs
    on that exact linear map.
    """
    x = np.atleast_2d(x)
    n = model.n_classes
    B = len(x)
    basis = []
    for j in range(n * B):
        y = np.zeros((B, n))
        y.flat[j] = 1.0
        basis.append(np.concatenate([g.reshape(-1) for g in param_grads(model, x, y)]))
    A = np.stack(basis, axis=1)
    target = np.concatenate([g.reshape(-1) for g in update.grads])
    # ||A y - g||^2 = y'Gy - 2c'y + g'g, so only n x n quantities enter the loop
    gram, corr, tt = A.T @ A, A.T @ target, float(target @ target)

    def objective(y: Tensor) -> Tensor:
        col = y.reshape(n * B, 1)
        quad = tsum(col * (Tensor(gram) @ col))
        lin = tsum(col * Tensor(corr.reshape(-1, 1)))
        if cfg.metric == "l2":
            return sqrt(relu(quad - 2.0 * lin + tt))
        return 1.0 - lin / (sqrt(quad) * np.sqrt(tt) + 1e-30)

    best_y, best_val = None, np.inf
    for _ in range(cfg.restarts):
        (y,), value, _, _ = _run_adam(objective, [rng.uniform(size=(B, n))], cfg.steps, cfg.lr)
        if value < best_val:
            best_y, best_val = y, value
    if best_y is None:
        raise ReconstructionError("label inversion diverged on every restart")
    return best_y, float(best_val)


@dataclass
class Reconstruction:
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    method: str
    objective: float
    note: str = ""


def reconstruct(
    model: MlpClassifier,
    update: LeakedUpdate,
    cfg: InversionConfig,
    rng: np.random.Generator,
    schema: FeatureSchema | None = None,
) -> Reconstruction:
    """Extraction when the batch is a single row, inversion otherwise or on failure."""
    note = ""
    if update.batch_size == 1:
        ext = extract_single(update)
        if ext.ok:
            x = canonicalize(ext.x, schema) if schema is not None else np.clip(ext.x, 0.0, 1.0)
            # labels come from inversion with the input pinned to the raw extraction
            y, value = invert_labels(model, update, ext.x, cfg, rng)
            return Reconstruction(x, y, y.argmax(axis=1), "extraction", value)
        note = ext.reason
    try:
        inv = invert(model, update, cfg, rng, schema)
    except (FloatingPointError, ReconstructionError) as exc:
        raise ReconstructionError(f"extraction failed ({note or 'batch > 1'}) and inversion failed ({exc})") from exc
    if not np.isfinite(inv.objective):
        raise ReconstructionError(f"extraction failed ({note or 'batch > 1'}) and inversion never produced a finite objective")
    return Reconstruction(inv.x, inv.y, inv.labels, "inversion", inv.objective, note)


def write_reconstructions(path: str | Path, rows: list[Reconstruction]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        dim = rows[0].x.shape[1] if rows else 0
        w.writerow(["sample", "row", "method", "objective", "label", *(f"x{j}" for j in range(dim))])
        for i, rec in enumerate(rows):
            for r, (xr, lab) in enumerate(zip(rec.x, rec.labels)):
                w.writerow([i, r, rec.method, repr(rec.objective), int(lab), *(repr(float(v)) for v in xr)])
