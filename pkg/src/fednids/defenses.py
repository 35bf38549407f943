"""Client-side defenses applied before a gradient leaves the client.

Two hook points exist. Input defenses (FedDef, mix) replace the training batch
before the gradient is taken; gradient defenses (DP noise, pruning) rewrite the
gradient afterwards. Every defense exposes both hooks, one of them a no-op.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, absolute, global_norm, grad, l2_norm, relu, tmin, tsum
from .models import MlpClassifier, ce_loss, param_grads


class DefenseError(RuntimeError):
    pass


# -- FedDef -------------------------------------------------------------------


@dataclass
class FedDefConfig:
    alpha: float = 1.0
    delta: float = 1.0
    epsilon: float = 0.0
    lr: float = 0.2
    steps: int = 40
    g_value: float = 1e-15

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class FedDefResult:
    x: np.ndarray
    y: np.ndarray
    initial_objective: float
    objective: float
    grad_distance: float
    input_distance: float
    steps_run: int
    early_stopped: bool
    trace: list[float] = field(default_factory=list)


def _feddef_terms(model, theta, x_prime: Tensor, y_prime: Tensor, x, g_true, gt, cfg):
    """Return (objective, gradient-distance, input-distance, max |pseudo gradient|)."""
    loss = ce_loss(model, x_prime, y_prime, theta)
    pseudo = grad(loss, theta, create_graph=True)
    max_abs = max(float(np.max(np.abs(g.data))) for g in pseudo)
    g_dist = global_norm([g - Tensor(t) for g, t in zip(pseudo, g_true)])
    x_dist = l2_norm(x_prime - Tensor(x))
    # |min(y') - y'_gt| per row, summed over the batch
    row_min = tmin(y_prime, axis=1)
    y_gt = tsum(y_prime * Tensor(gt), axis=1)
    label = tsum(absolute(row_min - y_gt))
    obj = cfg.alpha * relu(g_dist - cfg.epsilon) + relu(cfg.delta - x_dist) + label
    return obj, g_dist.item(), x_dist.item(), max_abs


def feddef_transform(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: FedDefConfig,
    rng: np.random.Generator,
) -> FedDefResult:
    """Search for a pseudo batch whose gradient mimics the real one.

    Starts from uniform noise and runs Adam jointly on data and labels against
    the weighted objective. The early-stop test on the pseudo gradient runs
    before each step. The lowest-objective iterate seen is returned, so the
    result never scores worse than the starting point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    g_true = param_grads(model, x, y)
    gt = np.zeros_like(y)
    gt[np.arange(len(y)), y.argmax(axis=1)] = 1.0
    theta = [Tensor(p, requires_grad=True) for p in model.params]
    opt = Adam([rng.uniform(size=x.shape), rng.uniform(size=y.shape)], cfg.lr)
    trace: list[float] = []
    best = None
    early = False
    steps_run = 0
    for step in range(cfg.steps + 1):
        xp = Tensor(opt.params[0], requires_grad=True)
        yp = Tensor(opt.params[1], requires_grad=True)
        obj, g_dist, x_dist, max_abs = _feddef_terms(model, theta, xp, yp, x, g_true, gt, cfg)
        value = obj.item()
        if not np.isfinite(value):
            raise DefenseError(f"FedDef objective became non-finite at step {step}")
        trace.append(value)
        if best is None or value < best[0]:
            best = (value, xp.data.copy(), yp.data.copy(), g_dist, x_dist)
        if step == cfg.steps:
            break
        if max_abs <= cfg.g_value:
            early = True
            break
        gx, gy = grad(obj, [xp, yp])
        opt.step([gx.data, gy.data])
        steps_run += 1
    value, xb, yb, g_dist, x_dist = best
    return FedDefResult(xb, yb, trace[0], value, g_dist, x_dist, steps_run, early, trace)


# -- gradient-space baselines -------------------------------------------------


def _flat(grads) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    shapes = [np.shape(g) for g in grads]
    flat = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1) for g in grads]) if grads else np.zeros(0)
    return flat, shapes


def _unflat(flat: np.ndarray, shapes) -> list[np.ndarray]:
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s)) if s else 1
        out.append(flat[pos : pos + n].reshape(s))
        pos += n
    return out


def laplace_scale(variance: float, reading: str = "variance") -> float:
    """Laplace scale b. ``variance`` reading gives Var = 2b^2 = variance."""
    if not variance > 0:
        raise ValueError(f"DP variance must be > 0, got {variance}")
    if reading == "variance":
        return float(np.sqrt(variance / 2.0))
    if reading == "scale":
        return float(variance)
    raise ValueError(f"unknown DP reading {reading!r}")


def dp_perturb(grads, scale: float, rng: np.random.Generator):
    """Add i.i.d. Laplace(0, scale) noise. Accepts one array or a list of layers."""
    single = isinstance(grads, np.ndarray)
    layers = [grads] if single else list(grads)
    flat, shapes = _flat(layers)
    if not np.all(np.isfinite(flat)):
        raise DefenseError("DP input gradient is not finite")
    noisy = _unflat(flat + rng.laplace(0.0, scale, size=flat.shape), shapes)
    return noisy[0] if single else noisy


def gp_prune(grads, rate: float):
    """Zero the ``floor(rate * n)`` smallest magnitudes over all layers jointly.

    Ties go to the lower flat index, via a stable sort.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prune rate must lie in [0, 1), got {rate}")
    single = isinstance(grads, np.ndarray)
    layers = [grads] if single else list(grads)
    flat, shapes = _flat(layers)
    n_zero = int(np.floor(rate * flat.size))
    out = flat.copy()
    if n_zero:
        out[np.argsort(np.abs(flat), kind="stable")[:n_zero]] = 0.0
    pruned = _unflat(out, shapes)
    return pruned[0] if single else pruned


def mix_transform(
    x: np.ndarray, y: np.ndarray, k: int, flip_prob: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Blend each row with ``k-1`` random partners, then mirror random features.

    Weights are Dirichlet(1); labels blend with the same weights and are never
    mirrored. Mirroring maps a feature v to 1 - v.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"mix needs 1 <= k <= batch ({n}), got k={k}")
    if k == 1:
        xm, ym = x.copy(), y.copy()
    else:
        partners = np.stack([rng.choice(np.delete(np.arange(n), i), size=k - 1, replace=False) for i in range(n)])
        idx = np.concatenate([np.arange(n)[:, None], partners], axis=1)
        w = rng.dirichlet(np.ones(k), size=n)
        xm = np.einsum("nk,nkd->nd", w, x[idx])
        ym = np.einsum("nk,nkd->nd", w, y[idx])
    if flip_prob > 0:
        flips = rng.uniform(size=xm.shape) < flip_prob
        xm = np.where(flips, 1.0 - xm, xm)
    return xm, ym


# -- defense objects ----------------------------------------------------------


@dataclass
class Defense:
    """No protection. Base class for the hook interface."""

    name = "none"

    def transform_batch(self, model, x, y, rng):
        return x, y

    def transform_gradient(self, grads, rng):
        return grads

    def shared_gradient(self, model: MlpClassifier, x, y, rng: np.random.Generator):
        """The gradient a client would upload for batch (x, y)."""
        xb, yb = self.transform_batch(model, x, y, rng)
        return self.transform_gradient(param_grads(model, xb, yb), rng)

    def to_dict(self) -> dict:
        return {"kind": self.name, **asdict(self)}


@dataclass
class NoDefense(Defense):
    name = "none"


@dataclass
class FedDef(Defense):
    config: FedDefConfig = field(default_factory=FedDefConfig)
    name = "feddef"

    def transform_batch(self, model, x, y, rng):
        res = feddef_transform(model, x, y, self.config, rng)
        return res.x, res.y

    def to_dict(self) -> dict:
        return {"kind": self.name, **asdict(self.config)}


@dataclass
class DpNoise(Defense):
    variance: float = 0.1
    reading: str = "variance"
    name = "dp"

    def transform_gradient(self, grads, rng):
        return dp_perturb(grads, laplace_scale(self.variance, self.reading), rng)


@dataclass
class GradientPruning(Defense):
    rate: float = 0.99
    name = "gp"

    def transform_gradient(self, grads, rng):
        return gp_prune(grads, self.rate)


@dataclass
class Mix(Defense):
    k: int = 2
    flip_prob: float = 0.1
    name = "mix"

    def transform_batch(self, model, x, y, rng):
        # a batch smaller than k mixes all of its rows
        return mix_transform(x, y, min(self.k, len(np.atleast_2d(x))), self.flip_prob, rng)


def make_defense(spec: dict | str) -> Defense:
    """Build a defense from ``{"kind": ..., **params}`` or a bare kind name."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "none")
    if kind == "none":
        return NoDefense()
    if kind == "feddef":
        return FedDef(FedDefConfig(**spec))
    if kind == "dp":
        return DpNoise(**spec)
    if kind == "gp":
        return GradientPruning(**spec)
    if kind == "mix":
        return Mix(**spec)
    raise ValueError(f"unknown defense kind {kind!r}")
