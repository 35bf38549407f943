"""Evasion attacks built on reconstructed traffic.

White-box attacks push rows toward the benign verdict of either detector: the
classifier (benign class probability) or the autoencoder (reconstruction score
under its threshold). The black-box route trains a GAN on reconstructed benign
rows and scores what it generates.

Classifier accuracy here means the share of adversarial rows still flagged as
non-benign; the evasion rate is its complement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, grad, log_softmax, relu, tanh, tmax, tsum
from .models import (
    AnomalyAutoencoder,
    GanPair,
    MlpClassifier,
    anomaly_score,
    classify,
    gan_train,
)


class UnsupportedTarget(TypeError):
    pass


class EmptyBenignPool(RuntimeError):
    """No reconstructed row carries the benign label, so no GAN can be trained."""


@dataclass
class AttackConfig:
    kind: str = "pgd"
    eps: float = 40 / 255
    alpha: float = 6 / 255
    steps: int = 100
    c: float = 0.01
    lr: float = 0.05
    random_start: bool = True
    overshoot: float = 0.02

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")


class ClassifierTarget:
    """Attack objective: make the classifier answer ``benign``."""

    def __init__(self, model: MlpClassifier, benign: int = 0):
        self.model = model
        self.benign = benign

    def logits(self, x: Tensor) -> Tensor:
        return self.model.logits(x)

    def loss(self, x: Tensor) -> Tensor:
        """Per-row cross-entropy toward the benign class."""
        return _benign_ce(self.logits(x), self.benign)

    def success(self, x: np.ndarray) -> np.ndarray:
        return classify(self.model, x).argmax(axis=1) == self.benign

    def margin(self, x: Tensor) -> Tensor:
        """max over other logits minus the benign logit; <= 0 means evaded."""
        z = self.logits(x)
        n = z.shape[1]
        others = np.ones((1, n))
        others[0, self.benign] = 0.0
        pick = np.zeros((n, 1))
        pick[self.benign] = 1.0
        z_target = z @ Tensor(pick)
        # push the benign logit far down before taking the max over the rest
        z_other = tmax(z + Tensor((1.0 - others) * -1e9), axis=1, keepdims=True)
        return (z_other - z_target).reshape(-1)


def _benign_ce(z: Tensor, benign: int) -> Tensor:
    n = z.shape[1]
    pick = np.zeros((n, 1))
    pick[benign] = 1.0
    return -(log_softmax(z, axis=1) @ Tensor(pick)).reshape(-1)


class AnomalyTarget:
    """Attack objective: bring the reconstruction score under the threshold."""

    def __init__(self, ae: AnomalyAutoencoder):
        if ae.threshold is None:
            raise ValueError("anomaly detector has no calibrated threshold")
        self.ae = ae

    def loss(self, x: Tensor) -> Tensor:
        return self.ae.score_tensor(x)

    def success(self, x: np.ndarray) -> np.ndarray:
        return anomaly_score(self.ae, x) < self.ae.threshold

    def margin(self, x: Tensor) -> Tensor:
        return relu(self.ae.score_tensor(x) - self.ae.threshold)


def as_target(target, benign: int = 0):
    if isinstance(target, (ClassifierTarget, AnomalyTarget)):
        return target
    if isinstance(target, MlpClassifier):
        return ClassifierTarget(target, benign)
    if isinstance(target, AnomalyAutoencoder):
        return AnomalyTarget(target)
    # anything exposing a per-row loss and a success predicate works for the gradient-sign attacks
    if callable(getattr(target, "loss", None)) and callable(getattr(target, "success", None)):
        return target
    raise UnsupportedTarget(f"cannot attack {type(target).__name__}")


def _input_grad(fn, x: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    (g,) = grad(tsum(fn(xt)), [xt])
    return g.data


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def fgsm(target, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """One signed step of size eps down the attack loss."""
    t = as_target(target)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.clip(x - cfg.eps * np.sign(_input_grad(t.loss, x)), 0.0, 1.0)


def pgd(target, x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed steps of size alpha, projected onto the eps box and [0, 1].

    Each row returns its lowest-loss iterate among those after a step.
    """
    t = as_target(target)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_adv = x.copy()
    if cfg.random_start and cfg.eps > 0:
        rng = rng or np.random.default_rng(0)
        x_adv = _project(x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape), x, cfg.eps)
    best, best_loss = x_adv.copy(), np.full(len(x), np.inf)
    for step in range(cfg.steps + 1):
        xt = Tensor(x_adv, requires_grad=True)
        loss = t.loss(xt)
        if step > 0:
            better = loss.data < best_loss
            best[better], best_loss[better] = x_adv[better], loss.data[better]
        if step == cfg.steps:
            break
        (g,) = grad(tsum(loss), [xt])
        x_adv = _project(x_adv - cfg.alpha * np.sign(g.data), x, cfg.eps)
    return best


def cw(target, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Penalty-form attack in tanh space with an incumbent rule.

    Minimises c * ||x_adv - x||^2 + margin. A row only changes when an
    iterate is adversarial and closer than the current incumbent, so rows that
    never succeed come back untouched.
    """
    t = as_target(target)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = x.copy()
    best_dist = np.full(len(x), np.inf)
    already = t.success(x)
    best_dist[already] = 0.0
    w0 = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    opt = Adam([w0], cfg.lr)
    for _ in range(cfg.steps):
        w = Tensor(opt.params[0], requires_grad=True)
        x_adv = (tanh(w) + 1.0) * 0.5
        diff = x_adv - Tensor(x)
        dist = tsum(diff * diff, axis=1)
        obj = tsum(cfg.c * dist + relu(t.margin(x_adv)))
        xa = x_adv.data
        ok = t.success(xa)
        d = dist.data
        better = ok & (d < best_dist)
        out[better] = xa[better]
        best_dist[better] = d[better]
        (gw,) = grad(obj, [w])
        opt.step([gw.data])
    return out


@dataclass
class DeepFoolResult:
    x: np.ndarray
    raw_perturbation: np.ndarray
    iterations: np.ndarray


def deepfool(
    target,
    x: np.ndarray,
    cfg: AttackConfig,
    labels: np.ndarray | None = None,
    max_iter: int = 50,
) -> DeepFoolResult:
    """Untargeted closest-boundary steps on the linearised classifier.

    ``raw_perturbation`` is the accumulated step before overshoot and clipping.
    Rows whose prediction already differs from ``labels`` stay put.
    """
    t = as_target(target)
    if not isinstance(t, ClassifierTarget):
        raise UnsupportedTarget("DeepFool needs a classifier")
    model = t.model
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pred0 = classify(model, x).argmax(axis=1)
    labels = pred0 if labels is None else np.asarray(labels)
    out = x.copy()
    raw = np.zeros_like(x)
    iters = np.zeros(len(x), dtype=int)
    n = model.n_classes
    for i in range(len(x)):
        k0 = int(labels[i])
        if pred0[i] != k0:
            continue
        r_tot = np.zeros(x.shape[1])
        xi = x[i : i + 1].copy()
        for it in range(max_iter):
            xt = Tensor(xi, requires_grad=True)
            z = model.logits(xt)
            if int(np.argmax(z.data[0])) != k0:
                break
            grads = []
            for j in range(n):
                col = np.zeros((n, 1))
                col[j] = 1.0
                (gj,) = grad(tsum(z @ Tensor(col)), [xt])
                grads.append(gj.data[0])
            best, best_r = np.inf, None
            for j in range(n):
                if j == k0:
                    continue
                w = grads[j] - grads[k0]
                f = z.data[0, j] - z.data[0, k0]
                wn = np.linalg.norm(w)
                if wn == 0:
                    continue
                dist = abs(f) / wn
                if dist < best:
                    best, best_r = dist, (abs(f) + 1e-4) * w / wn**2
            if best_r is None:
                break
            r_tot += best_r
            iters[i] = it + 1
            xi = x[i : i + 1] + (1 + cfg.overshoot) * r_tot
        raw[i] = r_tot
        out[i] = _project(x[i] + (1 + cfg.overshoot) * r_tot, x[i], cfg.eps)
    return DeepFoolResult(out, raw, iters)


AUTOPGD_CHECKPOINTS = (0.0, 0.22, 0.41, 0.57, 0.70, 0.79, 0.86, 0.93)


@dataclass
class AutoPgdResult:
    x: np.ndarray
    objective: np.ndarray
    step_sizes: list[np.ndarray]
    used_ce: bool


def dlr_toward(z: Tensor, target: int) -> Tensor:
    """Targeted difference-of-logits ratio: (best other - target) / (z_1st - z_3rd)."""
    n = z.shape[1]
    zs = np.sort(z.data, axis=1)[:, ::-1]
    scale = Tensor(zs[:, 0] - zs[:, 2] + 1e-12)
    mask = np.zeros((1, n))
    mask[0, target] = -1e9
    pick = np.zeros((n, 1))
    pick[target] = 1.0
    best_other = tmax(z + Tensor(mask), axis=1)
    return (best_other - (z @ Tensor(pick)).reshape(-1)) / scale


def autopgd(target, x: np.ndarray, cfg: AttackConfig) -> AutoPgdResult:
    """Step-size-adaptive PGD with momentum on a targeted DLR objective.

    The step starts at 2*eps and halves at a checkpoint when too few steps
    since the previous checkpoint improved the objective, or when neither the
    step nor the best value moved; a halving restarts from the best point.
    Two-class models have no third logit, so they use cross-entropy instead.
    """
    t = as_target(target)
    if not isinstance(t, ClassifierTarget):
        raise UnsupportedTarget("AutoPGD needs a classifier")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    used_ce = t.model.n_classes < 3

    def objective(xt: Tensor) -> Tensor:
        z = t.logits(xt)
        return _benign_ce(z, t.benign) if used_ce else dlr_toward(z, t.benign)

    def value_and_grad(xa):
        xt = Tensor(xa, requires_grad=True)
        f = objective(xt)
        (g,) = grad(tsum(f), [xt])
        return f.data.copy(), g.data

    n_iter = cfg.steps
    checkpoints = sorted(set(int(np.ceil(p * n_iter)) for p in AUTOPGD_CHECKPOINTS))
    rho, momentum = 0.75, 0.75
    eta = np.full(len(x), 2.0 * cfg.eps)
    x_prev = x.copy()
    f0, g = value_and_grad(x)
    x_cur = _project(x - eta[:, None] * np.sign(g), x, cfg.eps)
    f_cur, g = value_and_grad(x_cur)
    best_x = np.where((f_cur < f0)[:, None], x_cur, x)
    best_f = np.minimum(f_cur, f0)
    improved = (f_cur < f0).astype(int)
    last_ck = 0
    eta_at_ck, best_at_ck = eta.copy(), best_f.copy()
    history = [eta.copy()]
    x_prev = x.copy()
    for k in range(1, n_iter):
        z = _project(x_cur - eta[:, None] * np.sign(g), x, cfg.eps)
        mom = 1.0 if k == 1 else momentum
        x_next = _project(x_cur + mom * (z - x_cur) + (1 - mom) * (x_cur - x_prev), x, cfg.eps)
        f_next, g_next = value_and_grad(x_next)
        improved += f_next < f_cur
        better = f_next < best_f
        best_x[better] = x_next[better]
        best_f[better] = f_next[better]
        x_prev, x_cur, f_cur, g = x_cur, x_next, f_next, g_next
        if k in checkpoints and k > last_ck:
            span = k - last_ck
            few = improved < rho * span
            stuck = (eta == eta_at_ck) & (best_f == best_at_ck)
            halve = few | stuck
            eta = np.where(halve, eta / 2.0, eta)
            if halve.any():
                x_cur[halve] = best_x[halve]
                x_prev[halve] = best_x[halve]
                f_cur[halve] = best_f[halve]
                _, g_best = value_and_grad(best_x)
                g[halve] = g_best[halve]
            improved[:] = 0
            last_ck = k
            eta_at_ck, best_at_ck = eta.copy(), best_f.copy()
        history.append(eta.copy())
    return AutoPgdResult(best_x, best_f, history, used_ce)


# -- reporting ----------------------------------------------------------------


@dataclass
class EvasionReport:
    attack: str
    detector: str
    rows: np.ndarray
    success: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    score: np.ndarray
    threshold: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def evasion_rate(self) -> float:
        return float(np.mean(self.success)) if self.n else 0.0

    @property
    def accuracy(self) -> float | None:
        """Share of rows the classifier still flags; None for the anomaly detector."""
        return 1.0 - self.evasion_rate if self.detector == "classifier" else None

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.score)) if self.n else float("nan")

    def summary(self) -> dict:
        return {
            "attack": self.attack,
            "detector": self.detector,
            "n": self.n,
            "evasion_rate": self.evasion_rate,
            "accuracy": self.accuracy,
            "mean_score": self.mean_score,
            "mean_l2": float(np.mean(self.l2)) if self.n else 0.0,
            "threshold": self.threshold,
            **self.meta,
        }

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for i in range(self.n):
                rec = {
                    "sample": i,
                    "success": bool(self.success[i]),
                    "l2": float(self.l2[i]),
                    "score": float(self.score[i]),
                    "row": [float(v) for v in self.rows[i]],
                }
                fh.write(json.dumps(rec) + "\n")


def evaluate(target, x_orig: np.ndarray, x_adv: np.ndarray, attack: str, meta: dict | None = None) -> EvasionReport:
    t = as_target(target)
    x_orig, x_adv = np.atleast_2d(x_orig), np.atleast_2d(x_adv)
    diff = x_adv - x_orig
    if isinstance(t, ClassifierTarget):
        score = classify(t.model, x_adv)[:, t.benign] if len(x_adv) else np.zeros(0)
        detector, thr = "classifier", None
    else:
        score = anomaly_score(t.ae, x_adv) if len(x_adv) else np.zeros(0)
        detector, thr = "anomaly", t.ae.threshold
    success = t.success(x_adv) if len(x_adv) else np.zeros(0, dtype=bool)
    return EvasionReport(
        attack,
        detector,
        x_adv,
        success,
        np.linalg.norm(diff, axis=1),
        np.max(np.abs(diff), axis=1) if diff.size else np.zeros(len(diff)),
        score,
        thr,
        dict(meta or {}),
    )


def run_attack(target, x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator, labels=None) -> EvasionReport:
    """Dispatch on ``cfg.kind`` and score the result."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    meta = {"eps": cfg.eps, "c": cfg.c} if cfg.kind == "cw" else {"eps": cfg.eps}
    if len(x) == 0:
        return evaluate(target, x, x, cfg.kind, meta)
    if cfg.kind == "fgsm":
        adv = fgsm(target, x, cfg)
    elif cfg.kind == "pgd":
        adv = pgd(target, x, cfg, rng)
    elif cfg.kind == "cw":
        adv = cw(target, x, cfg)
    elif cfg.kind == "deepfool":
        adv = deepfool(target, x, cfg, labels).x
    elif cfg.kind == "autopgd":
        res = autopgd(target, x, cfg)
        adv = res.x
        meta["dlr_fallback_ce"] = res.used_ce
    else:
        raise ValueError(f"unknown attack {cfg.kind!r}")
    return evaluate(target, x, adv, cfg.kind, meta)


# -- black-box GAN ------------------------------------------------------------


@dataclass
class GanCurve:
    epochs: list[int]
    accuracy: list[float]
    mean_score: list[float]
    threshold: float

    @property
    def classifier_er(self) -> list[float]:
        return [1.0 - a for a in self.accuracy]

    @property
    def anomaly_er(self) -> list[int]:
        return [int(s < self.threshold) for s in self.mean_score]


def blackbox_gan(
    rows: np.ndarray,
    labels: np.ndarray,
    classifier: MlpClassifier,
    ae: AnomalyAutoencoder,
    epochs: int = 100,
    n: int = 100,
    seed: int = 0,
    benign: int = 0,
    **gan_kw,
) -> tuple[GanCurve, GanPair]:
    """Train a GAN on the rows labelled benign and track both detectors per epoch.

    Per epoch, ``n`` samples from fixed noise are scored: classifier accuracy
    is the share not classified benign, and the anomaly curve is the mean
    reconstruction score against the detector threshold.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    pool = rows[np.asarray(labels) == benign]
    if len(pool) < 2:
        raise EmptyBenignPool(f"only {len(pool)} reconstructed rows carry the benign label")
    if ae.threshold is None:
        raise ValueError("anomaly detector has no calibrated threshold")
    gan = GanPair.create(rows.shape[1], seed, **{k: v for k, v in gan_kw.items() if k in ("noise_dim", "hidden")})
    train_kw = {k: v for k, v in gan_kw.items() if k in ("batch_size", "lr", "beta1")}

    def monitor(samples):
        return {
            "accuracy": float(np.mean(classify(classifier, samples).argmax(axis=1) != benign)),
            "mean_score": float(np.mean(anomaly_score(ae, samples))),
        }

    trained, history = gan_train(gan, pool, epochs, seed=seed, monitor=monitor, n_monitor=n, **train_kw)
    curve = GanCurve(
        [h.epoch for h in history],
        [h.metrics["accuracy"] for h in history],
        [h.metrics["mean_score"] for h in history],
        float(ae.threshold),
    )
    return curve, trained
