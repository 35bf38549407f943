"""Federated averaging over simulated clients.

Each round samples K clients with replacement by their weights, runs E local
steps per sampled client from the current global parameters, and replaces the
global parameters with the plain mean of the returned models. Randomness for
client k in round r comes from the generator seeded by (seed, r, k), so results
do not depend on the order in which clients are simulated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step
from .data import Dataset, PartitionPlan, Split, client_view, partition
from .defenses import Defense, NoDefense
from .models import MlpClassifier, accuracy, ce_loss, param_grads


class FlError(RuntimeError):
    pass


@dataclass
class FlConfig:
    n_clients: int = 10
    k: int = 10
    local_steps: int = 1
    rounds: int = 100
    local_bs: int = 64
    lr: float = 1e-2
    decay: float = 1.0
    decay_every: int = 20
    weights: list[float] | None = None
    optimizer: str = "adam"
    partition: str = "iid"
    norm: str = "client"
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not 1 <= self.k:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if len(w) != self.n_clients or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("client weights must be non-negative, one per client, summing to 1")

    def client_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n_clients, 1.0 / self.n_clients)
        return np.asarray(self.weights, dtype=np.float64)

    def lr_at(self, round_index: int) -> float:
        return self.lr * self.decay ** (round_index // self.decay_every)


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    lr: float
    loss: float
    accuracy: float | None
    seconds: float = 0.0


@dataclass
class TrainResult:
    model: MlpClassifier
    records: list[RoundRecord] = field(default_factory=list)
    plan: PartitionPlan | None = None

    @property
    def final_accuracy(self) -> float | None:
        scored = [r.accuracy for r in self.records if r.accuracy is not None]
        return scored[-1] if scored else None


def client_rng(seed: int, round_index: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client])


def sample_clients(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K client indices drawn with replacement according to ``weights``."""
    return rng.choice(len(weights), size=k, replace=True, p=weights)


def local_update(
    model: MlpClassifier,
    shard: Dataset,
    defense: Defense,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    optimizer: str = "adam",
) -> tuple[list[np.ndarray], float]:
    """Run ``steps`` local steps on one client and return (params, mean loss).

    Every step draws a batch, passes it through the defense's batch hook and
    descends on the gradient of the (possibly substituted) batch. Optimizer
    state starts fresh for each call.
    """
    if len(shard) == 0:
        raise FlError("client shard is empty")
    params = [p.copy() for p in model.params]
    state = AdamState.zeros_like(params)
    losses = []
    n = len(shard)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False) if batch_size < n else np.arange(n)
        current = model.with_params(params)
        xb, yb = defense.transform_batch(current, shard.X[idx], shard.Y[idx], rng)
        loss = ce_loss(current, xb, yb).item()
        if not np.isfinite(loss):
            raise FlError(f"non-finite local loss at step {step} (batch of {len(idx)} rows, lr={lr})")
        grads = defense.transform_gradient(param_grads(current, xb, yb), rng)
        if optimizer == "adam":
            params, state = adam_step(params, grads, state, lr)
        else:
            params = [p - lr * g for p, g in zip(params, grads)]
        losses.append(loss)
    return params, float(np.mean(losses))


def aggregate(models: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Parameter-wise mean of client models.

    Values are sorted along the client axis before summing, which makes the
    result exactly independent of client order.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    shapes = [np.shape(p) for p in models[0]]
    for m in models[1:]:
        if [np.shape(p) for p in m] != shapes:
            raise ValueError(f"architecture mismatch: {[np.shape(p) for p in m]} vs {shapes}")
    out = []
    for layer in range(len(shapes)):
        stack = np.sort(np.stack([m[layer] for m in models]), axis=0)
        out.append(stack.sum(axis=0) / len(models))
    return out


def train(
    cfg: FlConfig,
    split: Split,
    defense: Defense | None = None,
    model: MlpClassifier | None = None,
    model_seed: int | None = None,
    progress=None,
) -> TrainResult:
    """Full federated run. Test accuracy uses the raw test rows, undefended."""
    defense = defense or NoDefense()
    train_set = split.train
    if cfg.n_clients > len(train_set):
        raise FlError(f"{cfg.n_clients} clients exceed {len(train_set)} training rows")
    plan = partition(train_set, cfg.n_clients, cfg.partition, seed=cfg.seed)
    shards = [client_view(train_set, idx, cfg.norm) for idx in plan.clients]
    if model is None:
        seed = cfg.seed if model_seed is None else model_seed
        model = MlpClassifier.create(train_set.dim, train_set.n_classes, seed)
    weights = cfg.client_weights()
    records = []
    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        sampled = sample_clients(weights, cfg.k, np.random.default_rng([cfg.seed, r]))
        lr = cfg.lr_at(r)
        updates: dict[int, tuple[list[np.ndarray], float]] = {}
        for c in sorted(set(int(s) for s in sampled)):
            updates[c] = local_update(
                model, shards[c], defense, cfg.local_steps, lr, cfg.local_bs, client_rng(cfg.seed, r, c), cfg.optimizer
            )
        model = model.with_params(aggregate([updates[int(c)][0] for c in sampled]))
        loss = float(np.mean([updates[int(c)][1] for c in sampled]))
        acc = None
        if (r + 1) % cfg.eval_every == 0 or r == cfg.rounds - 1:
            acc = accuracy(model, split.test.X, split.test.Y)
        records.append(RoundRecord(r, [int(c) for c in sampled], lr, loss, acc, time.perf_counter() - t0))
        if progress is not None:
            progress(records[-1])
    return TrainResult(model, records, plan)


def train_centralized_reference(cfg: FlConfig, data: Dataset, model: MlpClassifier) -> MlpClassifier:
    """Single-party minibatch training with the same step schedule as ``train``.

    Round r performs ``local_steps`` steps drawing batches from the generator
    seeded by (seed, r, 0). Used to check that one client sampled every round
    reproduces ordinary training.
    """
    params = [p.copy() for p in model.params]
    n = len(data)
    for r in range(cfg.rounds):
        rng = client_rng(cfg.seed, r, 0)
        state = AdamState.zeros_like(params)
        lr = cfg.lr_at(r)
        for _ in range(cfg.local_steps):
            idx = rng.choice(n, size=cfg.local_bs, replace=False) if cfg.local_bs < n else np.arange(n)
            g = param_grads(model.with_params(params), data.X[idx], data.Y[idx])
            if cfg.optimizer == "adam":
                params, state = adam_step(params, g, state, lr)
            else:
                params = [p - lr * gi for p, gi in zip(params, g)]
    return model.with_params(params)


def write_rounds_csv(path, records: list[RoundRecord]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy", "loss", "lr"])
        for rec in records:
            w.writerow([rec.round, "" if rec.accuracy is None else repr(rec.accuracy), repr(rec.loss), repr(rec.lr)])
