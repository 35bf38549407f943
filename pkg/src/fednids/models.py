"""MLP classifier, autoencoder anomaly detector and GAN pair.

Parameters are stored as a flat list ``[W0, b0, W1, b1, ...]`` of float64
arrays with ``W`` shaped ``(out, in)``; a dense layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    Adam,
    Tensor,
    as_tensor,
    grad,
    log_softmax,
    mean,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    tsum,
)
from .autodiff.tensor import ShapeError

CHECKPOINT_MAGIC = b"FEDNIDS-CKPT"
CHECKPOINT_VERSION = 1


def init_params(dims: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform(-1/sqrt(in), 1/sqrt(in)) for every weight and bias."""
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        params.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return params


def param_count(dims: Sequence[int]) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def dense_forward(params: Sequence, x, hidden: str = "relu", output: str | None = None) -> Tensor:
    """Run a stack of dense layers. ``params`` may be arrays or Tensors."""
    h = as_tensor(x)
    n_layers = len(params) // 2
    for k in range(n_layers):
        W, b = as_tensor(params[2 * k]), as_tensor(params[2 * k + 1])
        if h.shape[-1] != W.shape[1]:
            raise ShapeError("dense", h.shape, W.shape)
        h = h @ W.T + b
        if k < n_layers - 1:
            h = relu(h) if hidden == "relu" else sigmoid(h)
    if output == "sigmoid":
        h = sigmoid(h)
    return h


def cross_entropy(logits: Tensor, y) -> Tensor:
    """-sum_ij y_ij log softmax(z_i)_j / batch. Soft or unnormalized ``y`` allowed."""
    y = as_tensor(y)
    if y.shape != logits.shape:
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    return -tsum(y * log_softmax(logits, axis=1)) / float(logits.shape[0])


@dataclass
class MlpClassifier:
    dims: list[int]
    params: list[np.ndarray]
    seed: int | None = None

    @classmethod
    def create(cls, dim: int, n_classes: int, seed: int) -> "MlpClassifier":
        """The NIDS architecture: layer widths [dim, 2*dim, 3*dim, n]."""
        return cls.from_dims([dim, 2 * dim, 3 * dim, n_classes], seed)

    @classmethod
    def from_dims(cls, dims: Sequence[int], seed: int) -> "MlpClassifier":
        dims = [int(d) for d in dims]
        return cls(dims, init_params(dims, np.random.default_rng(seed)), seed)

    @property
    def dim(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpClassifier":
        return MlpClassifier(list(self.dims), [np.array(p, dtype=np.float64) for p in params], self.seed)

    def copy(self) -> "MlpClassifier":
        return self.with_params(self.params)

    def logits(self, x, params: Sequence | None = None) -> Tensor:
        return dense_forward(self.params if params is None else params, x)


def _check_dim(model, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dims[0]:
        raise ShapeError("classify", x.shape, (x.shape[0], model.dims[0]))
    return x


def classify(model: MlpClassifier, x) -> np.ndarray:
    """Class probabilities, one row per input row."""
    x = _check_dim(model, x)
    with no_grad():
        return softmax(model.logits(x), axis=1).data


def predict(model: MlpClassifier, x) -> np.ndarray:
    return classify(model, x).argmax(axis=1)


def accuracy(model: MlpClassifier, x, y) -> float:
    y = np.asarray(y)
    labels = y.argmax(axis=1) if y.ndim == 2 else y
    return float(np.mean(predict(model, x) == labels))


def ce_loss(model: MlpClassifier, x, y, params: Sequence | None = None) -> Tensor:
    return cross_entropy(model.logits(x, params), y)


def param_tensors(params: Sequence[np.ndarray]) -> list[Tensor]:
    return [Tensor(p, requires_grad=True) for p in params]


def param_grads(
    model: MlpClassifier, x, y, create_graph: bool = False
) -> list:
    """Gradient of the cross-entropy w.r.t. every parameter.

    Returns numpy arrays, or Tensors that stay differentiable w.r.t. ``x``/``y``
    when ``create_graph`` is set.
    """
    theta = param_tensors(model.params)
    loss = ce_loss(model, x, y, theta)
    gs = grad(loss, theta, create_graph=create_graph)
    return gs if create_graph else [g.data for g in gs]


def train_centralized(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
) -> MlpClassifier:
    """Plain Adam minibatch training, used for reference runs and fixtures."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            g = param_grads(model.with_params(opt.params), x[idx], y[idx])
            opt.step(g)
    return model.with_params(opt.params)


# -- anomaly detector ---------------------------------------------------------


@dataclass
class AnomalyAutoencoder:
    """Single autoencoder scored by reconstruction RMSE."""

    dims: list[int]
    params: list[np.ndarray]
    threshold: float | None = None
    seed: int | None = None

    @classmethod
    def create(cls, dim: int, seed: int) -> "AnomalyAutoencoder":
        dims = [dim, max(1, dim // 2), dim]
        return cls(dims, init_params(dims, np.random.default_rng(seed)), None, seed)

    @property
    def dim(self) -> int:
        return self.dims[0]

    def reconstruct(self, x, params: Sequence | None = None) -> Tensor:
        return dense_forward(self.params if params is None else params, x)

    def score_tensor(self, x, params: Sequence | None = None) -> Tensor:
        x = as_tensor(x)
        diff = x - self.reconstruct(x, params)
        return sqrt(mean(diff * diff, axis=1))


def anomaly_score(ae: AnomalyAutoencoder, x) -> np.ndarray:
    """Per-row RMSE between input and reconstruction."""
    x = _check_dim(ae, x)
    with no_grad():
        return ae.score_tensor(x).data


def train_autoencoder(
    ae: AnomalyAutoencoder,
    benign: np.ndarray,
    epochs: int = 50,
    lr: float = 1e-2,
    batch_size: int = 128,
    seed: int = 0,
) -> AnomalyAutoencoder:
    benign = np.asarray(benign, dtype=np.float64)
    if len(benign) == 0:
        raise ValueError("autoencoder needs a non-empty benign set")
    rng = np.random.default_rng(seed)
    opt = Adam(ae.params, lr)
    for _ in range(epochs):
        order = rng.permutation(len(benign))
        for start in range(0, len(benign), batch_size):
            xb = benign[order[start : start + batch_size]]
            theta = [Tensor(p, requires_grad=True) for p in opt.params]
            diff = Tensor(xb) - dense_forward(theta, xb)
            loss = mean(diff * diff)
            opt.step([g.data for g in grad(loss, theta)])
    return AnomalyAutoencoder(list(ae.dims), opt.params, ae.threshold, ae.seed)


def calibrate_threshold(ae: AnomalyAutoencoder, benign: np.ndarray, quantile: float = 0.99) -> float:
    """Set ``ae.threshold`` to the given quantile of benign scores and return it."""
    benign = np.asarray(benign, dtype=np.float64)
    if benign.size == 0:
        raise ValueError("cannot calibrate a threshold on an empty benign set")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must lie in [0, 1], got {quantile}")
    ae.threshold = float(np.quantile(anomaly_score(ae, benign), quantile))
    return ae.threshold


# -- GAN ----------------------------------------------------------------------


@dataclass
class GanPair:
    generator: list[np.ndarray]
    discriminator: list[np.ndarray]
    dim: int
    noise_dim: int = 64
    hidden: tuple[int, ...] = (128, 128)
    seed: int | None = None

    @classmethod
    def create(cls, dim: int, seed: int, noise_dim: int = 64, hidden=(128, 128)) -> "GanPair":
        rng = np.random.default_rng(seed)
        g = init_params([noise_dim, *hidden, dim], rng)
        d = init_params([dim, *hidden, 1], rng)
        return cls(g, d, dim, noise_dim, tuple(hidden), seed)

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.noise_dim))

    def generate(self, z: np.ndarray, params: Sequence | None = None) -> Tensor:
        return dense_forward(self.generator if params is None else params, z, output="sigmoid")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        with no_grad():
            return self.generate(self.noise(n, rng)).data

    def disc_logit(self, x, params: Sequence | None = None) -> Tensor:
        return dense_forward(self.discriminator if params is None else params, x)


@dataclass
class GanEpoch:
    epoch: int
    d_loss: float
    g_loss: float
    metrics: dict = field(default_factory=dict)


def gan_train(
    gan: GanPair,
    benign: np.ndarray,
    epochs: int,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 2e-3,
    beta1: float = 0.5,
    monitor: Callable[[np.ndarray], dict] | None = None,
    n_monitor: int = 100,
) -> tuple[GanPair, list[GanEpoch]]:
    """Alternate one discriminator and one generator update per minibatch.

    The generator uses the non-saturating loss -log D(G(z)). When ``monitor`` is
    given it is called after every epoch with ``n_monitor`` samples generated
    from a fixed noise batch, and its dict is stored in the epoch record.
    """
    benign = np.asarray(benign, dtype=np.float64)
    if len(benign) < 2:
        raise ValueError("GAN training needs at least 2 benign samples")
    if benign.shape[1] != gan.dim:
        raise ShapeError("gan_train", benign.shape, (len(benign), gan.dim))
    rng = np.random.default_rng(seed)
    fixed_noise = gan.noise(n_monitor, np.random.default_rng([seed, 1]))
    g_opt = Adam(gan.generator, lr, beta1=beta1)
    d_opt = Adam(gan.discriminator, lr, beta1=beta1)
    history: list[GanEpoch] = []
    current = gan
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(benign))
        d_losses, g_losses = [], []
        for start in range(0, len(benign), batch_size):
            real = benign[order[start : start + batch_size]]
            n = len(real)
            z = gan.noise(n, rng)
            # discriminator: -log D(real) - log(1 - D(fake))
            with no_grad():
                fake = gan.generate(z, g_opt.params).data
            d_theta = [Tensor(p, requires_grad=True) for p in d_opt.params]
            d_real = gan.disc_logit(real, d_theta)
            d_fake = gan.disc_logit(fake, d_theta)
            d_loss = mean(softplus(-d_real)) + mean(softplus(d_fake))
            d_opt.step([g.data for g in grad(d_loss, d_theta)])
            # generator: -log D(G(z))
            g_theta = [Tensor(p, requires_grad=True) for p in g_opt.params]
            logits = gan.disc_logit(gan.generate(gan.noise(n, rng), g_theta), d_opt.params)
            g_loss = mean(softplus(-logits))
            g_opt.step([g.data for g in grad(g_loss, g_theta)])
            d_losses.append(d_loss.item())
            g_losses.append(g_loss.item())
        current = GanPair(g_opt.params, d_opt.params, gan.dim, gan.noise_dim, gan.hidden, gan.seed)
        metrics = {}
        if monitor is not None:
            with no_grad():
                metrics = dict(monitor(current.generate(fixed_noise).data))
        history.append(GanEpoch(epoch, float(np.mean(d_losses)), float(np.mean(g_losses)), metrics))
    return current, history


# -- checkpoints --------------------------------------------------------------


def _flatten(params: Sequence[np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in params])


def save_checkpoint(path: str | Path, model) -> None:
    """Write a JSON header line followed by the raw little-endian float64 parameters."""
    if isinstance(model, MlpClassifier):
        header = {"kind": "mlp", "dims": model.dims, "seed": model.seed}
        arrays = model.params
    elif isinstance(model, AnomalyAutoencoder):
        header = {"kind": "autoencoder", "dims": model.dims, "seed": model.seed, "threshold": model.threshold}
        arrays = model.params
    elif isinstance(model, GanPair):
        header = {
            "kind": "gan",
            "dim": model.dim,
            "noise_dim": model.noise_dim,
            "hidden": list(model.hidden),
            "seed": model.seed,
        }
        arrays = [*model.generator, *model.discriminator]
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header["version"] = CHECKPOINT_VERSION
    header["shapes"] = [list(np.shape(a)) for a in arrays]
    flat = _flatten(arrays).astype("<f8")
    header["n_values"] = int(flat.size)
    blob = CHECKPOINT_MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(blob + flat.tobytes())


def load_checkpoint(path: str | Path):
    raw = Path(path).read_bytes()
    magic, header_line, payload = raw.split(b"\n", 2)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header = json.loads(header_line)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if flat.size != header["n_values"]:
        raise ValueError(f"{path}: expected {header['n_values']} values, found {flat.size}")
    arrays, pos = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        arrays.append(flat[pos : pos + n].reshape(shape).copy())
        pos += n
    kind = header["kind"]
    if kind == "mlp":
        return MlpClassifier(header["dims"], arrays, header["seed"])
    if kind == "autoencoder":
        return AnomalyAutoencoder(header["dims"], arrays, header["threshold"], header["seed"])
    if kind == "gan":
        n_gen = 2 * (len(header["hidden"]) + 1)
        return GanPair(
            arrays[:n_gen],
            arrays[n_gen:],
            header["dim"],
            header["noise_dim"],
            tuple(header["hidden"]),
            header["seed"],
        )
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
