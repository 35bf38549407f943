"""Tabular NIDS data: schema, ingestion, normalization, client partitioning.

All model-facing matrices live in the normalized space ``[0, 1]^dim``. The
schema carries each column's original range so rows can be mapped back and
discrete columns can be snapped to integers.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
DISCRETE = "discrete"


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = CONTINUOUS
    min: float | None = None
    max: float | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.min is not None and self.max is not None and self.max < self.min:
            raise ValueError(f"feature {self.name!r}: max {self.max} < min {self.min}")

    @property
    def fitted(self) -> bool:
        return self.min is not None and self.max is not None


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")

    @property
    def dim(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def discrete_mask(self) -> np.ndarray:
        return np.array([f.kind == DISCRETE for f in self.features], dtype=bool)

    @property
    def mins(self) -> np.ndarray:
        self._require_fitted()
        return np.array([f.min for f in self.features], dtype=np.float64)

    @property
    def maxs(self) -> np.ndarray:
        self._require_fitted()
        return np.array([f.max for f in self.features], dtype=np.float64)

    def _require_fitted(self):
        missing = [f.name for f in self.features if not f.fitted]
        if missing:
            raise ValueError(f"schema has no min/max for {missing[:5]}")

    def fit(self, raw: np.ndarray, only_missing: bool = True) -> "FeatureSchema":
        """Fill min/max from the columns of ``raw`` (original-space rows)."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.dim:
            raise ValueError(f"expected rows of width {self.dim}, got {raw.shape}")
        if len(raw) == 0:
            raise ValueError("cannot fit a schema on zero rows")
        lo, hi = raw.min(axis=0), raw.max(axis=0)
        feats = []
        for f, a, b in zip(self.features, lo, hi):
            if f.fitted and only_missing:
                feats.append(f)
            else:
                feats.append(replace(f, min=float(a), max=float(b)))
        return FeatureSchema(tuple(feats))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in self.features:
            sec = {"kind": f.kind}
            if f.min is not None:
                sec["min"] = repr(f.min)
            if f.max is not None:
                sec["max"] = repr(f.max)
            cp[f.name] = sec
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "FeatureSchema":
        """One section per column with ``kind`` and optional ``min``/``max``.

        A missing or ``auto`` bound is fitted later from training rows.
        """
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        feats = []
        for name in cp.sections():
            sec = cp[name]

            def bound(key):
                raw = sec.get(key, "auto").strip()
                return None if raw == "auto" else float(raw)

            feats.append(Feature(name, sec.get("kind", CONTINUOUS).strip(), bound("min"), bound("max")))
        return cls(tuple(feats))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_ini(Path(path).read_text())


def normalize(raw: np.ndarray, schema: FeatureSchema, clip: bool = True) -> np.ndarray:
    """Min/max map into [0, 1]. Constant columns map to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = schema.mins, schema.maxs
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (raw - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0) if clip else out


def project_to_original(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Inverse of :func:`normalize` (no clamping, no rounding)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != schema.dim:
        raise ValueError(f"row length {x.shape[-1]} does not match schema dim {schema.dim}")
    return schema.mins + x * (schema.maxs - schema.mins)


def canonicalize(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Clamp to [0, 1] and snap discrete columns to their integer grid."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    mask = schema.discrete_mask
    if not mask.any():
        return x
    lo, hi = schema.mins[mask], schema.maxs[mask]
    span = hi - lo
    orig = np.round(lo + x[..., mask] * span)
    snapped = np.where(span > 0, (orig - lo) / np.where(span > 0, span, 1.0), 0.0)
    out = x.copy()
    out[..., mask] = np.clip(snapped, 0.0, 1.0)
    return out


# -- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    schema: FeatureSchema
    classes: list[str]
    benign: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {len(self.X)} rows but Y has {len(self.Y)}")
        if self.X.ndim != 2 or self.X.shape[1] != self.schema.dim:
            raise ValueError(f"X shape {self.X.shape} does not match schema dim {self.schema.dim}")
        if self.Y.shape[1] != len(self.classes):
            raise ValueError(f"Y has {self.Y.shape[1]} columns for {len(self.classes)} classes")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> np.ndarray:
        return self.Y.argmax(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.Y[idx], self.schema, self.classes, self.benign)

    def with_rows(self, X: np.ndarray, Y: np.ndarray | None = None) -> "Dataset":
        return Dataset(X, self.Y if Y is None else Y, self.schema, self.classes, self.benign)

    def check(self) -> None:
        if not (np.all(self.X >= 0) and np.all(self.X <= 1)):
            raise ValueError("dataset rows leave [0, 1]")
        if not np.all((self.Y == 0) | (self.Y == 1)) or not np.all(self.Y.sum(axis=1) == 1):
            raise ValueError("dataset labels are not one-hot")


@dataclass
class Split:
    train: Dataset
    test: Dataset


def one_hot(labels: Sequence[int], n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def stratified_cap(labels: np.ndarray, cap: int | None, rng: np.random.Generator) -> np.ndarray:
    """Row indices keeping at most ``cap`` rows with class shares preserved."""
    n = len(labels)
    if cap is None or n <= cap:
        return np.arange(n)
    keep = []
    classes, counts = np.unique(labels, return_counts=True)
    quota = np.maximum(1, np.floor(counts * cap / n)).astype(int)
    for c, q in zip(classes, quota):
        rows = np.flatnonzero(labels == c)
        keep.append(rng.choice(rows, size=min(q, len(rows)), replace=False))
    return np.sort(np.concatenate(keep))


def split_rows(n: int, rng: np.random.Generator, test_fraction: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(n * (1.0 - test_fraction)))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def ingest_csv(
    path: str | Path,
    schema: FeatureSchema,
    label_column: str,
    classes: Sequence[str] | None = None,
    benign: str | None = None,
    seed: int = 0,
    test_fraction: float = 0.3,
    cap: int | None = 20_000,
) -> Split:
    """Read a labelled CSV, split 7:3 by seeded shuffle and normalize.

    Schema columns without bounds are fitted on the training split only; the
    test split reuses those bounds and is clamped to [0, 1].
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header row")
        missing = [c for c in [*schema.names, label_column] if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: columns {missing} not found in header")
        raw_rows, raw_labels = [], []
        for line_no, rec in enumerate(reader, start=2):
            try:
                raw_rows.append([float(rec[c]) for c in schema.names])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            raw_labels.append(rec[label_column].strip())
    raw = np.array(raw_rows, dtype=np.float64).reshape(-1, schema.dim)
    if not np.all(np.isfinite(raw)):
        raise ValueError(f"{path}: non-finite cell")

    if classes is None:
        classes = sorted(set(raw_labels))
        if benign is not None and benign in classes:
            classes.remove(benign)
            classes.insert(0, benign)
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(raw_labels) - set(index))
    if unknown:
        raise ValueError(f"{path}: unknown label values {unknown[:5]}")
    labels = np.array([index[c] for c in raw_labels], dtype=np.int64)

    disc = schema.discrete_mask
    if np.any(raw[:, disc] != np.round(raw[:, disc])):
        bad = [schema.names[j] for j in np.flatnonzero(disc) if np.any(raw[:, j] != np.round(raw[:, j]))]
        raise ValueError(f"{path}: discrete columns hold non-integer values: {bad}")

    rng = np.random.default_rng(seed)
    train_idx, test_idx = split_rows(len(raw), rng, test_fraction)
    train_idx = train_idx[stratified_cap(labels[train_idx], cap, rng)]
    fitted = schema.fit(raw[train_idx])
    constant = [f.name for f in fitted.features if f.max == f.min]
    if constant:
        log.warning("constant columns normalized to 0: %s", ", ".join(constant))
    bidx = index.get(benign, 0) if benign is not None else 0

    def build(idx):
        return Dataset(normalize(raw[idx], fitted), one_hot(labels[idx], len(classes)), fitted, classes, bidx)

    return Split(build(train_idx), build(test_idx))


def write_csv(path: str | Path, data: Dataset, label_column: str = "label") -> None:
    """Write rows in original units, discrete columns as integers."""
    raw = project_to_original(canonicalize(data.X, data.schema), data.schema)
    disc = data.schema.discrete_mask
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*data.schema.names, label_column])
        for row, lab in zip(raw, data.labels):
            cells = [str(int(round(v))) if d else repr(float(v)) for v, d in zip(row, disc)]
            w.writerow([*cells, data.classes[lab]])


# -- partitioning -------------------------------------------------------------


@dataclass
class PartitionPlan:
    clients: list[np.ndarray]
    mode: str
    p: int | None = None
    chosen_attacks: list[list[int]] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients])

    def weights(self) -> np.ndarray:
        sizes = self.sizes().astype(np.float64)
        return sizes / sizes.sum()

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "p": self.p,
                "chosen_attacks": self.chosen_attacks,
                "clients": [c.tolist() for c in self.clients],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        d = json.loads(text)
        return cls([np.array(c, dtype=np.int64) for c in d["clients"]], d["mode"], d["p"], d["chosen_attacks"])


def partition(
    data: Dataset,
    n_clients: int,
    mode: str = "iid",
    seed: int = 0,
    p: int | None = None,
) -> PartitionPlan:
    """Assign rows to clients.

    ``iid`` shuffles and cuts equal shards. ``non-iid`` deals every client an
    equal share of benign rows, then for each client picks ``p`` attack types
    and hands it that client's 1/N slice of each chosen type.
    """
    n = len(data)
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > n:
        raise ValueError(f"{n_clients} clients exceed {n} rows")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        shards = np.array_split(rng.permutation(n), n_clients)
        return PartitionPlan([np.sort(s) for s in shards], "iid")
    if mode != "non-iid":
        raise ValueError(f"unknown partition mode {mode!r}")

    labels = data.labels
    attack_types = [c for c in range(data.n_classes) if c != data.benign and np.any(labels == c)]
    if not attack_types:
        raise ValueError("non-iid partition needs at least one attack class")
    if p is None:
        p = math.ceil(len(attack_types) / 2)
    if not 1 <= p <= len(attack_types):
        raise ValueError(f"p={p} must lie in [1, {len(attack_types)}]")
    benign_shards = np.array_split(rng.permutation(np.flatnonzero(labels == data.benign)), n_clients)
    attack_shards = {c: np.array_split(rng.permutation(np.flatnonzero(labels == c)), n_clients) for c in attack_types}
    clients, chosen = [], []
    for k in range(n_clients):
        picks = sorted(int(c) for c in rng.choice(attack_types, size=p, replace=False))
        rows = [benign_shards[k], *(attack_shards[c][k] for c in picks)]
        clients.append(np.sort(np.concatenate(rows)))
        chosen.append(picks)
    return PartitionPlan(clients, "non-iid", p, chosen)


def client_view(data: Dataset, idx: np.ndarray, norm: str = "client") -> Dataset:
    """A client's shard, renormalized with its own min/max when ``norm='client'``."""
    shard = data.subset(idx)
    if norm == "global":
        return shard
    if norm != "client":
        raise ValueError(f"unknown normalization mode {norm!r}")
    raw = project_to_original(shard.X, data.schema)
    blank = FeatureSchema(tuple(replace(f, min=None, max=None) for f in data.schema.features))
    local = blank.fit(raw)
    return Dataset(normalize(raw, local), shard.Y, local, shard.classes, shard.benign)


# -- synthetic data -----------------------------------------------------------


def synth_dataset(
    dim: int,
    n_classes: int,
    rows: int,
    seed: int,
    sep: float = 3.0,
    sigma: float = 0.08,
    discrete: Iterable[int] = (),
    levels: int = 5,
) -> Dataset:
    """Gaussian class clusters clipped to [0, 1].

    Class centres differ by ``sep * sigma`` in every coordinate where their
    sign patterns differ; two classes always take opposite patterns.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    signs = [rng.choice([-1.0, 1.0], size=dim)]
    signs.append(-signs[0])
    tries = 0
    while len(signs) < n_classes:
        cand = rng.choice([-1.0, 1.0], size=dim)
        tries += 1
        if tries > 1000 or not any(np.array_equal(cand, s) for s in signs):
            signs.append(cand)
    centres = 0.5 + 0.5 * sep * sigma * np.array(signs)
    labels = np.arange(rows) % n_classes
    rng.shuffle(labels)
    X = np.clip(centres[labels] + sigma * rng.standard_normal((rows, dim)), 0.0, 1.0)
    disc = sorted(set(int(j) for j in discrete))
    feats = []
    for j in range(dim):
        if j in disc:
            feats.append(Feature(f"f{j}", DISCRETE, 0.0, float(levels - 1)))
        else:
            feats.append(Feature(f"f{j}", CONTINUOUS, 0.0, 1.0))
    schema = FeatureSchema(tuple(feats))
    X = canonicalize(X, schema)
    classes = ["benign", *(f"attack{k}" for k in range(1, n_classes))]
    return Dataset(X, one_hot(labels, n_classes), schema, classes, 0)


KDD99_FEATURES = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised",
    "root_shell", "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]  # fmt: skip

KDD99_CLASSES = [
    "normal", "smurf", "neptune", "back", "teardrop", "pod", "land", "satan", "ipsweep",
    "portsweep", "nmap", "warezclient", "guess_passwd", "warezmaster", "imap", "ftp_write",
    "multihop", "phf", "spy", "buffer_overflow", "rootkit", "loadmodule", "perl",
]  # fmt: skip

# integer domain sizes of the discrete KDD99 columns
KDD99_DISCRETE = {
    "protocol_type": 3,
    "service": 70,
    "flag": 11,
    "land": 2,
    "logged_in": 2,
    "root_shell": 2,
    "su_attempted": 3,
    "is_host_login": 2,
    "is_guest_login": 2,
}

# rough original-unit ranges for the continuous KDD99 columns
_KDD99_RANGES = {
    "duration": 58329.0,
    "src_bytes": 1_379_963.0,
    "dst_bytes": 1_309_937.0,
    "wrong_fragment": 3.0,
    "urgent": 3.0,
    "hot": 30.0,
    "num_failed_logins": 5.0,
    "num_compromised": 884.0,
    "num_root": 993.0,
    "num_file_creations": 28.0,
    "num_shells": 2.0,
    "num_access_files": 8.0,
    "num_outbound_cmds": 0.0,
    "count": 511.0,
    "srv_count": 511.0,
    "dst_host_count": 255.0,
    "dst_host_srv_count": 255.0,
}


def kdd99_schema() -> FeatureSchema:
    feats = []
    for name in KDD99_FEATURES:
        if name in KDD99_DISCRETE:
            feats.append(Feature(name, DISCRETE, 0.0, float(KDD99_DISCRETE[name] - 1)))
        else:
            feats.append(Feature(name, CONTINUOUS, 0.0, _KDD99_RANGES.get(name, 1.0)))
    return FeatureSchema(tuple(feats))


def kdd99_like(rows: int, seed: int, noise: float = 0.02, prototype_seed: int = 1999) -> Dataset:
    """Offline stand-in for KDD99: 41 named features, 23 imbalanced classes.

    A sparse benign prototype holds small, right-skewed values, like min-max
    normalised traffic counters. Each attack class rewrites 14 of its
    continuous columns and about a fifth of its discrete columns. Prototypes
    depend only on ``prototype_seed``, so separate draws share one world.
    """
    schema = kdd99_schema()
    n_cls = len(KDD99_CLASSES)
    proto_rng = np.random.default_rng(prototype_seed)
    disc = schema.discrete_mask
    levels = np.array([KDD99_DISCRETE.get(n, 0) for n in KDD99_FEATURES])
    zero_range = np.array([f.max == f.min for f in schema.features])
    movable = np.flatnonzero(~disc & ~zero_range)

    base_active = proto_rng.uniform(size=schema.dim) < 0.3
    base = np.where(base_active, proto_rng.beta(0.6, 5.0, size=schema.dim), 0.0)
    protos = np.tile(base, (n_cls, 1))
    active = np.tile(base_active, (n_cls, 1))
    for c in range(1, n_cls):
        cols = proto_rng.choice(movable, 14, replace=False)
        protos[c, cols] = proto_rng.beta(0.6, 5.0, size=len(cols))
        active[c, cols] = True
    dominant = np.zeros((n_cls, schema.dim))
    for j in np.flatnonzero(disc):
        values = proto_rng.integers(0, levels[j], size=n_cls) / (levels[j] - 1)
        dominant[:, j] = np.where(proto_rng.uniform(size=n_cls) < 0.2, values, values[0])
    protos[:, zero_range] = 0.0

    # class mix of the common 10% KDD99 training subset; the 20 rare classes share 1.8%
    prior = np.full(n_cls, 0.018 / (n_cls - 3))
    prior[:3] = [0.197, 0.568, 0.217]
    rng = np.random.default_rng(seed)
    labels = rng.choice(n_cls, size=rows, p=prior / prior.sum())
    X = protos[labels] + noise * rng.standard_normal((rows, schema.dim)) * active[labels]
    # discrete columns: dominant value, otherwise a uniform draw from the domain
    for j in np.flatnonzero(disc):
        keep = rng.uniform(size=rows) < 0.9
        other = rng.integers(0, levels[j], size=rows) / (levels[j] - 1)
        X[:, j] = np.where(keep, dominant[labels, j], other)
    X[:, zero_range] = 0.0
    X = canonicalize(np.clip(X, 0.0, 1.0), schema)
    return Dataset(X, one_hot(labels, n_cls), schema, list(KDD99_CLASSES), 0)


def load_dataset(name: str, rows: int, seed: int, **kw) -> Split:
    """Build a train/test split for a named built-in dataset."""
    if name == "kdd99":
        data = kdd99_like(rows, seed)
    elif name == "synth":
        data = synth_dataset(
            kw.get("dim", 8), kw.get("n_classes", 2), rows, seed, kw.get("sep", 3.0), discrete=kw.get("discrete", ())
        )
    else:
        raise ValueError(f"unknown dataset {name!r}")
    train_idx, test_idx = split_rows(len(data), np.random.default_rng([seed, 7]))
    return Split(data.subset(train_idx), data.subset(test_idx))
