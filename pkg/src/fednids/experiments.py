"""Batch experiments: federated training, leakage probes and evasion grids.

Each run walks (defense x seed) cells and fills an ExperimentReport. Every
random draw comes from a generator keyed on (seed, stream, index), so a cell's
numbers do not depend on which other cells ran.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fl
from .adversarial import AttackConfig, EmptyBenignPool, as_target, blackbox_gan, run_attack
from .config import ExperimentConfig
from .data import FeatureSchema, Split, ingest_csv, load_dataset
from .defenses import FedDef, FedDefResult, feddef_transform, make_defense
from .metrics import DistanceBound, label_accuracy, privacy_score, distance_bound_check
from .models import (
    AnomalyAutoencoder,
    MlpClassifier,
    calibrate_threshold,
    load_checkpoint,
    param_grads,
    save_checkpoint,
    train_autoencoder,
    train_centralized,
)
from .reconstruction import InversionConfig, LeakedUpdate, Reconstruction, ReconstructionError, reconstruct
from .report import ExperimentReport

log = logging.getLogger(__name__)

# generator streams, one per kind of draw
PROBE_ROWS, PROBE_CELL, ATTACK_CELL = 11, 13, 17


def load_split(cfg: ExperimentConfig, seed: int) -> Split:
    ds = cfg.dataset
    if ds.path:
        if not ds.schema:
            raise ValueError("a CSV dataset needs a schema file")
        return ingest_csv(ds.path, FeatureSchema.load(ds.schema), ds.label_column, benign=ds.benign, seed=seed, cap=ds.rows)
    if ds.name == "kdd99":
        return load_dataset("kdd99", ds.rows, seed)
    return load_dataset("synth", ds.rows, seed, dim=ds.dim, n_classes=ds.n_classes)


def _timed(report: ExperimentReport, key: str):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            report.timings[key] = report.timings.get(key, 0.0) + time.perf_counter() - self.t0

    return _Timer()


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# -- training -----------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentReport:
    """Federated training for every (defense, seed); mean and sd of final accuracy."""
    rep = ExperimentReport(cfg.name, "train", cfg.echo())
    rounds = rep.table("rounds", ["defense", "seed", "round", "accuracy", "loss", "lr"])
    finals = rep.table("accuracy", ["defense", "seed", "accuracy"])
    summary = rep.table("accuracy_summary", ["defense", "n_seeds", "mean", "sd"])
    for label, spec in cfg.defenses.items():
        accs = []
        for seed in cfg.seeds:
            split = load_split(cfg, seed)
            log.info("train %s seed %d", label, seed)
            with _timed(rep, f"train/{label}"):
                res = fl.train(cfg.fl_config(seed), split, make_defense(spec))
            for r in res.records:
                rounds.add(defense=label, seed=seed, round=r.round, accuracy=r.accuracy, loss=r.loss, lr=r.lr)
            acc = res.final_accuracy
            accs.append(acc)
            finals.add(defense=label, seed=seed, accuracy=acc)
            rep.check(f"accuracy-range/{label}/{seed}", acc is not None and 0.0 <= acc <= 1.0, f"{acc}")
            rep.check(f"finite-loss/{label}/{seed}", all(np.isfinite(r.loss) for r in res.records))
            if out is not None:
                Path(out).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(out) / f"model-{label}-seed{seed}.ckpt", res.model)
        mean, sd = _mean_sd(accs)
        summary.add(defense=label, n_seeds=len(accs), mean=mean, sd=sd)
        rep.summary[label] = {"mean_accuracy": mean, "sd_accuracy": sd, "per_seed": accs}
    return rep


# -- leakage probes -----------------------------------------------------------


@dataclass
class Probe:
    row: int
    x: np.ndarray
    y: np.ndarray
    rec: Reconstruction | None
    score: float
    error: str = ""
    pseudo: FedDefResult | None = None
    first_layer: tuple | None = None


def inversion_config(cfg: ExperimentConfig) -> InversionConfig:
    pv = cfg.privacy
    return InversionConfig(metric=pv.metric, steps=pv.steps, lr=pv.lr, restarts=pv.restarts)


def probe_rows(model: MlpClassifier, data, defense, n: int, seed: int, inv: InversionConfig) -> list[Probe]:
    """Share one batch-1 gradient per sampled row and attack it.

    The global model is frozen across probes; nothing is ever applied to it.
    """
    pick = np.random.default_rng([seed, PROBE_ROWS]).choice(len(data), size=min(n, len(data)), replace=False)
    probes = []
    for i, r in enumerate(pick):
        rng = np.random.default_rng([seed, PROBE_CELL, i])
        x, y = data.X[r : r + 1], data.Y[r : r + 1]
        pseudo = None
        if isinstance(defense, FedDef):
            pseudo = feddef_transform(model, x, y, defense.config, rng)
            xb, yb = pseudo.x, pseudo.y
        else:
            xb, yb = defense.transform_batch(model, x, y, rng)
        shared = defense.transform_gradient(param_grads(model, xb, yb), rng)
        first = None
        if pseudo is not None:
            true = param_grads(model, x, y)
            first = (true[0], true[1], shared[0], shared[1])
        try:
            rec = reconstruct(model, LeakedUpdate(shared, 1), inv, rng, data.schema)
        except ReconstructionError as exc:
            probes.append(Probe(int(r), x, y, None, float("nan"), str(exc), pseudo, first))
            continue
        score = float(privacy_score(x, rec.x, data.schema)[0])
        probes.append(Probe(int(r), x, y, rec, score, "", pseudo, first))
    return probes


def distance_bounds(probes: list[Probe]) -> list[DistanceBound]:
    """Lower-bound checks for FedDef probes, with M the largest bias-gradient norm seen in the run."""
    with_pseudo = [p for p in probes if p.first_layer is not None]
    if not with_pseudo:
        return []
    M = max(max(np.linalg.norm(p.first_layer[1]), np.linalg.norm(p.first_layer[3])) for p in with_pseudo)
    return [
        distance_bound_check(p.x, p.pseudo.x, *p.first_layer, M=max(M, 1e-300), unit_ball=False) for p in with_pseudo
    ]


def run_privacy(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentReport:
    """Leakage of single-row gradients under each defense, early or late stage."""
    rep = ExperimentReport(cfg.name, "privacy", cfg.echo())
    per_probe = rep.table(
        "privacy_probes",
        ["defense", "seed", "probe", "row", "method", "score", "label_true", "label_rec", "objective", "error"],
    )
    cells = rep.table("privacy", ["defense", "seed", "n", "failures", "mean_score", "label_accuracy"])
    bounds = rep.table("distance_bound", ["defense", "seed", "probe", "lower", "general_lower", "measured", "M", "holds"])
    inv = inversion_config(cfg)
    for seed in cfg.seeds:
        data = load_split(cfg, seed).train
        if cfg.privacy.stage == "late":
            model = load_checkpoint(cfg.privacy.checkpoint)
            if not isinstance(model, MlpClassifier) or model.dim != data.dim:
                raise ValueError(f"checkpoint {cfg.privacy.checkpoint} does not fit the dataset")
        else:
            model = MlpClassifier.create(data.dim, data.n_classes, seed)
        means = {}
        for label, spec in cfg.defenses.items():
            log.info("privacy %s seed %d", label, seed)
            with _timed(rep, f"privacy/{label}"):
                probes = probe_rows(model, data, make_defense(spec), cfg.privacy.probes, seed, inv)
            ok = [p for p in probes if p.rec is not None]
            for i, p in enumerate(probes):
                per_probe.add(
                    defense=label,
                    seed=seed,
                    probe=i,
                    row=p.row,
                    method=p.rec.method if p.rec else "failed",
                    score=p.score,
                    label_true=int(p.y.argmax()),
                    label_rec=int(p.rec.labels[0]) if p.rec else None,
                    objective=p.rec.objective if p.rec else None,
                    error=p.error,
                )
            mean = float(np.mean([p.score for p in ok])) if ok else float("nan")
            lab = label_accuracy([int(p.rec.labels[0]) for p in ok], [int(p.y.argmax()) for p in ok]) if ok else float("nan")
            means[label] = mean
            cells.add(defense=label, seed=seed, n=len(probes), failures=len(probes) - len(ok), mean_score=mean, label_accuracy=lab)
            rep.check(f"score-range/{label}/{seed}", all(0.0 <= p.score <= 1.0 for p in ok))
            checks = distance_bounds(probes)
            for i, b in enumerate(checks):
                bounds.add(
                    defense=label, seed=seed, probe=i, lower=b.lower, general_lower=b.general_lower,
                    measured=b.measured, M=b.M, holds=b.holds,
                )
            if checks:
                held = sum(b.holds for b in checks)
                rep.check(f"distance-bound/{label}/{seed}", held == len(checks), f"{held}/{len(checks)} held")
        kinds = {label: cfg.defenses[label].get("kind") for label in means}
        for a, ka in kinds.items():
            for b, kb in kinds.items():
                if ka in ("none", "dp") and kb == "feddef":
                    rep.check(f"below-feddef/{a}<{b}/{seed}", means[a] < means[b], f"{means[a]:.4g} vs {means[b]:.4g}")
    _summarise(rep, "privacy", ["mean_score", "label_accuracy"])
    return rep


def _summarise(rep: ExperimentReport, table: str, columns: list[str]):
    by_defense: dict[str, dict[str, list]] = {}
    for row in rep.tables[table].rows:
        slot = by_defense.setdefault(row["defense"], {c: [] for c in columns})
        for c in columns:
            slot[c].append(row[c])
    for label, cols in by_defense.items():
        entry = rep.summary.setdefault(label, {})
        for c, vals in cols.items():
            mean, sd = _mean_sd(vals)
            entry[c] = {"mean": mean, "sd": sd, "per_seed": vals}


# -- evasion ------------------------------------------------------------------


def _attack_grid(cfg: ExperimentConfig):
    ev = cfg.evasion
    for attack in ev.attacks:
        if attack == "cw":
            for c in ev.c:
                yield attack, None, c
        else:
            for eps in ev.eps:
                yield attack, eps, None


def run_evasion(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentReport:
    """Reconstruct a pool per defense, then attack both detectors with it."""
    ev = cfg.evasion
    rep = ExperimentReport(cfg.name, "evasion", cfg.echo())
    grid = rep.table(
        "evasion",
        ["defense", "seed", "attack", "detector", "eps", "c", "n", "evasion_rate", "accuracy", "mean_score", "mean_l2", "status"],
    )
    pools = rep.table("pool", ["defense", "seed", "probes", "failures", "malicious", "benign"])
    gan_curve = rep.table("gan_curve", ["defense", "seed", "epoch", "accuracy", "mean_score", "threshold"])
    gan_cells = rep.table(
        "gan", ["defense", "seed", "status", "final_accuracy", "min_accuracy", "final_mean_score", "min_mean_score", "threshold"]
    )
    inv = inversion_config(cfg)
    for seed in cfg.seeds:
        data = load_split(cfg, seed).train
        benign_rows = data.X[data.labels == data.benign]
        with _timed(rep, "evasion/detectors"):
            target = train_centralized(
                MlpClassifier.create(data.dim, data.n_classes, seed), data.X, data.Y, epochs=ev.target_epochs, seed=seed
            )
            ae = train_autoencoder(AnomalyAutoencoder.create(data.dim, seed), benign_rows, epochs=ev.detector_epochs, seed=seed)
            calibrate_threshold(ae, benign_rows)
        probe_model = MlpClassifier.create(data.dim, data.n_classes, seed)
        detectors = {"classifier": as_target(target, data.benign), "anomaly": as_target(ae)}
        for label, spec in cfg.defenses.items():
            log.info("evasion %s seed %d", label, seed)
            with _timed(rep, f"evasion/probes/{label}"):
                probes = probe_rows(probe_model, data, make_defense(spec), ev.probes, seed, inv)
            ok = [p for p in probes if p.rec is not None]
            rows = np.concatenate([p.rec.x for p in ok]) if ok else np.zeros((0, data.dim))
            labels = np.concatenate([p.rec.labels for p in ok]) if ok else np.zeros(0, dtype=int)
            malicious = rows[labels != data.benign]
            pools.add(
                defense=label, seed=seed, probes=len(probes), failures=len(probes) - len(ok),
                malicious=len(malicious), benign=int(np.sum(labels == data.benign)),
            )
            if ev.whitebox:
                with _timed(rep, f"evasion/whitebox/{label}"):
                    _whitebox(rep, grid, cfg, label, seed, malicious, detectors)
            if ev.blackbox:
                with _timed(rep, f"evasion/blackbox/{label}"):
                    _blackbox(gan_curve, gan_cells, cfg, label, seed, rows, labels, target, ae, data.benign)
    _summarise_evasion(rep)
    return rep


def _whitebox(rep, grid, cfg, label, seed, malicious, detectors):
    ev = cfg.evasion
    for gi, (attack, eps, c) in enumerate(_attack_grid(cfg)):
        for detector in ev.detectors:
            if detector == "anomaly" and attack in ("deepfool", "autopgd"):
                continue
            base = dict(defense=label, seed=seed, attack=attack, detector=detector, eps=eps, c=c)
            if len(malicious) == 0:
                grid.add(**base, n=0, evasion_rate=0.0, accuracy=None, mean_score=None, mean_l2=None, status="empty malicious pool")
                continue
            acfg = AttackConfig(
                kind=attack,
                eps=(eps if eps is not None else ev.eps[0]) / 255,
                alpha=ev.alpha / 255,
                steps=ev.steps,
                c=c if c is not None else ev.c[0],
            )
            rng = np.random.default_rng([seed, ATTACK_CELL, gi])
            r = run_attack(detectors[detector], malicious, acfg, rng)
            grid.add(
                **base, n=r.n, evasion_rate=r.evasion_rate, accuracy=r.accuracy,
                mean_score=r.mean_score, mean_l2=float(np.mean(r.l2)), status="ok",
            )
            tag = f"{label}/{seed}/{attack}/{detector}/{eps if eps is not None else c}"
            in_box = bool(np.all((r.rows >= 0) & (r.rows <= 1)))
            in_budget = attack == "cw" or bool(np.all(r.linf <= acfg.eps + 1e-12))
            rep.check(f"budget/{tag}", in_box and in_budget)
            if detector == "classifier":
                rep.check(f"er-accounting/{tag}", r.evasion_rate + r.accuracy == 1.0)
            else:
                below = int(np.sum(r.score < r.threshold))
                rep.check(f"er-accounting/{tag}", r.evasion_rate == below / r.n)


def _blackbox(curve_table, cells, cfg, label, seed, rows, labels, target, ae, benign):
    ev = cfg.evasion
    base = dict(defense=label, seed=seed)
    try:
        curve, _ = blackbox_gan(rows, labels, target, ae, epochs=ev.gan_epochs, n=ev.gan_samples, seed=seed, benign=benign)
    except EmptyBenignPool as exc:
        cells.add(**base, status=f"no benign reconstructions ({exc})", threshold=ae.threshold)
        return
    for e, a, s in zip(curve.epochs, curve.accuracy, curve.mean_score):
        curve_table.add(**base, epoch=e, accuracy=a, mean_score=s, threshold=curve.threshold)
    cells.add(
        **base, status="ok", final_accuracy=curve.accuracy[-1], min_accuracy=min(curve.accuracy),
        final_mean_score=curve.mean_score[-1], min_mean_score=min(curve.mean_score), threshold=curve.threshold,
    )


def _summarise_evasion(rep: ExperimentReport):
    cells: dict[tuple, list[float]] = {}
    for row in rep.tables["evasion"].rows:
        key = (row["defense"], row["attack"], row["detector"], row["eps"], row["c"])
        cells.setdefault(key, []).append(row["evasion_rate"])
    for (defense, attack, detector, eps, c), vals in cells.items():
        grid_key = f"eps={eps:g}" if eps is not None else f"c={c:g}"
        mean, sd = _mean_sd(vals)
        rep.summary.setdefault(defense, {}).setdefault(detector, {}).setdefault(attack, {})[grid_key] = {
            "mean_evasion_rate": mean,
            "sd": sd,
        }


RUNNERS = {"train": run_train, "privacy": run_privacy, "evasion": run_evasion}
