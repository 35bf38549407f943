"""Experiment configuration files.

Configs are sectioned INI files. ``[experiment]`` names the run and its data,
``[fl]`` holds the federated schedule, each ``[defense.<label>]`` section adds
one defense to compare, and ``[privacy]`` / ``[evasion]`` tune the attack side.
A ``[full]`` section lists overrides, as ``section.key = value``, that apply
only when the run is launched at paper scale.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fl import FlConfig

KINDS = ("train", "privacy", "evasion")
DATASETS = ("kdd99", "synth")
ATTACKS = ("fgsm", "pgd", "cw", "deepfool", "autopgd")
DETECTORS = ("classifier", "anomaly")


class ConfigError(ValueError):
    """Raised with every problem found, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid experiment config:\n  " + "\n  ".join(problems))


@dataclass
class DatasetSpec:
    name: str = "synth"
    rows: int = 2000
    path: str | None = None
    schema: str | None = None
    label_column: str = "label"
    benign: str | None = None
    dim: int = 8
    n_classes: int = 2


@dataclass
class PrivacySpec:
    stage: str = "early"
    probes: int = 100
    metric: str = "l2"
    steps: int = 300
    lr: float = 0.1
    restarts: int = 3
    checkpoint: str | None = None


@dataclass
class EvasionSpec:
    attacks: list[str] = field(default_factory=lambda: ["fgsm", "pgd", "cw"])
    detectors: list[str] = field(default_factory=lambda: list(DETECTORS))
    eps: list[float] = field(default_factory=lambda: [40.0])
    alpha: float = 6.0
    steps: int = 100
    c: list[float] = field(default_factory=lambda: [0.01])
    probes: int = 100
    whitebox: bool = True
    blackbox: bool = False
    gan_epochs: int = 100
    gan_samples: int = 100
    target_epochs: int = 5
    detector_epochs: int = 30


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    dataset: DatasetSpec
    fl: dict
    defenses: dict[str, dict]
    seeds: list[int]
    out: str
    privacy: PrivacySpec = field(default_factory=PrivacySpec)
    evasion: EvasionSpec = field(default_factory=EvasionSpec)
    source: str | None = None

    def fl_config(self, seed: int) -> FlConfig:
        return FlConfig(**{**self.fl, "seed": seed})

    def echo(self) -> dict:
        """Plain-data view of the config for reports."""
        return {
            "name": self.name,
            "kind": self.kind,
            "dataset": vars(self.dataset).copy(),
            "fl": dict(self.fl),
            "defenses": {k: dict(v) for k, v in self.defenses.items()},
            "seeds": list(self.seeds),
            "privacy": vars(self.privacy).copy(),
            "evasion": {k: (list(v) if isinstance(v, list) else v) for k, v in vars(self.evasion).items()},
        }


def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, list):
        item = like[0] if like else ""
        return [_coerce(p, item) for p in raw.split(",") if p.strip()]
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if raw.lower() in ("", "none"):
        return None
    return raw


def _number(raw: str):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _fill(obj, section, problems: list[str], prefix: str):
    known = {f.name: f for f in fields(obj)}
    for key, raw in section.items():
        if key not in known:
            problems.append(f"[{prefix}] unknown key {key!r}")
            continue
        current = getattr(obj, key)
        like = current if current is not None else ""
        try:
            setattr(obj, key, _coerce(raw, like))
        except ValueError as exc:
            problems.append(f"[{prefix}] {key}: {exc}")


FL_KEYS = {f.name for f in fields(FlConfig)} - {"seed", "weights"}


def parse_config(text: str, full: bool = False, source: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    problems: list[str] = []

    if full and parser.has_section("full"):
        for dotted, value in parser["full"].items():
            sec, _, key = dotted.partition(".")
            if not key:
                problems.append(f"[full] override {dotted!r} must look like section.key")
                continue
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser[sec][key] = value

    if not parser.has_section("experiment"):
        raise ConfigError(["missing [experiment] section"])
    exp = parser["experiment"]
    name = exp.get("name", "experiment")
    kind = exp.get("kind", "")
    seeds_raw = exp.get("seeds", "0")
    try:
        seeds = [int(s) for s in seeds_raw.split(",") if s.strip()]
    except ValueError:
        seeds = []
        problems.append(f"[experiment] seeds must be integers, got {seeds_raw!r}")
    out = exp.get("out", f"runs/{name}")

    dataset = DatasetSpec()
    ds_keys = {k: v for k, v in exp.items() if k not in ("name", "kind", "seeds", "out")}
    if "dataset" in ds_keys:
        ds_keys["name"] = ds_keys.pop("dataset")
    _fill(dataset, ds_keys, problems, "experiment")

    fl: dict = {}
    if parser.has_section("fl"):
        for key, raw in parser["fl"].items():
            if key not in FL_KEYS:
                problems.append(f"[fl] unknown key {key!r}")
                continue
            fl[key] = _number(raw)

    defenses: dict[str, dict] = {}
    for sec in parser.sections():
        if sec.startswith("defense."):
            label = sec.split(".", 1)[1]
            spec = {k: _number(v) for k, v in parser[sec].items()}
            spec.setdefault("kind", label)
            defenses[label] = spec
    if not defenses:
        defenses["none"] = {"kind": "none"}

    privacy = PrivacySpec()
    if parser.has_section("privacy"):
        _fill(privacy, parser["privacy"], problems, "privacy")
    evasion = EvasionSpec()
    if parser.has_section("evasion"):
        _fill(evasion, parser["evasion"], problems, "evasion")

    for sec in parser.sections():
        if sec not in ("experiment", "fl", "privacy", "evasion", "full") and not sec.startswith("defense."):
            problems.append(f"unknown section [{sec}]")

    base = Path(source).parent if source else None
    # relative paths are taken from the config file's directory unless they exist as given
    for obj, attr in ((dataset, "path"), (dataset, "schema"), (privacy, "checkpoint")):
        if getattr(obj, attr):
            setattr(obj, attr, str(_resolve(getattr(obj, attr), base)))
    cfg = ExperimentConfig(name, kind, dataset, fl, defenses, seeds, out, privacy, evasion, source)
    problems.extend(validate(cfg, base=base))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig, base: Path | None = None) -> list[str]:
    """Every problem with ``cfg``; empty when it is runnable."""
    from .defenses import make_defense

    problems = []
    if cfg.kind not in KINDS:
        problems.append(f"[experiment] kind must be one of {KINDS}, got {cfg.kind!r}")
    if not cfg.seeds:
        problems.append("[experiment] seeds must list at least one seed")
    ds = cfg.dataset
    if ds.path:
        if not _resolve(ds.path, base).exists():
            problems.append(f"[experiment] dataset path {ds.path!r} does not exist")
    elif ds.name not in DATASETS:
        problems.append(f"[experiment] dataset must be one of {DATASETS} or a path, got {ds.name!r}")
    if ds.schema and not _resolve(ds.schema, base).exists():
        problems.append(f"[experiment] schema {ds.schema!r} does not exist")
    if ds.rows < 10:
        problems.append(f"[experiment] rows must be >= 10, got {ds.rows}")
    try:
        FlConfig(**cfg.fl)
    except (TypeError, ValueError) as exc:
        problems.append(f"[fl] {exc}")
    for label, spec in cfg.defenses.items():
        try:
            make_defense(spec)
        except (TypeError, ValueError) as exc:
            problems.append(f"[defense.{label}] {exc}")
    pv = cfg.privacy
    if pv.stage not in ("early", "late"):
        problems.append(f"[privacy] stage must be early or late, got {pv.stage!r}")
    if cfg.kind == "privacy" and pv.stage == "late":
        if not pv.checkpoint:
            problems.append("[privacy] late stage needs a checkpoint")
        elif not _resolve(pv.checkpoint, base).exists():
            problems.append(f"[privacy] checkpoint {pv.checkpoint!r} does not exist")
    if pv.metric not in ("l2", "cosine"):
        problems.append(f"[privacy] metric must be l2 or cosine, got {pv.metric!r}")
    if pv.probes < 1 or pv.steps < 1 or pv.restarts < 1:
        problems.append("[privacy] probes, steps and restarts must be >= 1")
    ev = cfg.evasion
    for a in ev.attacks:
        if a not in ATTACKS:
            problems.append(f"[evasion] unknown attack {a!r}")
    for d in ev.detectors:
        if d not in DETECTORS:
            problems.append(f"[evasion] unknown detector {d!r}")
    if any(e < 0 for e in ev.eps):
        problems.append("[evasion] eps values must be >= 0")
    if any(c <= 0 for c in ev.c):
        problems.append("[evasion] c values must be > 0")
    if ev.steps < 1 or ev.probes < 1:
        problems.append("[evasion] steps and probes must be >= 1")
    return problems


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    if p.is_absolute() or base is None or p.exists():
        return p
    return base / p


def load_config(path: str | Path, full: bool = False) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {str(path)!r} does not exist"])
    return parse_config(path.read_text(), full=full, source=str(path))
