"""Experiment reports and their on-disk form.

A report is a set of named tables with fixed columns, a JSON-able summary,
a list of invariant checks and the config echo. Exports are deterministic:
the same report always produces the same bytes. Wall-clock timings are kept
in a separate file because they differ between otherwise identical runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__


@dataclass
class Table:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown columns {sorted(unknown)}; table has {self.columns}")
        self.rows.append(row)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentReport:
    name: str
    kind: str
    config: dict
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def table(self, name: str, columns: list[str]) -> Table:
        if name not in self.tables:
            self.tables[name] = Table(list(columns))
        return self.tables[name]

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "version": self.version,
            "config": self.config,
            "summary": self.summary,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "tables": {k: {"columns": t.columns, "rows": t.rows} for k, t in self.tables.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        rep = cls(data["name"], data["kind"], data["config"], summary=data.get("summary", {}), version=data.get("version", ""))
        rep.checks = [Check(**c) for c in data.get("checks", [])]
        rep.tables = {k: Table(t["columns"], t["rows"]) for k, t in data.get("tables", {}).items()}
        return rep


def _cell(value) -> str:
    if hasattr(value, "item") and callable(value.item):
        value = value.item()
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_cell(row.get(c)) for c in table.columns])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):
        return _jsonable(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def export(report: ExperimentReport, out_dir: str | Path, formats: tuple[str, ...] = ("csv", "json")) -> list[Path]:
    """Write one CSV per table plus ``summary.json`` and ``report.json``.

    Timings go to ``timings.json``, which is outside the deterministic set.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if "csv" in formats:
        for name in sorted(report.tables):
            path = out / f"{name}.csv"
            path.write_text(table_csv(report.tables[name]))
            written.append(path)
    if "json" in formats:
        summary = {
            "name": report.name,
            "kind": report.kind,
            "version": report.version,
            "ok": report.ok,
            "summary": report.summary,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in report.checks],
        }
        for fname, payload in (("summary.json", summary), ("report.json", report.to_dict())):
            path = out / fname
            path.write_text(dumps(payload))
            written.append(path)
    if report.timings:
        (out / "timings.json").write_text(dumps(report.timings))
    return written


def load_report(path: str | Path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ExperimentReport.from_dict(json.loads(path.read_text()))
