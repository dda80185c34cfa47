"""Dataset, config and report serialization."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .model import GroupedDataset
from .resampling import AuxiliaryLaw, Cases, CasesMode, HccmeForm, Parametric, Residual, Wild
from .study import SETTINGS, CoverageReport, Scenario

__version__ = "0.1.0"

FLAT_COLUMNS = ("scenario", "n", "J", "scheme", "parameter", "coverage", "avg_length", "failures")


@dataclass(frozen=True)
class Schema:
    """Column roles in a delimited dataset file.

    ``intercept=True`` prepends a column of ones to both designs.
    """

    group: str
    response: str
    fixed: tuple = ()
    random: tuple = ()
    intercept: bool = True

    @classmethod
    def from_mapping(cls, m: dict) -> "Schema":
        allowed = {"group", "response", "fixed", "random", "intercept"}
        unknown = sorted(set(m) - allowed)
        if unknown:
            raise ValidationError(f"unknown schema keys: {', '.join(unknown)}")
        missing = [k for k in ("group", "response") if k not in m]
        if missing:
            raise ValidationError(f"schema is missing: {', '.join(missing)}")
        return cls(m["group"], m["response"], tuple(m.get("fixed", ())), tuple(m.get("random", ())),
                   bool(m.get("intercept", True)))

    @classmethod
    def parse(cls, text_or_path) -> "Schema":
        """Accepts a path to a JSON file or an inline JSON object."""
        s = str(text_or_path)
        if not s.lstrip().startswith("{"):
            try:
                s = Path(s).read_text()
            except OSError as exc:
                raise ValidationError(f"cannot read schema {text_or_path}: {exc}") from exc
        try:
            return cls.from_mapping(json.loads(s))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"schema is not valid JSON: {exc}") from exc


def load_dataset(path, schema: Schema) -> GroupedDataset:
    """Read a comma-separated file with a header row into a GroupedDataset.

    Groups appear in order of first appearance. Errors name the data row
    (1-based, header excluded) and column.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValidationError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        needed = [schema.group, schema.response, *schema.fixed, *schema.random]
        missing = [c for c in dict.fromkeys(needed) if c not in header]
        if missing:
            raise ValidationError(f"missing column(s): {', '.join(repr(c) for c in missing)}")
        col = {h: i for i, h in enumerate(header)}
        numeric = list(dict.fromkeys([schema.response, *schema.fixed, *schema.random]))
        order, rows = {}, {}
        for r, line in enumerate(reader, start=1):
            if not line or all(not c.strip() for c in line):
                continue
            if len(line) != len(header):
                raise ValidationError(f"row {r}: expected {len(header)} fields, found {len(line)}")
            vals = {}
            for name in numeric:
                cell = line[col[name]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(f"row {r}, column {name!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"row {r}, column {name!r}: non-finite value {cell!r}")
                vals[name] = v
            g = line[col[schema.group]].strip()
            if g == "":
                raise ValidationError(f"row {r}, column {schema.group!r}: empty group id")
            order.setdefault(g, len(order))
            rows.setdefault(g, []).append(vals)
    if not rows:
        raise ValidationError(f"{path} has no data rows")
    y, X, Z, sizes = [], [], [], []
    for g in order:
        for v in rows[g]:
            y.append(v[schema.response])
            X.append(([1.0] if schema.intercept else []) + [v[c] for c in schema.fixed])
            Z.append(([1.0] if schema.intercept else []) + [v[c] for c in schema.random])
        sizes.append(len(rows[g]))
    if not X[0] or not Z[0]:
        raise ValidationError("schema defines an empty fixed or random design")
    return GroupedDataset(np.array(y), np.array(X), np.array(Z), sizes, list(order))


def save_dataset(ds: GroupedDataset, path) -> Schema:
    """Write every design column explicitly; returns the schema to read it back."""
    xs = [f"x{i}" for i in range(ds.k)]
    zs = [f"z{i}" for i in range(ds.q)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "y", *xs, *zs])
        for j, s in enumerate(ds.group_slices()):
            for i in range(s.start, s.stop):
                w.writerow([ds.group_ids[j], repr(float(ds.y[i])),
                            *(repr(float(v)) for v in ds.X[i]), *(repr(float(v)) for v in ds.Z[i])])
    return Schema("group", "y", tuple(xs), tuple(zs), intercept=False)


# -- schemes ------------------------------------------------------------------

_CASES_MODES = {"both": CasesMode.BOTH_LEVELS, "level2": CasesMode.LEVEL2_ONLY, "level1": CasesMode.LEVEL1_ONLY}
_AUX = {"f1": AuxiliaryLaw.F1_MAMMEN, "f2": AuxiliaryLaw.F2_RADEMACHER}
_HCCME = {"hc2": HccmeForm.HC2, "hc3": HccmeForm.HC3}


def make_scheme(name: str, cases_mode="both", hccme="hc2", aux="f1"):
    name = str(name).lower()
    try:
        if name == "parametric":
            return Parametric()
        if name == "residual":
            return Residual()
        if name == "cases":
            return Cases(_CASES_MODES[str(cases_mode).lower().replace("-only", "")])
        if name == "wild":
            return Wild(_HCCME[str(hccme).lower()], _AUX[str(aux).lower()])
    except KeyError as exc:
        raise ValidationError(f"unknown option value {exc.args[0]!r} for scheme {name!r}") from None
    raise ValidationError(f"unknown scheme {name!r}")


def scheme_from_config(item):
    if isinstance(item, str):
        return make_scheme(item)
    if isinstance(item, dict):
        unknown = sorted(set(item) - {"type", "cases_mode", "hccme", "aux"})
        if unknown:
            raise ValidationError(f"unknown scheme keys: {', '.join(unknown)}")
        if "type" not in item:
            raise ValidationError("scheme entry needs a 'type'")
        return make_scheme(item["type"], item.get("cases_mode", "both"), item.get("hccme", "hc2"), item.get("aux", "f1"))
    raise ValidationError(f"cannot interpret scheme entry {item!r}")


# -- study configs ------------------------------------------------------------

_SCENARIO_KEYS = {"name", "error_law", "heteroscedastic", "settings", "truth", "reps", "B", "alpha", "schemes"}
_TOP_KEYS = {"scenarios", "reps", "B", "alpha"}


def load_config(path, seed: int, *, full_scale: bool = False, reps=None, B=None) -> list[Scenario]:
    """Expand a JSON study config into one Scenario per (scenario, setting).

    ``full_scale`` forces reps=500 and B=999; explicit ``reps``/``B`` override both.
    """
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(cfg) - _TOP_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    if "scenarios" not in cfg or not cfg["scenarios"]:
        raise ValidationError("config needs a non-empty 'scenarios' list")
    out = []
    for i, sc in enumerate(cfg["scenarios"]):
        unknown = sorted(set(sc) - _SCENARIO_KEYS)
        if unknown:
            raise ValidationError(f"scenario {i}: unknown keys: {', '.join(unknown)}")
        settings = sc.get("settings", [list(s) for s in SETTINGS])
        n_reps = sc.get("reps", cfg.get("reps", 200))
        n_B = sc.get("B", cfg.get("B", 399))
        if full_scale:
            n_reps, n_B = 500, 999
        n_reps = reps if reps is not None else n_reps
        n_B = B if B is not None else n_B
        schemes = tuple(scheme_from_config(s) for s in sc.get("schemes", ["parametric", "residual", "cases", "wild"]))
        for st in settings:
            n, J = (st["n"], st["J"]) if isinstance(st, dict) else st
            kwargs = dict(
                name=sc.get("name", f"scenario{i + 1}"),
                error_law=sc.get("error_law", "gaussian"),
                heteroscedastic=bool(sc.get("heteroscedastic", False)),
                n=int(n), J=int(J), reps=int(n_reps), B=int(n_B),
                alpha=float(sc.get("alpha", cfg.get("alpha", 0.05))),
                master_seed=int(seed), schemes=schemes,
            )
            if "truth" in sc:
                kwargs["truth"] = tuple(sc["truth"])
            try:
                out.append(Scenario(**kwargs))
            except ValueError as exc:
                raise ValidationError(f"scenario {i}: {exc}") from exc
    return out


# -- reports ------------------------------------------------------------------

def _num(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else format(x, ".10g")


def flat_rows(report: CoverageReport):
    sc = report.scenario
    for c in report.cells:
        yield [sc.name, sc.n, sc.J, c.scheme, c.parameter, _num(c.coverage), _num(c.avg_length), c.failures]


def write_flat(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLAT_COLUMNS)
        for rep in reports:
            for row in flat_rows(rep):
                w.writerow(row)


def read_flat(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(report: CoverageReport, manifest_ref: str | None = None) -> str:
    """Rows are parameters, columns schemes; cells read ``coverage (avg length)``."""
    sc = report.scenario
    schemes = report.scheme_labels
    params = list(dict.fromkeys(c.parameter for c in report.cells))
    lines = []
    if manifest_ref:
        lines.append(f"# manifest: {manifest_ref}")
    lines.append(f"# {sc.name}: error_law={sc.error_law.value} heteroscedastic={sc.heteroscedastic} "
                 f"n={sc.n} J={sc.J} N={sc.n * sc.J} reps={sc.reps} B={sc.B} alpha={sc.alpha}")
    cells = [["parameter", *schemes]]
    for p in params:
        row = [p]
        for s in schemes:
            c = report.cell(s, p)
            row.append(f"{c.coverage:.1f} ({c.avg_length:.3f})")
        cells.append(row)
    cells.append(["failures", *[str(report.cell(s, params[0]).failures) for s in schemes]])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    for r in cells:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict:
    """Inverse of ``format_table`` for the cell values: {(scheme, param): (coverage, length)}."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    schemes = rows[0][1:]
    out = {}
    for r in rows[1:]:
        if r[0] == "failures":
            continue
        vals = r[1:]
        for i, s in enumerate(schemes):
            cov, length = vals[2 * i], vals[2 * i + 1].strip("()")
            out[(s, r[0])] = (float(cov), float(length))
    return out


def format_intervals(summary) -> str:
    cells = [["parameter", "lower", "upper", "mean", "sd"]]
    for iv, m, s in zip(summary.intervals, summary.mean, summary.std):
        cells.append([iv.parameter, f"{iv.lower:.6f}", f"{iv.upper:.6f}", f"{m:.6f}", f"{s:.6f}"])
    widths = [max(len(r[i]) for r in cells) for i in range(5)]
    return "\n".join(
        "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in cells
    ) + "\n"


def write_intervals(summary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "lower", "upper", "alpha", "B", "mean", "sd"])
        for iv, m, s in zip(summary.intervals, summary.mean, summary.std):
            w.writerow([iv.parameter, repr(iv.lower), repr(iv.upper), iv.alpha, iv.B, repr(float(m)), repr(float(s))])


# -- manifest -----------------------------------------------------------------

@dataclass
class RunManifest:
    command: list
    config_hash: str
    master_seed: int | None
    tool_version: str = __version__
    duration_seconds: float = 0.0
    failures: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def config_hash(*parts) -> str:
    """SHA-256 over the given strings and file contents (paths that exist are read)."""
    h = hashlib.sha256()
    for p in parts:
        if p is None:
            continue
        if isinstance(p, (str, os.PathLike)) and Path(p).is_file():
            h.update(Path(p).read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()
