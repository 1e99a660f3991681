"""CSV ingestion, run configuration and result serialization."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np

from .columns import InMemoryColumns, write_column_store
from .em import EmConfig, FitResult, IterationTrace
from .lasso import LassoConfig
from .model import Dataset
from .preprocessing import (
    TransformSpec,
    logratio_transform,
    prevalence_mask,
    rescale_minmax,
    zscore,
)
from .simulation import SimDesign, format_value

MISSING_TOKENS = {"", "na", "nan", "null", "none", "n/a", "."}


class InputError(ValueError):
    """Malformed input file or configuration."""


# ---------------------------------------------------------------------------
# configuration

LAYOUT_SCHEMA = {
    "type": "object",
    "properties": {
        "response": {"type": "string", "minLength": 1},
        "locked": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "putative": {"type": ["array", "null"], "items": {"type": "string"}, "uniqueItems": True},
        "exclude": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "intercept": {"type": "boolean"},
    },
    "required": ["response"],
    "additionalProperties": False,
}

TRANSFORM_SCHEMA = {
    "type": "object",
    "properties": {
        "mode": {"enum": ["none", "minmax_symmetric", "zscore", "logratio"]},
        "reference": {"type": ["integer", "string"]},
        "zero_replacement": {"type": "number", "exclusiveMinimum": 0},
        "min_prevalence": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}

EM_SCHEMA = {
    "type": "object",
    "properties": {
        "max_iter": {"type": "integer", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "null_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "delta": {"type": "number", "minimum": 0},
        "strategy": {"enum": ["posterior_threshold", "greedy", "weighted"]},
        "seed": {"type": "integer", "minimum": 0},
        "correlation_mode": {"enum": ["guard", "shrink", "off"]},
        "correlation_cutoff": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "init_p": {"type": "array", "items": {"type": "number", "minimum": 0},
                   "minItems": 3, "maxItems": 3},
        "init_beta": {"type": ["array", "null"], "items": {"type": "number"}},
        "init_mu": {"type": ["number", "null"]},
        "init_sigma2": {"type": ["number", "null"], "minimum": 0},
        "init_sigma2_e": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "profile_mean": {"type": "boolean"},
        "gain_includes_prior": {"type": "boolean"},
        "n_threads": {"type": "integer", "minimum": 1},
        "block_size": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

LASSO_SCHEMA = {
    "type": "object",
    "properties": {
        "n_lambda": {"type": "integer", "minimum": 1},
        "lambda_min_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "folds": {"type": "integer", "minimum": 2},
        "repeats": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_sweeps": {"type": "integer", "minimum": 1},
        "n_threads": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

SIM_SCHEMA = {
    "type": "object",
    "properties": {
        "n": {"type": "integer", "minimum": 2},
        "k_total": {"type": "integer", "minimum": 1},
        "groups": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 1}}},
        "target_corr": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "noise_var": {"type": "number", "minimum": 0},
        "truth": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "dropped": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "replicates": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "run_lasso": {"type": "boolean"},
        "max_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "data": {"type": "string"},
        "layout": LAYOUT_SCHEMA,
        "transform": TRANSFORM_SCHEMA,
        "em": EM_SCHEMA,
        "lasso": LASSO_SCHEMA,
        "simulation": SIM_SCHEMA,
        "restarts": {"type": "integer", "minimum": 1},
        "column_store": {"type": ["string", "null"]},
        "output": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}


def validate_config(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from None
    return doc


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    return validate_config(doc)


def merge(base: dict, overrides: dict) -> dict:
    """Shallow-per-section merge; ``None`` override values are ignored."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            section = out.setdefault(key, {})
            section.update({k: v for k, v in value.items() if v is not None})
        else:
            out[key] = value
    return out


def _build(cls, section: dict | None):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise InputError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for key in ("init_p", "groups", "truth", "dropped"):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(tuple(v) if isinstance(v, list) else v for v in section[key])
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{cls.__name__}: {exc}") from None


def em_config_from(doc: dict) -> EmConfig:
    return _build(EmConfig, doc.get("em"))


def lasso_config_from(doc: dict) -> LassoConfig:
    return _build(LassoConfig, doc.get("lasso"))


def sim_design_from(doc: dict) -> SimDesign:
    return _build(SimDesign, doc.get("simulation"))


def config_echo(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
    return out


def threads_from_env(default: int = 1) -> int:
    value = os.environ.get("EBSEL_THREADS")
    if not value:
        return default
    try:
        n = int(value)
    except ValueError:
        raise InputError(f"EBSEL_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise InputError(f"EBSEL_THREADS must be a positive integer, got {value!r}")
    return n


# ---------------------------------------------------------------------------
# CSV


@dataclass
class Table:
    names: list[str]
    values: np.ndarray  # rows x columns

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def columns(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.values[:, idx] if idx else np.empty((self.values.shape[0], 0))


def read_table(path) -> Table:
    """Numeric CSV with a header row. Every cell must be a finite number."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    with fh:
        try:
            rows = list(csv.reader(fh))
        except (UnicodeDecodeError, csv.Error) as exc:
            raise InputError(f"{path}: unreadable CSV ({exc})") from None
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    seen: dict[str, int] = {}
    for j, name in enumerate(header):
        if not name:
            raise InputError(f"{path}: empty column name at header column {j + 1}")
        if name in seen:
            raise InputError(f"{path}: duplicate column name {name!r} at header columns "
                             f"{seen[name] + 1} and {j + 1}")
        seen[name] = j
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise InputError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise InputError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            text = cell.strip()
            where = f"{path}: line {line} (row {i + 1}), column {j + 1} ({header[j]!r})"
            if text.lower() in MISSING_TOKENS:
                raise InputError(f"{where}: missing value {cell!r}")
            try:
                v = float(text)
            except ValueError:
                raise InputError(f"{where}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise InputError(f"{where}: non-finite value {cell!r}")
            values[i, j] = v
    return Table(header, values)


def write_table(path, names, columns) -> None:
    """Write columns with 17 significant digits so values round-trip."""
    M = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns]) if columns else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        if M is not None:
            for row in M:
                w.writerow([f"{v:.17g}" for v in row])


def resolve_reference(ref, names: list[str]) -> int:
    """'last', a column name or an integer index (negative counts from the end)."""
    if ref is None or ref == "last":
        return len(names) - 1
    if isinstance(ref, str):
        if ref in names:
            return names.index(ref)
        try:
            ref = int(ref)
        except ValueError:
            raise InputError(f"reference column {ref!r} not found") from None
    if not -len(names) <= ref < len(names):
        raise InputError(f"reference column {ref} out of range")
    return ref % len(names)


def apply_transform(M: np.ndarray, names: list[str], transform: dict | None
                    ) -> tuple[np.ndarray, list[str], TransformSpec]:
    """Prevalence filter, then the configured transform, on a block of columns."""
    transform = transform or {}
    mode = transform.get("mode", "none")
    prev = transform.get("min_prevalence")
    if prev is not None:
        keep = prevalence_mask(M, prev)
        if mode == "logratio":
            ref = resolve_reference(transform.get("reference", "last"), names)
            keep[ref] = True
            ref_name = names[ref]
        M = M[:, keep]
        names = [n for n, k in zip(names, keep) if k]
        if mode == "logratio":
            transform = dict(transform, reference=ref_name)
    if mode == "none":
        return M, names, TransformSpec("none", np.zeros(M.shape[1]), np.ones(M.shape[1]),
                                       np.zeros(M.shape[1], dtype=bool))
    if mode == "minmax_symmetric":
        out, spec = rescale_minmax(M)
        return out, names, spec
    if mode == "zscore":
        out, spec = zscore(M)
        return out, names, spec
    ref = resolve_reference(transform.get("reference", "last"), names)
    try:
        out, spec = logratio_transform(M, ref, transform.get("zero_replacement", 0.5))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return out, [n for j, n in enumerate(names) if j != ref], spec


@dataclass
class Ingested:
    data: Dataset
    transform: TransformSpec
    putative_names: list[str]


def ingest_csv(path, layout: dict, transform: dict | None = None,
               column_store=None) -> Ingested:
    """Load a CSV into a :class:`Dataset` according to ``layout``.

    ``layout`` names the response, the locked-in columns, and optionally the
    putative columns (default: every remaining column). An intercept column
    is prepended to the locked-in design unless ``intercept`` is false.
    With ``column_store`` the putative block is written to that file stem
    and read back column by column.
    """
    try:
        jsonschema.validate(layout, LAYOUT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InputError(f"layout error: {exc.message}") from None
    table = read_table(path)
    names = table.names
    response = layout["response"]
    locked = list(layout.get("locked", []))
    exclude = set(layout.get("exclude", []))
    for name in [response, *locked, *exclude, *(layout.get("putative") or [])]:
        if name not in names:
            raise InputError(f"{path}: layout column {name!r} not in header")
    if response in locked:
        raise InputError("the response cannot also be locked in")
    putative = layout.get("putative")
    if putative is None:
        putative = [n for n in names if n != response and n not in locked and n not in exclude]
    overlap = set(putative) & ({response} | set(locked))
    if overlap:
        raise InputError(f"columns listed as both putative and response/locked: {sorted(overlap)}")
    if not putative:
        raise InputError("no putative columns")

    y = table.column(response)
    X = table.columns(locked)
    x_names = list(locked)
    if layout.get("intercept", True):
        X = np.column_stack([np.ones(len(y)), X])
        x_names = ["intercept", *x_names]
    Zm, znames, spec = apply_transform(table.columns(putative), list(putative), transform)
    if column_store is not None:
        source = write_column_store(Zm, column_store, znames)
    else:
        source = InMemoryColumns(Zm, znames)
    try:
        data = Dataset(y, X, source, y_name=response, x_names=x_names)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return Ingested(data, spec, znames)


# ---------------------------------------------------------------------------
# results


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values and
    non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def fit_document(result: FitResult, trace: IterationTrace, refit, config: dict, seed: int,
                 data: Dataset, extra: dict | None = None) -> dict:
    """The result document written by ``fit``."""
    doc = {
        "seed": seed,
        "params": result.params.to_dict(),
        "selected": [c.to_dict() for c in result.selected],
        "refit": refit.to_dict(),
        "trace": trace.summary() | {"converged": result.converged},
        "loglik": result.loglik,
        "config": config,
        "data": {"n": data.N, "j": data.J, "k": data.K, "response": data.y_name,
                 "locked": data.x_names},
    }
    if extra:
        doc.update(extra)
    return _clean(doc)


def dumps(doc: dict) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc: dict) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def write_posteriors(path, result: FitResult, names: list[str]) -> None:
    P = result.posteriors
    selected = {c.index for c in result.selected}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "name", "p_neg", "p_null", "p_pos", "gamma", "selected"])
        for k, name in enumerate(names):
            w.writerow([k, name, format_value(float(P[k, 0])), format_value(float(P[k, 1])),
                        format_value(float(P[k, 2])), int(result.gamma[k]),
                        "true" if k in selected else "false"])
