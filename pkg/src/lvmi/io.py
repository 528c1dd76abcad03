"""File formats: CSV data, JSON model specs and parameter files.

Data CSVs have a header row and use ``NA`` for missing cells.  A JSON model
file declares which columns are responses (with their kinds), which are
covariates and which holds the sampling weights, e.g.::

    {"variables": [{"name": "income", "kind": "continuous"},
                   {"name": "owns_car", "kind": "binary"},
                   {"name": "trust", "kind": "ordinal", "categories": 5}],
     "K1": 2, "K2": 1, "ignorable": false,
     "covariates": ["age"], "weight": "w"}
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import Kind, ModelError, ModelSpec, Psi, VariableSpec

MISSING = "NA"
UNDEFINED = "UNDEF"
PSI_SCHEMA_VERSION = 1


def fmt(v: float) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(v), ".17g")


def spec_to_dict(spec: ModelSpec, names=None) -> dict:
    names = names or [f"y{j + 1}" for j in range(spec.J)]
    variables = []
    for var, name in zip(spec.variables, names):
        d = {"name": name, "kind": var.kind.value}
        if var.kind is Kind.ORDINAL:
            d["categories"] = var.n_categories
        variables.append(d)
    return {"variables": variables, "K1": spec.K1, "K2": spec.K2, "p": spec.p,
            "ignorable": spec.ignorable}


def spec_from_dict(doc: dict, p: int | None = None) -> ModelSpec:
    try:
        variables = tuple(
            VariableSpec(j, Kind(v["kind"]), v.get("categories"))
            for j, v in enumerate(doc["variables"])
        )
        if p is None:
            p = int(doc.get("p", len(doc.get("covariates", []))))
        return ModelSpec(variables, K1=int(doc["K1"]), K2=int(doc.get("K2", 0)), p=p,
                         ignorable=bool(doc.get("ignorable", True)))
    except KeyError as e:
        raise ModelError(f"model file is missing field {e.args[0]!r}") from None
    except ValueError as e:
        raise ModelError(f"invalid model file: {e}") from None


def load_model_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: invalid JSON ({e})") from None
    if "variables" not in doc:
        raise ModelError(f"{path}: model file needs a 'variables' list")
    return doc


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ModelError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ModelError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    return header, body


def _column(path, header, body, name, allow_missing: bool) -> np.ndarray:
    if name not in header:
        raise ModelError(f"{path}: column {name!r} declared in the model file is not in the header")
    c = header.index(name)
    out = np.empty(len(body))
    for i, row in enumerate(body):
        cell = row[c].strip()
        if cell == UNDEFINED:
            raise ModelError(
                f"{path}: line {i + 2}, column {name!r} is {UNDEFINED}; not-applicable cells "
                "cannot be imputed, drop or recode them first"
            )
        if cell == MISSING:
            if not allow_missing:
                raise ModelError(f"{path}: line {i + 2}, column {name!r} may not be missing")
            out[i] = np.nan
            continue
        try:
            out[i] = float(cell)
        except ValueError:
            raise ModelError(
                f"{path}: line {i + 2}, column {name!r}: cannot parse {cell!r} as a number"
            ) from None
        if not np.isfinite(out[i]):
            raise ModelError(f"{path}: line {i + 2}, column {name!r}: non-finite value")
    return out


def read_dataset(path, model_doc: dict) -> Dataset:
    """Read the response, covariate and weight columns named in ``model_doc``."""
    header, body = read_table(path)
    names = [v["name"] for v in model_doc["variables"]]
    y = np.column_stack([_column(path, header, body, n, True) for n in names]) if body else \
        np.zeros((0, len(names)))
    covs = model_doc.get("covariates", [])
    x = np.column_stack([_column(path, header, body, n, False) for n in covs]) if covs else None
    wname = model_doc.get("weight")
    w = _column(path, header, body, wname, False) if wname else None
    return Dataset(y, x, w, tuple(names))


def write_matrix_csv(path, columns, values, integer: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in np.asarray(values):
            w.writerow([str(int(v)) if integer else fmt(v) for v in row])


def write_rows_csv(path, header, rows) -> None:
    """Write dict rows; floats get round-trip formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r[h]) if isinstance(r[h], (float, np.floating)) else r[h]
                        for h in header])


def psi_to_dict(psi: Psi, names=None) -> dict:
    lay = psi.spec.layout
    return {
        "schema": "lvmi.psi",
        "schema_version": PSI_SCHEMA_VERSION,
        "spec": spec_to_dict(psi.spec, names),
        "parameters": lay.names,
        "values": [fmt(v) for v in psi.values],
    }


def save_psi(path, psi: Psi, names=None) -> None:
    Path(path).write_text(json.dumps(psi_to_dict(psi, names), indent=1))


def load_psi(path) -> Psi:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "lvmi.psi":
        raise ModelError(f"{path} is not a parameter file")
    spec = spec_from_dict(doc["spec"])
    if list(doc["parameters"]) != list(spec.layout.names):
        raise ModelError(f"{path}: parameter names do not match the model layout")
    return Psi(spec, np.array([float(v) for v in doc["values"]]))
