"""Case files: canonical JSON documents, MATPOWER import, bundled networks."""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .errors import CaseError, ParseError, SchemaError, UnsupportedFeature
from .network import Bus, GridCase, Line

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_DYNAMICS = {"inertia": 0.1, "damping": 0.05, "alpha": 1.0, "alpha_load": 0.01}
UNLIMITED = 1e4  # pu, stands in for MATPOWER's rateA = 0

_BUS_FIELDS = [f.name for f in fields(Bus)]
_POWER_FIELDS = ("pd", "pg", "pg_min", "pg_max")


def schema() -> dict:
    return json.loads(resources.files("treegrid.data").joinpath("case.schema.json").read_text())


def _lenient(s: Any) -> Any:
    if isinstance(s, dict):
        out = {k: _lenient(v) for k, v in s.items()}
        if out.get("additionalProperties") is False:
            out["additionalProperties"] = True
        return out
    if isinstance(s, list):
        return [_lenient(v) for v in s]
    return s


def _unknown_fields(doc: dict) -> list[str]:
    strict = schema()
    validator = jsonschema.Draft202012Validator(strict)
    return [
        "/".join(str(p) for p in err.absolute_path) or err.message
        for err in validator.iter_errors(doc)
        if err.validator == "additionalProperties"
    ]


def validate_document(doc: dict, mode: str = "strict") -> None:
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown parse mode {mode!r}")
    sch = schema() if mode == "strict" else _lenient(schema())
    validator = jsonschema.Draft202012Validator(sch)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(where, err.message)
    if mode == "lenient":
        for where in _unknown_fields(doc):
            warnings.warn(f"ignoring unknown field(s) at {where}", stacklevel=3)


def document_to_grid(doc: dict) -> GridCase:
    base = float(doc.get("base_mva", 100.0))
    scale = 1.0 / base if doc.get("units", "pu") == "MW" else 1.0
    buses = []
    for rec in doc["buses"]:
        kw = {k: rec[k] for k in _BUS_FIELDS if k in rec}
        for k in _POWER_FIELDS:
            if k in kw:
                kw[k] = float(kw[k]) * scale
        buses.append(Bus(**kw))
    buses.sort(key=lambda b: b.id)
    lines = []
    for rec in doc["lines"]:
        lines.append(
            Line(
                int(rec["from"]),
                int(rec["to"]),
                float(rec["susceptance"]),
                float(rec["limit"]) * scale,
                bool(rec.get("in_service", True)),
            )
        )
    meta = dict(doc.get("metadata", {}))
    if "partition" in doc:
        meta["partition"] = doc["partition"]
    return GridCase(tuple(buses), tuple(lines), base, doc.get("name", ""), meta)


def parse_case(source: str | Path | bytes, mode: str = "strict") -> GridCase:
    """Parse a JSON case document from a path or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        text = source.decode()
    else:
        text = Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}", exc.msg) from exc
    validate_document(doc, mode)
    return document_to_grid(doc)


def grid_to_document(grid: GridCase) -> dict:
    meta = dict(grid.metadata)
    partition = meta.pop("partition", None)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": grid.name,
        "base_mva": grid.base_mva,
        "units": "pu",
        "buses": [asdict(b) for b in grid.buses],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "susceptance": ln.susceptance,
                "limit": ln.limit,
                "in_service": ln.in_service,
            }
            for ln in grid.lines
        ],
    }
    if partition is not None:
        doc["partition"] = partition
    if meta:
        doc["metadata"] = meta
    return doc


def write_case(grid: GridCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid_to_document(grid), indent=1) + "\n")


# --------------------------------------------------------------------------
# MATPOWER

_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*(\[.*?\]|[^;\n]+)\s*;", re.S)


def _matrix(body: str, name: str) -> np.ndarray:
    rows = []
    for raw in body.strip()[1:-1].splitlines():
        line = raw.split("%")[0].strip()
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(v) for v in chunk.replace(",", " ").split()])
            except ValueError as exc:
                raise ParseError(f"mpc.{name}", f"bad number in row {chunk!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError(f"mpc.{name}", "ragged rows")
    return np.array(rows)


def read_matpower(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for m in _BLOCK.finditer(text):
        name, body = m.group(1), m.group(2).strip()
        if body.startswith("["):
            out[name] = _matrix(body, name)
        else:
            out[name] = body.strip("'\" ")
    for need in ("baseMVA", "bus", "gen", "branch"):
        if need not in out:
            raise ParseError(f"mpc.{need}", "missing")
    return out


def import_matpower(path: str | Path | None = None, text: str | None = None, name: str = "") -> dict:
    """Convert a MATPOWER case into a canonical (per-unit) case document.

    Columns consumed: bus (BUS_I, BUS_TYPE, PD, BUS_AREA), gen (GEN_BUS, PG,
    GEN_STATUS, PMAX, PMIN), branch (F_BUS, T_BUS, BR_X, RATE_A, TAP, SHIFT,
    BR_STATUS), gencost (quadratic coefficient for model 2 rows).
    """
    if text is None:
        text = Path(path).read_text()
        name = name or Path(path).stem
    mpc = read_matpower(text)
    if "dcline" in mpc and np.size(mpc["dcline"]):
        raise UnsupportedFeature("mpc.dcline", "DC lines are not supported")
    base = float(mpc["baseMVA"])
    bus, gen, br = mpc["bus"], mpc["gen"], mpc["branch"]
    flags: list[str] = []

    keep_bus = bus[:, 1] != 4
    ids = [int(v) for v in bus[keep_bus, 0]]
    idset = set(ids)
    rec = {
        i: {"id": i, "pd": 0.0, "pg": 0.0, "pg_min": 0.0, "pg_max": 0.0,
            "gen_cost": 1.0, "area": None, **DEFAULT_DYNAMICS}
        for i in ids
    }
    for row in bus[keep_bus]:
        r = rec[int(row[0])]
        r["pd"] = row[2] / base
        r["area"] = int(row[6])

    costs: dict[int, list[float]] = {}
    gencost = mpc.get("gencost")
    for k, row in enumerate(gen):
        b = int(row[0])
        if b not in idset or row[7] <= 0:
            continue
        r = rec[b]
        r["pg"] += row[1] / base
        r["pg_max"] += row[8] / base
        r["pg_min"] += row[9] / base
        if gencost is not None and k < len(gencost) and int(gencost[k, 0]) == 2:
            ncost = int(gencost[k, 3])
            coeffs = gencost[k, 4:4 + ncost]
            if ncost >= 3 and coeffs[0] > 0:
                costs.setdefault(b, []).append(coeffs[0] * base**2)
    for b, cs in costs.items():
        rec[b]["gen_cost"] = float(np.mean(cs))

    lines = []
    for k, row in enumerate(br):
        f, t = int(row[0]), int(row[1])
        if f not in idset or t not in idset:
            continue
        x, rate, tap, shift, status = row[3], row[5], row[8], row[9], row[10]
        if x == 0:
            raise ParseError(f"mpc.branch[{k}]", "zero reactance")
        if x < 0:
            flags.append(f"branch {k} ({f},{t}): negative reactance {x} replaced by |x|")
            x = -x
        ratio = tap if tap != 0 else 1.0
        if ratio != 1.0:
            warnings.warn(
                f"branch {k} ({f},{t}): off-nominal tap {ratio} folded into susceptance",
                stacklevel=2,
            )
        if shift != 0:
            flags.append(f"branch {k} ({f},{t}): phase shift {shift} ignored")
        lim = rate / base if rate > 0 else UNLIMITED
        lines.append({
            "from": f, "to": t, "susceptance": 1.0 / (x * ratio),
            "limit": lim, "in_service": bool(status > 0),
        })
    for msg in flags:
        warnings.warn(msg, stacklevel=2)

    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "base_mva": base,
        "units": "pu",
        "buses": [rec[i] for i in sorted(ids)],
        "lines": lines,
        "metadata": {
            "source": "matpower",
            "defaults": sorted(DEFAULT_DYNAMICS),
            "default_values": DEFAULT_DYNAMICS,
            "notes": flags,
        },
    }


# --------------------------------------------------------------------------
# bundled data

PGLIB = {
    "pglib118": "pglib_opf_case118_ieee.m",
    "pglib179": "pglib_opf_case179_goc.m",
    "pglib200": "pglib_opf_case200_activ.m",
    "pglib240": "pglib_opf_case240_pserc.m",
}
FIXTURES = ("two_bus", "triangle", "cascade4", "six_bus", "ieee39")


def bundled_path(name: str) -> Path:
    root = resources.files("treegrid.data")
    if name in PGLIB:
        return Path(str(root.joinpath("matpower", PGLIB[name])))
    if name == "case39":
        return Path(str(root.joinpath("matpower", "case39.m")))
    return Path(str(root.joinpath("cases", f"{name}.json")))


def load_bundled(name: str) -> GridCase:
    """Load a bundled network by short name (see ``FIXTURES`` and ``PGLIB``)."""
    path = bundled_path(name)
    if name in PGLIB or name == "case39":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            doc = import_matpower(path, name=name)
        return document_to_grid(doc)
    if not path.exists():
        raise CaseError("name", f"no bundled case {name!r}")
    return parse_case(path)


def load_any(spec: str, mode: str = "strict") -> GridCase:
    """A bundled name, a ``.m`` MATPOWER file, or a JSON case path."""
    if spec in PGLIB or spec in FIXTURES or spec == "case39":
        return load_bundled(spec)
    p = Path(spec)
    if p.suffix == ".m":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return document_to_grid(import_matpower(p))
    return parse_case(p, mode)
