"""Readers and writers: network cases, income / time-series tables, pricing
configs and result reports.

All readers accept ``bytes``, ``str`` (the content itself) or a binary/text
file object. Floats in reports are written with 12 significant digits so
output is byte-for-byte reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonPositiveIncome, ParseError, UnsupportedCostModel
from .grid import Bus, Generator, Line, Network
from .pricing import RetailConfig, TimeSeriesTable

logger = logging.getLogger(__name__)

UNLIMITED_FLOW_MW = 1e6
SIG_DIGITS = 12


def _text(source) -> str:
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        try:
            return bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not valid UTF-8: {exc}") from None
    return str(source)


def content_hash(source) -> str:
    data = _text(source).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


# -- cases ----------------------------------------------------------------------


def parse_case(source, format: str = "json") -> Network:
    """Parse a case in ``"json"`` (native) or ``"matpower"`` format.

    Bus ids are kept as written; call :func:`lmburden.grid.normalize` before
    building the OPF.
    """
    text = _text(source)
    if format in ("json", "native-json"):
        return _parse_native(text)
    if format in ("matpower", "matpower-subset", "m"):
        return _parse_matpower(text)
    raise ValueError(f"unknown case format {format!r}")


def _require(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise ParseError(f"{where}: missing field {key!r}") from None


def _parse_native(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ParseError("case must be a JSON object")
    try:
        buses = [
            Bus(
                id=int(_require(b, "id", f"buses[{i}]")),
                name=str(b.get("name", "")),
                is_slack=bool(b.get("slack", False)),
                demand=float(b.get("demand_mw", 0.0)),
            )
            for i, b in enumerate(_require(doc, "buses", "case"))
        ]
        lines = [
            Line(
                from_bus=int(_require(ln, "from", f"lines[{i}]")),
                to_bus=int(_require(ln, "to", f"lines[{i}]")),
                susceptance=float(_require(ln, "susceptance", f"lines[{i}]")),
                flow_limit=float(_require(ln, "limit_mw", f"lines[{i}]")),
            )
            for i, ln in enumerate(doc.get("lines", []))
        ]
        gens = [
            Generator(
                bus=int(_require(g, "bus", f"generators[{i}]")),
                alpha=float(_require(g, "alpha", f"generators[{i}]")),
                beta=float(_require(g, "beta", f"generators[{i}]")),
                g_max=float(_require(g, "gmax_mw", f"generators[{i}]")),
            )
            for i, g in enumerate(doc.get("generators", []))
        ]
        return Network(tuple(buses), tuple(lines), tuple(gens), float(doc.get("mva_base", 100.0)))
    except ParseError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"invalid case: {exc}") from None


def write_case(network: Network) -> bytes:
    """Serialize to the native JSON schema."""
    doc = {
        "mva_base": network.mva_base,
        "buses": [
            {"id": b.id, "name": b.name, "slack": b.is_slack, "demand_mw": b.demand} for b in network.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance, "limit_mw": ln.flow_limit}
            for ln in network.lines
        ],
        "generators": [
            {"bus": g.bus, "alpha": g.alpha, "beta": g.beta, "gmax_mw": g.g_max} for g in network.generators
        ],
    }
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


_MPC_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_MPC_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[\n{]+);")


def _matpower_rows(text: str, body_start: int, body: str, section: str) -> list[list[float]]:
    rows = []
    base_line = text.count("\n", 0, body_start) + 1
    for li, raw in enumerate(body.split("\n")):
        code = raw.split("%", 1)[0]
        offset = 0
        for chunk in code.split(";"):
            tokens = [t for t in re.split(r"[\s,]+", chunk) if t]
            if tokens:
                row = []
                for tok in tokens:
                    try:
                        row.append(float(tok))
                    except ValueError:
                        col = code.find(tok, offset) + 1
                        raise ParseError(f"mpc.{section}: bad number {tok!r}", base_line + li, col) from None
                rows.append(row)
            offset += len(chunk) + 1
    return rows


def _parse_matpower(text: str) -> Network:
    blocks = {}
    for m in _MPC_BLOCK.finditer(text):
        blocks[m.group(1)] = _matpower_rows(text, m.start(2), m.group(2), m.group(1))
    scalars = {m.group(1): m.group(2).strip() for m in _MPC_SCALAR.finditer(text)}
    for need in ("bus", "gen", "branch", "gencost"):
        if need not in blocks:
            raise ParseError(f"MATPOWER case lacks mpc.{need}")
    try:
        base = float(scalars.get("baseMVA", 100.0))
    except ValueError:
        raise ParseError(f"bad baseMVA {scalars.get('baseMVA')!r}") from None

    def width(rows, n, section):
        for i, r in enumerate(rows):
            if len(r) < n:
                raise ParseError(f"mpc.{section} row {i + 1} has {len(r)} columns, need {n}")

    width(blocks["bus"], 3, "bus")
    width(blocks["gen"], 10, "gen")
    width(blocks["branch"], 11, "branch")

    buses = []
    for r in blocks["bus"]:
        buses.append(Bus(id=int(r[0]), name=str(int(r[0])), is_slack=int(r[1]) == 3, demand=float(r[2])))
    if sum(b.is_slack for b in buses) > 1:
        first = next(b.id for b in buses if b.is_slack)
        logger.warning("several reference buses; keeping bus %d", first)
        buses = [Bus(b.id, b.name, b.id == first, b.demand) for b in buses]

    lines = []
    for i, r in enumerate(blocks["branch"]):
        if int(r[10]) == 0:
            logger.warning("branch %d is out of service; skipped", i + 1)
            continue
        x = r[3]
        if x == 0:
            raise ParseError(f"mpc.branch row {i + 1}: zero reactance")
        if len(r) > 9 and (r[8] not in (0.0, 1.0) or r[9] != 0.0):
            logger.warning("branch %d: tap ratio / phase shift ignored", i + 1)
        rate = r[5]
        lines.append(Line(int(r[0]), int(r[1]), abs(1.0 / x), rate if rate > 0 else UNLIMITED_FLOW_MW))

    costs = blocks["gencost"]
    gens = []
    for i, r in enumerate(blocks["gen"]):
        if i >= len(costs):
            raise ParseError(f"no gencost row for generator {i + 1}")
        if int(r[7]) <= 0:
            logger.warning("generator %d is out of service; skipped", i + 1)
            continue
        if r[9] != 0:
            logger.warning("generator %d: Pmin = %g ignored (lower bound is 0)", i + 1, r[9])
        c = costs[i]
        if int(c[0]) != 2:
            raise UnsupportedCostModel(f"gencost row {i + 1}: only polynomial (model 2) costs are supported")
        ncost = int(c[3])
        coeffs = c[4 : 4 + ncost]
        if len(coeffs) != ncost:
            raise ParseError(f"gencost row {i + 1}: expected {ncost} coefficients")
        # highest order first; anything above quadratic must vanish
        if ncost > 3 and any(v != 0 for v in coeffs[: ncost - 3]):
            raise UnsupportedCostModel(f"gencost row {i + 1}: polynomial degree above 2")
        tail = ([0.0, 0.0, 0.0] + list(coeffs))[-3:]
        alpha, beta = tail[0], tail[1]
        gens.append(Generator(int(r[0]), float(alpha), float(beta), float(r[8])))
    return Network(tuple(buses), tuple(lines), tuple(gens), base)


# -- income ---------------------------------------------------------------------


@dataclass(frozen=True)
class IncomeRecord:
    bus_id: int
    income: float
    households: int


@dataclass(frozen=True)
class IncomeTable:
    records: dict
    period: str = "annual"

    def __len__(self):
        return len(self.records)

    def income(self, bus_id: int) -> float:
        return self.records[bus_id].income

    def households(self, bus_id: int) -> int:
        return self.records[bus_id].households


def _meta_and_rows(text: str):
    meta = {}
    body = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            key, sep, value = stripped[1:].partition(":")
            if sep:
                meta[key.strip().lower()] = value.strip()
            continue
        body.append((lineno, raw))
    return meta, body


def _csv_records(body, required: list[str], optional: list[str] = ()):
    if not body:
        raise ParseError("missing header row")
    header_line, header = body[0]
    cols = [c.strip() for c in next(csv.reader([header]))]
    missing = [c for c in required if c not in cols]
    if missing:
        raise ParseError(f"header lacks column(s) {missing}", header_line, 1)
    for lineno, raw in body[1:]:
        cells = next(csv.reader([raw]))
        if len(cells) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, got {len(cells)}", lineno)
        yield lineno, dict(zip(cols, (c.strip() for c in cells)))


def _num(value: str, kind, lineno: int, column: str):
    try:
        return kind(value)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot read {value!r}", lineno) from None


def parse_income(source) -> IncomeTable:
    """Read ``bus_id,income,households`` with an optional ``# period: ...`` line."""
    meta, body = _meta_and_rows(_text(source))
    records = {}
    for lineno, row in _csv_records(body, ["bus_id", "income", "households"]):
        bus = _num(row["bus_id"], int, lineno, "bus_id")
        income = _num(row["income"], float, lineno, "income")
        households = _num(row["households"], int, lineno, "households")
        if bus in records:
            raise ParseError(f"duplicate bus id {bus}", lineno)
        if not income > 0:
            raise NonPositiveIncome(f"bus {bus}: income must be positive, got {income:g} (line {lineno})")
        if households < 0:
            raise ParseError(f"bus {bus}: negative household count", lineno)
        records[bus] = IncomeRecord(bus, income, households)
    return IncomeTable(records, meta.get("period", "annual"))


def write_income(table: IncomeTable) -> bytes:
    out = io.StringIO()
    out.write(f"# period: {table.period}\n")
    out.write("bus_id,income,households\n")
    for bus in sorted(table.records):
        r = table.records[bus]
        out.write(f"{r.bus_id},{fmt_float(r.income)},{r.households}\n")
    return out.getvalue().encode("utf-8")


PERIOD_HOURS = {"hourly": 1.0, "hour": 1.0, "daily": 24.0, "day": 24.0, "weekly": 168.0,
                "monthly": 730.0, "month": 730.0, "annual": 8760.0, "yearly": 8760.0, "year": 8760.0}


# -- time series ----------------------------------------------------------------


def parse_timeseries(source) -> TimeSeriesTable:
    """Read ``bus_id,t,demand_mwh,omega_dollars[,lmp]``.

    Every bus must cover the same contiguous run of timesteps.
    """
    _, body = _meta_and_rows(_text(source))
    rows = list(_csv_records(body, ["bus_id", "t", "demand_mwh", "omega_dollars"]))
    if not rows:
        raise ParseError("time series has no rows")
    has_lmp = "lmp" in rows[0][1]
    data = {}
    for lineno, row in rows:
        bus = _num(row["bus_id"], int, lineno, "bus_id")
        t = _num(row["t"], int, lineno, "t")
        if (bus, t) in data:
            raise ParseError(f"duplicate record for bus {bus}, t={t}", lineno)
        dem = _num(row["demand_mwh"], float, lineno, "demand_mwh")
        if dem < 0:
            raise ParseError(f"negative demand for bus {bus}, t={t}", lineno)
        om = _num(row["omega_dollars"], float, lineno, "omega_dollars")
        lmp = _num(row["lmp"], float, lineno, "lmp") if has_lmp and row["lmp"] != "" else None
        if has_lmp and lmp is None:
            raise ParseError(f"missing lmp for bus {bus}, t={t}", lineno)
        data[(bus, t)] = (dem, om, lmp)
    bus_ids = sorted({b for b, _ in data})
    steps = sorted({t for _, t in data})
    if steps != list(range(steps[0], steps[0] + len(steps))):
        raise ParseError("timesteps are not contiguous")
    for b in bus_ids:
        for t in steps:
            if (b, t) not in data:
                raise ParseError(f"bus {b} has no record for t={t}")
    shape = (len(steps), len(bus_ids))
    arrays = [np.zeros(shape) for _ in range(3)]
    for (b, t), vals in data.items():
        i, j = steps.index(t), bus_ids.index(b)
        for arr, v in zip(arrays, vals):
            arr[i, j] = np.nan if v is None else v
    return TimeSeriesTable(tuple(bus_ids), tuple(steps), arrays[0], arrays[1], arrays[2] if has_lmp else None)


# -- pricing config -------------------------------------------------------------


def parse_pricing_config(source, bus_ids=None) -> RetailConfig:
    """JSON block ``{model, omega, phi, regions, averaging}``.

    ``omega`` may be a scalar or a ``{bus_id: value}`` map (needs ``bus_ids``
    to order it); ``phi`` is a scalar, a list of diagonal entries or a map.
    """
    text = _text(source)
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid pricing config: {exc.msg}", exc.lineno, exc.colno) from None

    def per_bus(value, name):
        if value is None or isinstance(value, (int, float)):
            return value
        if isinstance(value, dict):
            if bus_ids is None:
                raise ParseError(f"{name} given per bus but bus ids unknown")
            mapping = {int(k): float(v) for k, v in value.items()}
            return np.array([mapping.get(b, 0.0) for b in bus_ids])
        return np.asarray(value, dtype=float)

    try:
        return RetailConfig(
            model=int(doc.get("model", 0)),
            omega=per_bus(doc.get("omega", 0.0), "omega"),
            phi=per_bus(doc.get("phi"), "phi"),
            regions=doc.get("regions"),
            averaging=str(doc.get("averaging", "per-node")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"invalid pricing config: {exc}") from None


# -- reports --------------------------------------------------------------------


def fmt_float(v: float) -> str:
    s = f"{v:.{SIG_DIGITS}g}"
    if s in ("nan", "inf", "-inf"):
        return s
    if "." not in s and "e" not in s:
        s += ".0"
    return s


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(float(v))
    return str(v)


def _json_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not np.isfinite(v):
            return None
        return float(f"{v:.{SIG_DIGITS}g}")
    return v


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def __len__(self):
        return len(self.rows)


@dataclass
class Report:
    metadata: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)


def write_report(report: Report, format: str = "csv") -> dict[str, bytes]:
    """Serialize to ``{filename: bytes}``.

    ``csv`` (csv-bundle) emits one file per table plus ``manifest.json``;
    ``json`` emits a single ``report.json``.
    """
    meta = {k: _json_cell(v) for k, v in sorted(report.metadata.items())}
    if format in ("csv", "csv-bundle"):
        files = {}
        manifest_tables = []
        for name, table in report.tables.items():
            buf = io.StringIO()
            buf.write(",".join(table.columns) + "\n")
            for row in table.rows:
                buf.write(",".join(_fmt_cell(v) for v in row) + "\n")
            fname = f"{name}.csv"
            files[fname] = buf.getvalue().encode("utf-8")
            manifest_tables.append({"name": name, "file": fname, "columns": list(table.columns), "rows": len(table)})
        manifest = {"format": "csv-bundle", "metadata": meta, "tables": manifest_tables}
        files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
        return files
    if format == "json":
        doc = {
            "format": "json",
            "metadata": meta,
            "tables": {
                name: {"columns": list(t.columns), "rows": [[_json_cell(v) for v in r] for r in t.rows]}
                for name, t in report.tables.items()
            },
        }
        return {"report.json": (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")}
    raise ValueError(f"unknown report format {format!r}")


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_report(files: dict[str, bytes] | str | os.PathLike) -> Report:
    """Inverse of :func:`write_report`; accepts the file dict or a directory."""
    if not isinstance(files, dict):
        root = Path(files)
        files = {p.name: p.read_bytes() for p in root.iterdir() if p.is_file()}
    if "report.json" in files:
        doc = json.loads(files["report.json"])
        tables = {
            name: Table(list(t["columns"]), [list(r) for r in t["rows"]]) for name, t in doc["tables"].items()
        }
        return Report(dict(doc["metadata"]), tables)
    if "manifest.json" not in files:
        raise ParseError("no manifest.json or report.json in report bundle")
    manifest = json.loads(files["manifest.json"])
    tables = {}
    for entry in manifest["tables"]:
        lines = files[entry["file"]].decode("utf-8").splitlines()
        reader = csv.reader(lines)
        cols = next(reader)
        tables[entry["name"]] = Table(cols, [[_parse_cell(c) for c in row] for row in reader])
    return Report(dict(manifest["metadata"]), tables)


def save_report(files: dict[str, bytes], out_dir) -> list[Path]:
    """Write files atomically: all land in ``out_dir`` or none do."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".lmburden-", dir=out))
    written = []
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        for name in files:
            target = out / name
            os.replace(tmp / name, target)
            written.append(target)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return written
