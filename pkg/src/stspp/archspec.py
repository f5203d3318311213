"""Layer-table parsing with shape, operation and parameter accounting.

Accounting model (reproduces the bundled reference tables row for row):

* CONV / DT_FIXED ops: ``2 * kh * kw * c_in * c_out * H_out * W_out``
* TCONV ops: ``2 * kh * kw * c_in * c_out * H_in * W_in``
* UPSAMPLE ops: ``H_out * W_out * C``;  MAXPOOL ops: 0
* CONV / TCONV / DENSE params: ``kh * kw * c_in * c_out + c_out``; everything else 0
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from typing import Optional

from .tinynet.layers import LayerSpec

TABLE_KINDS = {"CONV": "CONV", "TCONV": "TCONV", "MAXPOOL": "MAXPOOL", "UPSAMPLE": "UPSAMPLE",
               "DT": "DT_FIXED", "DT_FIXED": "DT_FIXED", "DENSE": "DENSE"}
UNITS = {"M": 10 ** 6, "K": 10 ** 3, "1": 1}

BUILTIN_TABLES = ("sts_original", "sts_shared", "darknet19", "decoder_original", "decoder_large",
                "decoder_dt")


class TableError(ValueError):
    pass


@dataclass
class ArchTable:
    rows: list[LayerSpec]
    input_shape: tuple[int, int, int]   # (H, W, C), as written in the tables
    name: str = ""
    unit: Optional[str] = None


@dataclass
class RowCost:
    index: int
    kind: str
    filters: int
    kernel: tuple[int, int]
    stride: int
    output: tuple[int, int, int]        # (H, W, C)
    ops: int
    params: int


@dataclass
class CostReport:
    name: str
    input_shape: tuple[int, int, int]
    rows: list[RowCost] = field(default_factory=list)

    @property
    def total_ops(self) -> int:
        return sum(r.ops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)


_SHAPE_RE = re.compile(r"^(\d+)\s*[x×]\s*(\d+)\s*[x×]\s*(\d+)$")
_KERNEL_RE = re.compile(r"^(\d+)\s*[x×]\s*(\d+)$")


def parse_table(text: str, input_shape: Optional[tuple[int, int, int]] = None, name: str = "") -> ArchTable:
    """Parse rows ``index kind filters kxk stride`` (whitespace or comma separated).

    Lines starting with ``#`` are comments; ``input HxWxC`` and ``unit M|K``
    directives may appear before the rows.
    """
    rows: list[LayerSpec] = []
    unit = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = [t for t in re.split(r"[,\s]+", line) if t]
        head = tokens[0].lower()
        if head == "input":
            m = _SHAPE_RE.match("".join(tokens[1:]))
            if not m:
                raise TableError(f"line {lineno}: malformed input shape {' '.join(tokens[1:])!r}")
            if input_shape is None:
                input_shape = tuple(int(v) for v in m.groups())
            continue
        if head == "unit":
            if len(tokens) != 2 or tokens[1] not in UNITS:
                raise TableError(f"line {lineno}: unit must be M or K")
            unit = tokens[1]
            continue
        if len(tokens) != 5:
            raise TableError(f"line {lineno}: expected 5 fields (index kind filters size stride), "
                             f"got {len(tokens)}")
        idx, kind, filters, size, stride = tokens
        kind_u = kind.upper()
        if kind_u not in TABLE_KINDS:
            raise TableError(f"line {lineno}: unknown layer kind {kind!r}")
        km = _KERNEL_RE.match(size)
        try:
            if not km:
                raise ValueError
            filters_i, stride_i = int(filters), int(stride)
            int(idx.rstrip(":"))
        except ValueError:
            raise TableError(f"line {lineno}: malformed row {raw.strip()!r}") from None
        if stride_i < 1:
            raise TableError(f"line {lineno}: stride must be >= 1")
        if filters_i < 1:
            raise TableError(f"line {lineno}: filters must be >= 1")
        kernel = (int(km.group(1)), int(km.group(2)))
        if min(kernel) < 1:
            raise TableError(f"line {lineno}: kernel must be >= 1")
        rows.append(LayerSpec(TABLE_KINDS[kind_u], filters_i, kernel, stride_i))
    if not rows:
        raise TableError("table has no layer rows")
    if input_shape is None:
        raise TableError("input shape not given (add an 'input HxWxC' line)")
    return ArchTable(rows, tuple(input_shape), name, unit)


def infer_shapes(table: ArchTable) -> list[tuple[int, int, int]]:
    """Per-row output shapes ``(H, W, C)``."""
    h, w, c = table.input_shape
    out = []
    for i, row in enumerate(table.rows, 1):
        kh, kw = row.kernel
        s = row.stride
        if row.kind == "CONV":
            h, w, c = -(-h // s), -(-w // s), row.filters
        elif row.kind == "TCONV":
            h, w, c = s * (h - 1) + kh, s * (w - 1) + kw, row.filters
        elif row.kind == "MAXPOOL":
            if h % s or w % s:
                raise TableError(f"row {i}: MAXPOOL stride {s} does not divide {h}x{w}")
            h, w = h // s, w // s
        elif row.kind == "UPSAMPLE":
            h, w = h * kh, w * kw
        elif row.kind == "DT_FIXED":
            c = row.filters
        elif row.kind == "DENSE":
            h, w, c = 1, 1, row.filters
        out.append((h, w, c))
    return out


def _row_costs(table: ArchTable) -> list[tuple[int, int]]:
    shapes = infer_shapes(table)
    prev = [table.input_shape] + shapes[:-1]
    costs = []
    for row, (hi, wi, ci), (ho, wo, co) in zip(table.rows, prev, shapes):
        kh, kw = row.kernel
        if row.kind in ("CONV", "DT_FIXED"):
            ops = 2 * kh * kw * ci * co * ho * wo
        elif row.kind == "TCONV":
            ops = 2 * kh * kw * ci * co * hi * wi
        elif row.kind == "UPSAMPLE":
            ops = ho * wo * co
        elif row.kind == "DENSE":
            ops = 2 * hi * wi * ci * co
        else:
            ops = 0
        if row.kind in ("CONV", "TCONV"):
            params = kh * kw * ci * co + co
        elif row.kind == "DENSE":
            params = hi * wi * ci * co + co
        else:
            params = 0
        costs.append((ops, params))
    return costs


def count_params(table: ArchTable) -> tuple[list[int], int]:
    per = [p for _, p in _row_costs(table)]
    return per, sum(per)


def count_ops(table: ArchTable) -> tuple[list[int], int]:
    per = [o for o, _ in _row_costs(table)]
    return per, sum(per)


def cost_report(table: ArchTable) -> CostReport:
    shapes = infer_shapes(table)
    report = CostReport(table.name, table.input_shape)
    for i, (row, shape, (ops, params)) in enumerate(zip(table.rows, shapes, _row_costs(table)), 1):
        report.rows.append(RowCost(i, row.kind, row.filters, row.kernel, row.stride, shape, ops, params))
    return report


# --------------------------------------------------------------------------
# display
# --------------------------------------------------------------------------

def round_half_up(value: int, unit: str, digits: int = 0) -> Decimal:
    q = Decimal(1).scaleb(-digits)
    return (Decimal(value) / Decimal(UNITS[unit])).quantize(q, rounding=ROUND_HALF_UP)


def fmt_ops(value: int, unit: str) -> str:
    return f"{round_half_up(value, unit):,}"


def fmt_params(value: int, unit: str, digits: int = 2) -> str:
    return f"{round_half_up(value, unit, digits):,.{digits}f}"


def fmt_shape(shape: tuple[int, int, int]) -> str:
    return "x".join(str(v) for v in shape)


_DISPLAY_KIND = {"DT_FIXED": "DT"}


def report_rows(report: CostReport, unit: str) -> list[dict]:
    return [{"index": r.index, "type": _DISPLAY_KIND.get(r.kind, r.kind), "filters": r.filters,
             "size": f"{r.kernel[0]}x{r.kernel[1]}", "stride": r.stride, "output": fmt_shape(r.output),
             "ops": fmt_ops(r.ops, unit), "params": fmt_params(r.params, unit)}
            for r in report.rows]


def format_text(report: CostReport, unit: str = "M") -> str:
    scale = {"M": "x10^6", "K": "x10^3", "1": ""}[unit]
    header = ["#", "Type", "Filters", "Size", "Stride", "Output", f"Ops {scale}".strip(),
              f"Params {scale}".strip()]
    body = [[str(r["index"]) + ":", r["type"], str(r["filters"]), r["size"], str(r["stride"]),
             r["output"], r["ops"], r["params"]] for r in report_rows(report, unit)]
    footer = ["", "", "", "", "", "Total:", fmt_ops(report.total_ops, unit),
              fmt_params(report.total_params, unit, 1)]
    widths = [max(len(line[i]) for line in [header, footer] + body) for i in range(len(header))]
    right = {0, 2, 4, 6, 7}

    def fmt(line):
        return "  ".join(c.rjust(w) if i in right else c.ljust(w)
                         for i, (c, w) in enumerate(zip(line, widths))).rstrip()

    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(b) for b in body] + [rule, fmt(footer)]) + "\n"


def report_json(report: CostReport, unit: str = "M") -> dict:
    return {
        "name": report.name,
        "input": fmt_shape(report.input_shape),
        "unit": unit,
        "rows": [dict(d, ops_exact=r.ops, params_exact=r.params)
                 for d, r in zip(report_rows(report, unit), report.rows)],
        "total": {"ops": fmt_ops(report.total_ops, unit), "params": fmt_params(report.total_params, unit, 1),
                  "ops_exact": report.total_ops, "params_exact": report.total_params},
    }


def load_builtin_table(name: str) -> ArchTable:
    """One of the bundled reference tables (see ``BUILTIN_TABLES``)."""
    if name not in BUILTIN_TABLES:
        raise KeyError(f"unknown bundled table {name!r}; choose from {', '.join(BUILTIN_TABLES)}")
    text = resources.files("stspp.data.arch").joinpath(f"{name}.txt").read_text()
    return parse_table(text, name=name)
