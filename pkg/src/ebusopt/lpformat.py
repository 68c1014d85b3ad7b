"""LP and MPS model files, and solver solution-file parsers.

Writers emit byte-deterministic files (canonical variable and row order, no
timestamps, fixed float formatting) so identical models produce identical
bytes.  Readers cover the dialect the writers emit plus the common core of
both formats; they back the bundled reference solver and the tests that
cross-check the two encodings against each other.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional
from xml.etree import ElementTree


class LpFormatError(ValueError):
    """Malformed model or solution file."""


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# Parsed model container (shared by both readers)
# ---------------------------------------------------------------------------

@dataclass
class ParsedModel:
    minimize: bool = True
    objective: dict = field(default_factory=dict)    # var -> coefficient
    rows: list = field(default_factory=list)         # (name, coeffs, sense, rhs)
    lower: dict = field(default_factory=dict)        # var -> lb (default 0)
    upper: dict = field(default_factory=dict)        # var -> ub (default +inf)
    integers: set = field(default_factory=set)
    variables: list = field(default_factory=list)    # first-seen order

    def touch(self, name: str):
        if name not in self.lower:
            self.lower[name] = 0.0
            self.upper[name] = math.inf
            self.variables.append(name)


# ---------------------------------------------------------------------------
# LP writing
# ---------------------------------------------------------------------------

def _write_terms(fh, coeffs, name_of):
    items = list(coeffs)
    if not items:
        fh.write(" 0 __zero__")
        return
    for i, (var, coef) in enumerate(items):
        sign = "-" if coef < 0 else "+"
        mag = _num(abs(coef))
        fh.write(f" {sign} {mag} {name_of(var)}")
        if (i + 1) % 6 == 0 and i + 1 < len(items):
            fh.write("\n  ")


def write_lp(model, path, relax: bool = False) -> None:
    """CPLEX-style LP file; ``relax`` drops integrality (binaries become
    continuous in [0, 1])."""
    names = [v.name for v in model.variables]
    with open(path, "w") as fh:
        fh.write("\\ ebusopt model\n")
        fh.write("Minimize\n obj:")
        obj = [(i, v.obj) for i, v in enumerate(model.variables) if v.obj != 0.0]
        _write_terms(fh, obj, lambda i: names[i])
        fh.write("\nSubject To\n")
        for row in model.rows:
            fh.write(f" {row.name}:")
            _write_terms(fh, sorted(row.coeffs.items()), lambda i: names[i])
            sense = {"<=": "<=", ">=": ">=", "=": "="}[row.sense]
            fh.write(f" {sense} {_num(row.rhs)}\n")
        fh.write("Bounds\n")
        binaries = []
        for i, v in enumerate(model.variables):
            if v.binary:
                if relax:
                    fh.write(f" 0 <= {v.name} <= 1\n")
                else:
                    binaries.append(v.name)
                continue
            if v.ub == math.inf:
                if v.lb != 0.0:
                    fh.write(f" {v.name} >= {_num(v.lb)}\n")
            else:
                fh.write(f" {_num(v.lb)} <= {v.name} <= {_num(v.ub)}\n")
        if binaries:
            fh.write("Binaries\n")
            for i in range(0, len(binaries), 4):
                fh.write(" " + " ".join(binaries[i:i + 4]) + "\n")
        fh.write("End\n")


# ---------------------------------------------------------------------------
# LP reading
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(
    r"^\s*(minimize|minimise|min|maximize|maximise|max|subject\s+to|such\s+that"
    r"|s\.t\.|st|bounds?|binar(?:y|ies)|bin|generals?|gen|integers?|int|end)\s*$",
    re.IGNORECASE)

_TOKEN_RE = re.compile(
    r"(?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?(?![\w.\[\]@#]))"
    r"|(?P<name>[A-Za-z_!\"#$%&(),;?@'`{}|~.][A-Za-z0-9_!\"#$%&(),;?@'`{}|~.\[\]]*)"
    r"|(?P<op><=|>=|=<|=>|=|\+|-|:)"
    r"|(?P<ws>\s+)")


def _tokenize_lp(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LpFormatError(f"cannot tokenize LP text near {text[pos:pos+30]!r}")
        pos = m.end()
        if m.lastgroup == "ws":
            continue
        kind = m.lastgroup
        val = m.group()
        if kind == "op" and val in ("=<", "=>"):
            val = "<=" if val == "=<" else ">="
        tokens.append((kind, val))
    return tokens


def _parse_linear_expr(tokens, i):
    """Parse [+-] [coef] name ... ; returns (coeffs, next index)."""
    coeffs: dict = {}
    sign = 1.0
    pending_coef = None
    while i < len(tokens):
        kind, val = tokens[i]
        if kind == "op" and val in ("+", "-"):
            if val == "-":
                sign = -sign
            i += 1
        elif kind == "num":
            if pending_coef is not None:
                raise LpFormatError("two consecutive numbers in expression")
            pending_coef = float(val)
            i += 1
        elif kind == "name":
            coef = sign * (pending_coef if pending_coef is not None else 1.0)
            coeffs[val] = coeffs.get(val, 0.0) + coef
            sign, pending_coef = 1.0, None
            i += 1
        else:
            break
    return coeffs, pending_coef, sign, i


def read_lp(path) -> ParsedModel:
    with open(path) as fh:
        raw_lines = fh.readlines()
    # strip comments, find sections
    sections: list = []  # (kind, text)
    current, buf = None, []
    for line in raw_lines:
        line = line.split("\\", 1)[0].rstrip("\n")
        if not line.strip():
            continue
        m = _SECTION_RE.match(line)
        if m:
            if current is not None:
                sections.append((current, "\n".join(buf)))
            word = re.sub(r"\s+", " ", m.group(1).lower())
            if word in ("minimize", "minimise", "min"):
                current = "objective-min"
            elif word in ("maximize", "maximise", "max"):
                current = "objective-max"
            elif word in ("subject to", "such that", "s.t.", "st"):
                current = "constraints"
            elif word in ("bound", "bounds"):
                current = "bounds"
            elif word in ("binary", "binaries", "bin"):
                current = "binaries"
            elif word in ("general", "generals", "gen", "integer", "integers",
                          "int"):
                current = "generals"
            else:
                current = "end"
            buf = []
        else:
            buf.append(line)
    if current is not None:
        sections.append((current, "\n".join(buf)))

    model = ParsedModel()
    for kind, text in sections:
        if kind in ("objective-min", "objective-max"):
            model.minimize = kind == "objective-min"
            tokens = _tokenize_lp(text)
            i = 0
            if (len(tokens) >= 2 and tokens[0][0] == "name"
                    and tokens[1] == ("op", ":")):
                i = 2
            coeffs, pending, _, i = _parse_linear_expr(tokens, i)
            if i != len(tokens) or pending is not None:
                raise LpFormatError("trailing tokens in objective")
            coeffs.pop("__zero__", None)
            for var in coeffs:
                model.touch(var)
            model.objective = coeffs
        elif kind == "constraints":
            tokens = _tokenize_lp(text)
            i = 0
            while i < len(tokens):
                name = None
                if (i + 1 < len(tokens) and tokens[i][0] == "name"
                        and tokens[i + 1] == ("op", ":")):
                    name = tokens[i][1]
                    i += 2
                coeffs, pending, _, i = _parse_linear_expr(tokens, i)
                if pending is not None:
                    raise LpFormatError("constraint ends with a dangling number")
                if i >= len(tokens) or tokens[i][0] != "op" \
                        or tokens[i][1] not in ("<=", ">=", "="):
                    raise LpFormatError(f"constraint {name or coeffs}: missing sense")
                sense = tokens[i][1]
                i += 1
                sign = 1.0
                if i < len(tokens) and tokens[i] == ("op", "-"):
                    sign, i = -1.0, i + 1
                elif i < len(tokens) and tokens[i] == ("op", "+"):
                    i += 1
                if i >= len(tokens) or tokens[i][0] != "num":
                    raise LpFormatError(f"constraint {name}: missing rhs")
                rhs = sign * float(tokens[i][1])
                i += 1
                coeffs.pop("__zero__", None)
                for var in coeffs:
                    model.touch(var)
                model.rows.append((name or f"r{len(model.rows)}", coeffs,
                                   sense, rhs))
        elif kind == "bounds":
            for line in text.splitlines():
                _parse_bound_line(line, model)
        elif kind == "binaries":
            for var in text.split():
                model.touch(var)
                model.integers.add(var)
                model.lower[var] = 0.0
                model.upper[var] = min(model.upper.get(var, math.inf), 1.0)
        elif kind == "generals":
            for var in text.split():
                model.touch(var)
                model.integers.add(var)
    return model


def _parse_bound_line(line: str, model: ParsedModel) -> None:
    tokens = _tokenize_lp(line)
    if not tokens:
        return
    if len(tokens) == 2 and tokens[1][1].lower() == "free":
        var = tokens[0][1]
        model.touch(var)
        model.lower[var] = -math.inf
        return

    def read_value(i):
        sign = 1.0
        if tokens[i] == ("op", "-"):
            sign, i = -1.0, i + 1
        elif tokens[i] == ("op", "+"):
            i += 1
        kind, val = tokens[i]
        if kind == "num":
            return sign * float(val), i + 1
        if kind == "name" and val.lower() in ("inf", "infinity", "+inf"):
            return sign * math.inf, i + 1
        raise LpFormatError(f"bad bound value in {line!r}")

    # forms: v op b | b op v | b op v op b
    if tokens[0][0] == "name" and tokens[0][1].lower() not in ("inf", "infinity"):
        var = tokens[0][1]
        model.touch(var)
        sense = tokens[1][1]
        value, _ = read_value(2)
        if sense == "<=":
            model.upper[var] = value
        elif sense == ">=":
            model.lower[var] = value
        else:
            model.lower[var] = model.upper[var] = value
        return
    lo, i = read_value(0)
    if tokens[i][1] != "<=":
        raise LpFormatError(f"bad bound line {line!r}")
    var = tokens[i + 1][1]
    model.touch(var)
    model.lower[var] = lo
    if i + 2 < len(tokens):
        if tokens[i + 2][1] != "<=":
            raise LpFormatError(f"bad bound line {line!r}")
        hi, _ = read_value(i + 3)
        model.upper[var] = hi


# ---------------------------------------------------------------------------
# MPS writing / reading (free format)
# ---------------------------------------------------------------------------

def write_mps(model, path, relax: bool = False) -> None:
    names = [v.name for v in model.variables]
    sense_code = {"<=": "L", ">=": "G", "=": "E"}
    # column-major coefficient map
    col_entries: dict = {i: [] for i in range(len(names))}
    for i, v in enumerate(model.variables):
        if v.obj != 0.0:
            col_entries[i].append(("obj", v.obj))
    for row in model.rows:
        for i, coef in sorted(row.coeffs.items()):
            col_entries[i].append((row.name, coef))
    with open(path, "w") as fh:
        fh.write("NAME ebusopt\n")
        fh.write("ROWS\n N obj\n")
        for row in model.rows:
            fh.write(f" {sense_code[row.sense]} {row.name}\n")
        fh.write("COLUMNS\n")
        in_int = False
        for i, v in enumerate(model.variables):
            want_int = v.binary and not relax
            if want_int and not in_int:
                fh.write("    MARKER M1 'MARKER' 'INTORG'\n")
                in_int = True
            elif not want_int and in_int:
                fh.write("    MARKER M2 'MARKER' 'INTEND'\n")
                in_int = False
            entries = col_entries[i]
            if not entries:
                entries = [("obj", 0.0)]
            for j in range(0, len(entries), 2):
                chunk = entries[j:j + 2]
                parts = " ".join(f"{rn} {_num(c)}" for rn, c in chunk)
                fh.write(f"    {names[i]} {parts}\n")
        if in_int:
            fh.write("    MARKER M3 'MARKER' 'INTEND'\n")
        fh.write("RHS\n")
        for row in model.rows:
            if row.rhs != 0.0:
                fh.write(f"    RHS {row.name} {_num(row.rhs)}\n")
        fh.write("BOUNDS\n")
        for v in model.variables:
            if v.binary:
                if relax:
                    fh.write(f" UP BND {v.name} 1\n")
                else:
                    fh.write(f" BV BND {v.name}\n")
            else:
                if v.lb != 0.0:
                    fh.write(f" LO BND {v.name} {_num(v.lb)}\n")
                if v.ub != math.inf:
                    fh.write(f" UP BND {v.name} {_num(v.ub)}\n")
        fh.write("ENDATA\n")


def read_mps(path) -> ParsedModel:
    model = ParsedModel()
    section = None
    row_sense: dict = {}
    obj_row = None
    rows_order: list = []
    row_coeffs: dict = {}
    row_rhs: dict = {}
    integer_mode = False
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("*"):
                continue
            if not line[0].isspace():
                parts = line.split()
                section = parts[0].upper()
                if section == "ENDATA":
                    break
                continue
            parts = line.split()
            if section == "ROWS":
                code, name = parts[0].upper(), parts[1]
                if code == "N":
                    if obj_row is None:
                        obj_row = name
                else:
                    row_sense[name] = {"L": "<=", "G": ">=", "E": "="}[code]
                    rows_order.append(name)
                    row_coeffs[name] = {}
            elif section == "COLUMNS":
                if len(parts) >= 3 and parts[1].startswith("'MARKER'"):
                    integer_mode = parts[2].strip("'") == "INTORG"
                    continue
                if "'MARKER'" in parts:
                    integer_mode = "'INTORG'" in parts
                    continue
                var = parts[0]
                model.touch(var)
                if integer_mode:
                    model.integers.add(var)
                for j in range(1, len(parts) - 1, 2):
                    row, val = parts[j], float(parts[j + 1])
                    if row == obj_row:
                        model.objective[var] = model.objective.get(var, 0.0) + val
                    elif row in row_coeffs:
                        idx = row_coeffs[row]
                        idx[var] = idx.get(var, 0.0) + val
                    else:
                        raise LpFormatError(f"MPS column references unknown row "
                                            f"{row!r}")
            elif section == "RHS":
                for j in range(1, len(parts) - 1, 2):
                    row_rhs[parts[j]] = float(parts[j + 1])
            elif section == "RANGES":
                raise LpFormatError("MPS RANGES section is not supported")
            elif section == "BOUNDS":
                btype = parts[0].upper()
                var = parts[2]
                model.touch(var)
                if btype == "UP":
                    model.upper[var] = float(parts[3])
                elif btype == "LO":
                    model.lower[var] = float(parts[3])
                elif btype == "FX":
                    model.lower[var] = model.upper[var] = float(parts[3])
                elif btype == "BV":
                    model.integers.add(var)
                    model.lower[var] = 0.0
                    model.upper[var] = 1.0
                elif btype == "MI":
                    model.lower[var] = -math.inf
                elif btype == "PL":
                    model.upper[var] = math.inf
                elif btype == "UI":
                    model.integers.add(var)
                    model.upper[var] = float(parts[3])
                else:
                    raise LpFormatError(f"unsupported bound type {btype!r}")
    for name in rows_order:
        model.rows.append((name, row_coeffs[name], row_sense[name],
                           row_rhs.get(name, 0.0)))
    # integer variables with no explicit bounds default to [0, 1] in MPS
    for var in model.integers:
        if model.upper.get(var) == math.inf:
            model.upper[var] = 1.0
    return model


# ---------------------------------------------------------------------------
# Solution files
# ---------------------------------------------------------------------------

@dataclass
class RawSolution:
    """Variable values plus solver status as parsed from a solution file."""

    values: dict
    objective: Optional[float] = None
    bound: Optional[float] = None
    status: str = "unknown"
    command: str = ""
    solver_output: str = ""

    def value(self, name: str) -> float:
        return self.values.get(name, 0.0)

    @property
    def has_incumbent(self) -> bool:
        return bool(self.values)


_META_KEYS = {"status", "objective", "bound"}


def write_solution_text(path, values: dict, status: str,
                        objective: Optional[float],
                        bound: Optional[float]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# status {status}\n")
        if objective is not None:
            fh.write(f"# objective {format(objective, '.17g')}\n")
        if bound is not None:
            fh.write(f"# bound {format(bound, '.17g')}\n")
        for name, val in values.items():
            fh.write(f"{name} {format(val, '.17g')}\n")


def parse_solution_text(path) -> RawSolution:
    values: dict = {}
    meta: dict = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#") or line.startswith("//"):
                parts = line.lstrip("#/ ").split()
                if len(parts) >= 2 and parts[0].lower() in _META_KEYS:
                    meta[parts[0].lower()] = parts[1]
                continue
            parts = line.split()
            if parts[0].lower() in ("=obj=", "objective", "objective_value",
                                    "objvalue"):
                meta.setdefault("objective", parts[-1])
                continue
            if len(parts) < 2:
                continue
            try:
                values[parts[0]] = float(parts[1])
            except ValueError:
                continue
    status = meta.get("status", "unknown")
    if not values and status == "unknown":
        raise LpFormatError(f"no variable values or status found in {path}")

    def _f(key):
        try:
            return float(meta[key]) if key in meta else None
        except ValueError:
            return None

    return RawSolution(values=values, objective=_f("objective"),
                       bound=_f("bound"), status=status)


def parse_solution_xml(path) -> RawSolution:
    try:
        tree = ElementTree.parse(path)
    except ElementTree.ParseError as exc:
        raise LpFormatError(f"bad XML solution file: {exc}") from exc
    root = tree.getroot()
    values = {}
    for var in root.iter("variable"):
        name = var.get("name")
        val = var.get("value")
        if name is not None and val is not None:
            values[name] = float(val)
    objective = None
    status = "unknown"
    header = root.find("header")
    if header is not None:
        objective = header.get("objectiveValue")
        objective = float(objective) if objective is not None else None
        status = header.get("solutionStatusString", "unknown")
    if not values:
        raise LpFormatError(f"no variables in XML solution file {path}")
    return RawSolution(values=values, objective=objective, status=status)


def parse_solution_file(path) -> RawSolution:
    p = str(path)
    if p.endswith(".xml"):
        return parse_solution_xml(path)
    with open(path) as fh:
        head = fh.read(200).lstrip()
    if head.startswith("<?xml") or head.startswith("<CPLEXSolution"):
        return parse_solution_xml(path)
    return parse_solution_text(path)
