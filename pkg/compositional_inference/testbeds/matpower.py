"""
Reader for MATPOWER case files and the bus admittance matrix.

A case file is a MATLAB function assigning fields of ``mpc``::

    function mpc = case9
    mpc.baseMVA = 100;
    mpc.bus = [
        1   3   0   0   0   0   1   1   0   345 1   1.1 0.9;
        ...
    ];

The grammar accepts numeric scalars, quoted strings, numeric matrices
(rows separated by ``;``, ``Inf``/``NaN`` allowed) and cell arrays. Only
``baseMVA``, ``bus``, ``gen`` and ``branch`` are used; any other field is
skipped with a warning.
"""

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pyparsing as pp

from compositional_inference.exceptions import InvalidParams, IoError, ParseError
from compositional_inference.testbeds import data_dir

logger = logging.getLogger(__name__)

# Column indices of the MATPOWER tables
BUS_I, BUS_TYPE, PD, QD, GS, BS = 0, 1, 2, 3, 4, 5
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
GEN_BUS, PG, GEN_STATUS = 0, 1, 7

MIN_COLUMNS = {"bus": 6, "gen": 8, "branch": 11}
USED_FIELDS = ("baseMVA", "bus", "gen", "branch")
QUIET_FIELDS = ("version",)


@dataclass(frozen=True)
class _Value:
    kind: str
    payload: Any


def _grammar() -> pp.ParserElement:
    lbrack, rbrack, semi, eq, comma = map(pp.Suppress, "[];=,")
    number = pp.Regex(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
    special = pp.Regex(r"[+-]?(?:Inf|inf|NaN|nan)\b")
    scalar = (special | number).set_parse_action(lambda t: float(t[0]))

    row = pp.Group(pp.OneOrMore(scalar + pp.Optional(comma)))
    matrix = (lbrack + pp.ZeroOrMore(semi | row) + rbrack).set_parse_action(
        lambda t: _Value("matrix", [r.as_list() for r in t])
    )
    string = (pp.QuotedString("'", esc_quote="''") | pp.QuotedString('"')).set_parse_action(
        lambda t: _Value("string", t[0])
    )
    cell = pp.original_text_for(pp.nested_expr("{", "}")).add_parse_action(lambda t: _Value("cell", t[0]))
    single = scalar.copy().add_parse_action(lambda t: _Value("scalar", t[0]))

    identifier = pp.Word(pp.alphas, pp.alphanums + "_")
    target = pp.Suppress(pp.Keyword("mpc") + ".") + identifier
    statement = pp.Group(target + eq + (matrix | string | cell | single) + pp.Optional(semi))
    header = pp.Suppress(pp.Keyword("function") + pp.rest_of_line)

    case = pp.Optional(header) + pp.ZeroOrMore(statement) + pp.StringEnd()
    case.ignore(pp.Regex(r"%.*"))
    return case


_CASE_GRAMMAR = _grammar()


@dataclass(frozen=True)
class GridCase:
    """Bus, generator and branch tables of one network, in MATPOWER column layout."""

    name: str
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    source: Optional[str] = None
    sha256: Optional[str] = None

    def __post_init__(self):
        if not self.base_mva > 0:
            raise InvalidParams(f"baseMVA must be positive, got {self.base_mva}")
        for field_name in ("bus", "gen", "branch"):
            table = np.atleast_2d(np.asarray(getattr(self, field_name), dtype=float))
            if table.size and table.shape[1] < MIN_COLUMNS[field_name]:
                raise InvalidParams(
                    f"mpc.{field_name} needs at least {MIN_COLUMNS[field_name]} columns, got {table.shape[1]}"
                )
            object.__setattr__(self, field_name, table)
        if self.bus.size == 0:
            raise InvalidParams("A case needs at least one bus")
        ids = self.bus[:, BUS_I].astype(int)
        if len(set(ids.tolist())) != ids.shape[0]:
            raise InvalidParams("Bus numbers must be unique")
        known = set(ids.tolist())
        for row in self.branch:
            for end in (int(row[F_BUS]), int(row[T_BUS])):
                if end not in known:
                    logger.error(f"Branch {int(row[F_BUS])}-{int(row[T_BUS])} references missing bus {end}")
                    raise InvalidParams(f"Branch endpoint {end} is not a bus of case '{self.name}'")
        for row in self.gen:
            if int(row[GEN_BUS]) not in known:
                raise InvalidParams(f"Generator at missing bus {int(row[GEN_BUS])}")

    @property
    def n_bus(self) -> int:
        return self.bus.shape[0]

    @cached_property
    def bus_ids(self) -> List[int]:
        return self.bus[:, BUS_I].astype(int).tolist()

    @cached_property
    def index_of(self) -> Dict[int, int]:
        return {bus_id: i for i, bus_id in enumerate(self.bus_ids)}

    @property
    def generator_buses(self) -> List[int]:
        """Indices of buses with at least one in-service generator, ascending."""
        active = self.gen[self.gen[:, GEN_STATUS] > 0] if self.gen.size else self.gen
        return sorted({self.index_of[int(bus)] for bus in active[:, GEN_BUS]}) if active.size else []

    @property
    def p_load(self) -> np.ndarray:
        return self.bus[:, PD].copy()

    @property
    def p_gen(self) -> np.ndarray:
        out = np.zeros(self.n_bus)
        for row in self.gen:
            if row[GEN_STATUS] > 0:
                out[self.index_of[int(row[GEN_BUS])]] += row[PG]
        return out

    @cached_property
    def ybus(self) -> np.ndarray:
        return admittance_matrix(self)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "n_bus": self.n_bus,
            "n_branch": int(self.branch.shape[0]),
            "generator_buses": [self.bus_ids[i] for i in self.generator_buses],
            "source": self.source,
            "sha256": self.sha256,
        }


def admittance_matrix(case: GridCase) -> np.ndarray:
    """
    Bus admittance matrix Y_bus in per unit.

    Each in-service branch with series admittance y = 1/(r + jx), total line
    charging b and complex tap t = ratio·e^{j·shift} (ratio 0 meaning 1)
    contributes

        Y_ff += (y + jb/2)/|t|²    Y_ft −= y/conj(t)
        Y_tt += y + jb/2           Y_tf −= y/t

    and bus shunts (Gs + jBs)/baseMVA are added to the diagonal.
    """
    n = case.n_bus
    y_bus = np.zeros((n, n), dtype=complex)
    branch = case.branch[case.branch[:, BR_STATUS] > 0] if case.branch.size else case.branch
    if branch.size:
        f = np.array([case.index_of[int(b)] for b in branch[:, F_BUS]])
        t = np.array([case.index_of[int(b)] for b in branch[:, T_BUS]])
        z = branch[:, BR_R] + 1j * branch[:, BR_X]
        if np.any(z == 0):
            raise InvalidParams("Branches with zero impedance are not supported")
        ys = 1.0 / z
        ratio = np.where(branch[:, TAP] == 0, 1.0, branch[:, TAP])
        tap = ratio * np.exp(1j * np.pi / 180.0 * branch[:, SHIFT])
        ytt = ys + 0.5j * branch[:, BR_B]
        yff = ytt / (tap * np.conj(tap))
        np.add.at(y_bus, (f, f), yff)
        np.add.at(y_bus, (t, t), ytt)
        np.add.at(y_bus, (f, t), -ys / np.conj(tap))
        np.add.at(y_bus, (t, f), -ys / tap)
    y_bus[np.diag_indices(n)] += (case.bus[:, GS] + 1j * case.bus[:, BS]) / case.base_mva
    return y_bus


def parse_matpower(text: str, name: str = "case", source: Optional[str] = None, sha256: Optional[str] = None) -> GridCase:
    """
    Parse MATPOWER case text.

    Raises:
        ParseError: On a syntax error, with its line and column
        InvalidParams: If a required table is missing or inconsistent
    """
    try:
        statements = _CASE_GRAMMAR.parse_string(text, parse_all=True)
    except pp.ParseException as e:
        logger.error(f"Case '{name}' does not parse: {e.msg} at line {e.lineno}, column {e.col}")
        raise ParseError(f"Invalid MATPOWER case '{name}': {e.msg}", e.lineno, e.col) from None

    fields: Dict[str, _Value] = {}
    for field_name, value in statements:
        if field_name in USED_FIELDS:
            fields[field_name] = value
        elif field_name not in QUIET_FIELDS:
            logger.warning(f"Ignoring unsupported field mpc.{field_name} in case '{name}'")
    logger.debug(f"Parsed case '{name}' with fields {sorted(fields)}")

    for required in ("baseMVA", "bus", "branch"):
        if required not in fields:
            raise InvalidParams(f"Case '{name}' lacks mpc.{required}")
    base = fields["baseMVA"]
    if base.kind != "scalar":
        raise InvalidParams(f"mpc.baseMVA must be a number in case '{name}'")
    tables = {}
    for table in ("bus", "gen", "branch"):
        value = fields.get(table)
        if value is None:
            tables[table] = np.zeros((0, MIN_COLUMNS[table]))
            continue
        if value.kind != "matrix":
            raise InvalidParams(f"mpc.{table} must be a numeric matrix in case '{name}'")
        widths = {len(row) for row in value.payload}
        if len(widths) > 1:
            raise InvalidParams(f"mpc.{table} rows have differing lengths {sorted(widths)} in case '{name}'")
        tables[table] = np.array(value.payload, dtype=float) if value.payload else np.zeros((0, MIN_COLUMNS[table]))
    return GridCase(name, float(base.payload), tables["bus"], tables["gen"], tables["branch"], source, sha256)


def case_path(name: Union[str, Path]) -> Path:
    """Resolve a bundled case name (``case9``) or pass an explicit path through."""
    path = Path(name)
    if path.suffix == ".m" or path.exists():
        return path
    return data_dir() / f"{name}.m"


def load_matpower_case(path: Union[str, Path]) -> GridCase:
    """
    Load a MATPOWER case file and record its SHA-256 digest.

    Args:
        path: File path, or the name of a bundled case such as ``case14``

    Returns:
        Parsed case

    Raises:
        IoError: If the file is missing or unreadable
    """
    resolved = case_path(path)
    try:
        raw = resolved.read_bytes()
    except OSError as e:
        logger.error(f"Cannot read MATPOWER case '{resolved}': {e}")
        raise IoError(f"Cannot read MATPOWER case '{resolved}': {e}") from e
    digest = hashlib.sha256(raw).hexdigest()
    return parse_matpower(raw.decode("utf-8"), resolved.stem, str(resolved), digest)
