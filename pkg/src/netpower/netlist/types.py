"""Core circuit data types: cell taxonomy, library records, flattened netlists."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple


class NetlistError(ValueError):
    """Base class for structural netlist problems."""


class ParseError(NetlistError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        super().__init__(f"{msg} (line {line}, col {col})" if line else msg)


class UnknownCellError(NetlistError):
    pass


class MultipleDriverError(NetlistError):
    def __init__(self, net: str):
        self.net = net
        super().__init__(f"net '{net}' is multiply driven")


class DanglingNetError(NetlistError):
    def __init__(self, net: str, detail: str = "undeclared net reference"):
        self.net = net
        super().__init__(f"{detail}: '{net}'")


class CombinationalLoopError(NetlistError):
    pass


class NodeType(enum.IntEnum):
    INV = 0
    BUF = 1
    AND = 2
    OR = 3
    NAND = 4
    NOR = 5
    XOR = 6
    XNOR = 7
    MUX = 8
    AOI = 9
    OAI = 10
    ADDER = 11
    TIE = 12
    DFF = 13
    DFFRS = 14
    LATCH = 15
    ICG = 16
    CK = 17

    @property
    def is_register(self) -> bool:
        return self in REGISTER_TYPES

    @property
    def is_clock(self) -> bool:
        return self in CLOCK_TYPES

    @property
    def group(self) -> "PowerGroup":
        if self in REGISTER_TYPES:
            return PowerGroup.REGISTER
        if self in CLOCK_TYPES:
            return PowerGroup.CLOCK_TREE
        return PowerGroup.COMBINATIONAL


N_NODE_TYPES = len(NodeType)
REGISTER_TYPES = frozenset({NodeType.DFF, NodeType.DFFRS, NodeType.LATCH})
CLOCK_TYPES = frozenset({NodeType.ICG, NodeType.CK})


class PowerGroup(enum.IntEnum):
    COMBINATIONAL = 0
    REGISTER = 1
    CLOCK_TREE = 2


class Stage(str, enum.Enum):
    G = "G"
    G_PLUS = "G_PLUS"
    P = "P"


@dataclass(frozen=True)
class LibCell:
    """One standard cell, reduced to scalar power/cap figures.

    Units: internal_energy and clock_pin_energy in pJ, leakage in nW,
    input_cap and drive_cap_limit in fF.  ``function`` is a Boolean
    expression over ``inputs``; for registers it is the next-state
    function, for ICGs the enable term, and unused for CK cells.
    """

    name: str
    node_type: NodeType
    internal_energy: float
    leakage: float
    input_cap: float
    clock_pin_energy: float = 0.0
    drive_cap_limit: float = 0.0
    inputs: Tuple[str, ...] = ()
    output: str = "Y"
    clock_pin: Optional[str] = None
    function: str = ""

    @property
    def pins(self) -> Tuple[str, ...]:
        extra = (self.clock_pin,) if self.clock_pin else ()
        return self.inputs + extra + (self.output,)


@dataclass(frozen=True)
class Library:
    cells: Mapping[str, LibCell]
    voltage: float = 1.0
    frequency: float = 1e9
    name: str = "lib"

    def __getitem__(self, name: str) -> LibCell:
        try:
            return self.cells[name]
        except KeyError:
            raise UnknownCellError(f"unknown library cell '{name}'") from None

    def __contains__(self, name: object) -> bool:
        return name in self.cells

    def by_type(self, node_type: NodeType) -> List[LibCell]:
        return [c for c in self.cells.values() if c.node_type == node_type]


@dataclass(frozen=True)
class Net:
    id: int
    name: str
    wire_cap: float = 0.0


@dataclass(frozen=True)
class Cell:
    id: int
    instance_path: str
    lib_cell: str
    input_nets: Tuple[int, ...]
    output_net: int
    clock_net: Optional[int] = None

    @property
    def scope(self) -> str:
        """Hierarchy path of the module instance that owns this cell."""
        return self.instance_path.rsplit(".", 1)[0]


def is_under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix + ".")


@dataclass(frozen=True, eq=False)
class Netlist:
    """A flattened, validated netlist.

    Built through :class:`~netpower.netlist.builder.NetlistBuilder`; never
    mutated afterwards.  Equality is structural and name based (see
    :meth:`signature`), so id renumbering does not break it.
    """

    stage: Stage
    top: str
    cells: Tuple[Cell, ...]
    nets: Tuple[Net, ...]
    primary_inputs: Tuple[int, ...]
    primary_outputs: Tuple[int, ...]
    clock_root: Optional[int]
    hierarchy: Tuple[str, ...]
    module_names: Mapping[str, str] = field(default_factory=dict)

    # -- lookups -----------------------------------------------------------
    @cached_property
    def net_index(self) -> Dict[str, int]:
        return {n.name: n.id for n in self.nets}

    @cached_property
    def cell_index(self) -> Dict[str, int]:
        return {c.instance_path: c.id for c in self.cells}

    def net_id(self, name: str) -> int:
        try:
            return self.net_index[name]
        except KeyError:
            raise DanglingNetError(name, "unknown net") from None

    @cached_property
    def driver(self) -> Tuple[int, ...]:
        """Driving cell id per net, -1 for primary inputs / undriven nets."""
        drv = [-1] * len(self.nets)
        for c in self.cells:
            drv[c.output_net] = c.id
        return tuple(drv)

    @cached_property
    def sinks(self) -> Tuple[Tuple[Tuple[int, int], ...], ...]:
        """Per net: (cell id, pin index) pairs; pin index -1 is the clock pin."""
        acc: List[List[Tuple[int, int]]] = [[] for _ in self.nets]
        for c in self.cells:
            for k, n in enumerate(c.input_nets):
                acc[n].append((c.id, k))
            if c.clock_net is not None:
                acc[c.clock_net].append((c.id, -1))
        return tuple(tuple(s) for s in acc)

    def fanout(self, net: int) -> int:
        return len(self.sinks[net])

    @cached_property
    def clock_nets(self) -> frozenset:
        """Nets that carry a clock: the root plus CK/ICG outputs (set by builder)."""
        out = set()
        if self.clock_root is not None:
            out.add(self.clock_root)
        for c in self.cells:
            if c.clock_net is not None:
                out.add(c.clock_net)
        return frozenset(out)

    def cells_under(self, prefix: str) -> List[Cell]:
        return [c for c in self.cells if is_under(c.scope, prefix)]

    # -- equality ------------------------------------------------------------
    def signature(self) -> tuple:
        nn = self.nets
        cells = sorted(
            (
                c.instance_path,
                c.lib_cell,
                tuple(nn[i].name for i in c.input_nets),
                nn[c.output_net].name,
                None if c.clock_net is None else nn[c.clock_net].name,
            )
            for c in self.cells
        )
        nets = sorted((n.name, n.wire_cap) for n in self.nets)
        return (
            self.stage.value,
            self.top,
            tuple(cells),
            tuple(nets),
            tuple(nn[i].name for i in self.primary_inputs),
            tuple(nn[i].name for i in self.primary_outputs),
            None if self.clock_root is None else nn[self.clock_root].name,
            tuple(sorted(self.hierarchy)),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Netlist):
            return NotImplemented
        return self.signature() == other.signature()

    def __hash__(self) -> int:
        return hash(self.signature())

    def __repr__(self) -> str:
        return (f"Netlist(top={self.top!r}, stage={self.stage.value}, cells={len(self.cells)}, "
                f"nets={len(self.nets)})")

    def type_histogram(self, library: Library) -> Dict[NodeType, int]:
        hist: Dict[NodeType, int] = {t: 0 for t in NodeType}
        for c in self.cells:
            hist[library[c.lib_cell].node_type] += 1
        return hist


def histogram_distance(a: Mapping[NodeType, int], b: Mapping[NodeType, int]) -> int:
    return sum(abs(a.get(t, 0) - b.get(t, 0)) for t in NodeType)


def relative_net_name(owner_scope: str, top: str, local: str) -> str:
    """Canonical net name for ``local`` declared in module instance ``owner_scope``."""
    if owner_scope == top:
        return local
    return owner_scope[len(top) + 1:] + "." + local


def net_owner(net_name: str, top: str) -> str:
    if "." not in net_name:
        return top
    return top + "." + net_name.rsplit(".", 1)[0]


def common_scope(paths: Sequence[str]) -> str:
    """Deepest hierarchy path that is an ancestor-or-self of every path."""
    parts = [p.split(".") for p in paths]
    out = []
    for column in zip(*parts):
        if all(x == column[0] for x in column):
            out.append(column[0])
        else:
            break
    return ".".join(out)
