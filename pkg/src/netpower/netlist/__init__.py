"""Circuit IR, parsers and graph views."""
from .types import (Cell, CombinationalLoopError, DanglingNetError, LibCell, Library, MultipleDriverError,
                    N_NODE_TYPES, Net, Netlist, NetlistError, NodeType, ParseError, PowerGroup, Stage,
                    UnknownCellError)
from .builder import NetlistBuilder, clock_order, topo_order
from .liberty import classify_cell, fixture_library, parse_liberty_lite, write_liberty_lite
from .verilog import parse_netlist, write_netlist
from .vcd import ToggleTrace, VcdError, parse_vcd, write_vcd
from .graph import DirectedCircuitGraph, ScopeError, build_graph, load_caps

__all__ = [
    "Cell", "CombinationalLoopError", "DanglingNetError", "LibCell", "Library", "MultipleDriverError",
    "N_NODE_TYPES", "Net", "Netlist", "NetlistError", "NodeType", "ParseError", "PowerGroup", "Stage",
    "UnknownCellError", "NetlistBuilder", "clock_order", "topo_order", "classify_cell",
    "fixture_library", "parse_liberty_lite", "write_liberty_lite", "parse_netlist", "write_netlist",
    "ToggleTrace", "VcdError", "parse_vcd", "write_vcd", "DirectedCircuitGraph", "ScopeError",
    "build_graph", "load_caps",
]
