"""Two-valued, cycle-accurate gate-level simulation.

Each netlist is compiled once into straight-line Python (one statement per
cell) and then stepped cycle by cycle.  Per cycle:

1. clock activity is propagated root-outwards; an ICG passes the clock when
   its enable held 1 in the previous cycle (registered enable);
2. every register whose clock pin is active loads its next-state function of
   the previous cycle's pin values, otherwise it holds;
3. primary inputs take the stimulus values;
4. combinational cells settle in topological order;
5. clock nets flip when active, so a clock net toggles exactly when active.

All nets start at 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .netlist.builder import clock_order, topo_order
from .netlist.expr import parse_expr, to_python
from .netlist.types import Library, Netlist, NetlistError, NodeType, Stage
from .netlist.vcd import ToggleTrace, write_vcd


class SimulationError(NetlistError):
    pass


@dataclass(frozen=True)
class Stimulus:
    """Per-input bit streams.  The clock root is driven by the simulator and may be omitted."""

    inputs: Mapping[str, np.ndarray]
    n_cycles: int
    seed: Optional[int] = None

    def __post_init__(self):
        for name, row in self.inputs.items():
            if len(row) != self.n_cycles:
                raise SimulationError(f"stimulus for '{name}' has {len(row)} cycles, expected {self.n_cycles}")

    def row(self, name: str) -> np.ndarray:
        return np.asarray(self.inputs[name], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class WaveTable:
    names: tuple
    values: np.ndarray        # uint8 (n_nets, n_cycles)
    clock_net_mask: np.ndarray  # bool (n_nets,)

    @property
    def n_cycles(self) -> int:
        return int(self.values.shape[1])

    @property
    def toggles(self) -> np.ndarray:
        prev = np.zeros_like(self.values)
        prev[:, 1:] = self.values[:, :-1]
        return self.values ^ prev

    @property
    def clock_active(self) -> np.ndarray:
        """Per net and cycle: 1 when a clock net carries an active edge (0 on data nets)."""
        return self.toggles * self.clock_net_mask[:, None].astype(np.uint8)

    def trace(self) -> ToggleTrace:
        return ToggleTrace(self.names, self.toggles)

    def to_vcd(self, clock_period: int = 1000, top: str = "top") -> str:
        return write_vcd(self.names, self.values, clock_period=clock_period, top=top)

    def toggle_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["net", "cycle", "bit"])
        tg = self.toggles
        for i, name in enumerate(self.names):
            for c in range(tg.shape[1]):
                w.writerow([name, c, int(tg[i, c])])
        return buf.getvalue()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WaveTable):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]


@dataclass
class CompiledSim:
    netlist: Netlist
    data_inputs: List[int]
    fn: object
    source: str = field(repr=False, default="")

    def run(self, stimulus: Stimulus, n_cycles: Optional[int] = None) -> WaveTable:
        n_cycles = stimulus.n_cycles if n_cycles is None else n_cycles
        if n_cycles > stimulus.n_cycles:
            raise SimulationError("stimulus shorter than requested cycle count")
        names = self.netlist.nets
        rows = []
        for n in self.data_inputs:
            name = names[n].name
            if name not in stimulus.inputs:
                raise SimulationError(f"stimulus does not cover primary input '{name}'")
            row = np.asarray(stimulus.inputs[name])[:n_cycles]
            if row.size and (row.min() < 0 or row.max() > 1):
                raise SimulationError(f"non-binary value on input '{name}' (X/Z unsupported)")
            rows.append(row.astype(np.uint8).tolist())
        rec: List[tuple] = []
        self.fn(rows, n_cycles, rec)
        if rec:
            values = np.array(rec, dtype=np.uint8).T.copy()
        else:
            values = np.zeros((len(names), 0), dtype=np.uint8)
        mask = np.zeros(len(names), dtype=bool)
        mask[list(self.netlist.clock_nets)] = True
        return WaveTable(tuple(n.name for n in names), values, mask)


def compile_netlist(netlist: Netlist, library: Library) -> CompiledSim:
    nets = netlist.nets
    v = [f"n{i}" for i in range(len(nets))]
    a = {}  # clock net -> activity variable
    body: List[str] = []
    clock_root = netlist.clock_root
    data_inputs = [p for p in netlist.primary_inputs if p != clock_root]

    # (1) clock activity
    if clock_root is not None:
        a[clock_root] = "1"
    for cid in clock_order(netlist, library):
        c = netlist.cells[cid]
        lib = library[c.lib_cell]
        up = a.get(c.clock_net)
        if up is None:
            raise SimulationError(f"clock pin of '{c.instance_path}' has no activity source")
        var = f"a{c.output_net}"
        if lib.node_type == NodeType.ICG:
            refs = dict(zip(lib.inputs, (v[n] for n in c.input_nets)))
            body.append(f"{var} = {up} & {to_python(parse_expr(lib.function), refs)}")
        else:
            body.append(f"{var} = {up}")
        a[c.output_net] = var

    # (2) registers, two-phase so that Q->D chains see previous values
    regs = [c for c in netlist.cells if library[c.lib_cell].node_type.is_register]
    for c in regs:
        lib = library[c.lib_cell]
        refs = dict(zip(lib.inputs, (v[n] for n in c.input_nets)))
        nxt = to_python(parse_expr(lib.function), refs)
        body.append(f"t{c.output_net} = {nxt} if {a[c.clock_net]} else {v[c.output_net]}")
    for c in regs:
        body.append(f"{v[c.output_net]} = t{c.output_net}")

    # (3) primary inputs
    for k, n in enumerate(data_inputs):
        body.append(f"{v[n]} = p{k}[c]")

    # (4) combinational logic
    for cid in topo_order(netlist, library):
        c = netlist.cells[cid]
        lib = library[c.lib_cell]
        refs = dict(zip(lib.inputs, (v[n] for n in c.input_nets)))
        body.append(f"{v[c.output_net]} = {to_python(parse_expr(lib.function), refs)}")

    # (5) clock nets
    for n, var in a.items():
        body.append(f"{v[n]} = {v[n]} ^ {var}" if var != "1" else f"{v[n]} = 1 - {v[n]}")

    lines = ["def _run(rows, n_cycles, rec):"]
    for k in range(len(data_inputs)):
        lines.append(f"    p{k} = rows[{k}]")
    for i in range(0, len(v), 64):
        lines.append("    " + " = ".join(v[i:i + 64]) + " = 0")
    lines.append("    append = rec.append")
    lines.append("    for c in range(n_cycles):")
    lines.extend("        " + s for s in body)
    # tuple literal of all nets; chunked to keep lines short
    tup = ", ".join(v) + ("," if len(v) == 1 else "")
    lines.append(f"        append(({tup}))")
    src = "\n".join(lines) + "\n"
    ns: Dict[str, object] = {}
    exec(compile(src, f"<sim:{netlist.top}>", "exec"), ns)
    return CompiledSim(netlist, data_inputs, ns["_run"], src)


def simulate(netlist: Netlist, library: Library, stimulus: Stimulus,
             n_cycles: Optional[int] = None) -> WaveTable:
    return compile_netlist(netlist, library).run(stimulus, n_cycles)


def random_stimulus(netlist: Netlist, n_cycles: int, seed: int, p: float = 0.5) -> Stimulus:
    rng = np.random.default_rng(seed)
    ins = {}
    for n in netlist.primary_inputs:
        if n == netlist.clock_root:
            continue
        ins[netlist.nets[n].name] = (rng.random(n_cycles) < p).astype(np.uint8)
    return Stimulus(ins, n_cycles, seed)


@dataclass(frozen=True)
class EquivReport:
    equivalent: bool
    n_cycles: int
    compared: tuple
    cycle: Optional[int] = None
    net: Optional[str] = None

    def __bool__(self) -> bool:
        return self.equivalent


def cosim_equiv(a: Netlist, b: Netlist, library: Library, n_vectors: int = 1000,
                seed: int = 0) -> EquivReport:
    """Drive both netlists with the same random vectors and compare observables.

    Primary outputs are always compared.  Register outputs are compared by
    instance path as well unless either side is a post-layout netlist.
    """
    names_a = [a.nets[i].name for i in a.primary_inputs]
    names_b = [b.nets[i].name for i in b.primary_inputs]
    outs_a = [a.nets[i].name for i in a.primary_outputs]
    outs_b = [b.nets[i].name for i in b.primary_outputs]
    if sorted(names_a) != sorted(names_b) or sorted(outs_a) != sorted(outs_b):
        raise SimulationError("primary ports differ between the two netlists")
    ra = a.nets[a.clock_root].name if a.clock_root is not None else None
    rb = b.nets[b.clock_root].name if b.clock_root is not None else None
    if ra is not None and rb is not None and ra != rb:
        raise SimulationError("clock roots differ")
    stim = random_stimulus(a if ra is not None else b, n_vectors, seed)
    wa = simulate(a, library, stim)
    wb = simulate(b, library, stim)
    pairs = [(n, a.net_id(n), b.net_id(n)) for n in outs_a]
    if a.stage != Stage.P and b.stage != Stage.P:
        ra_regs = {c.instance_path: c.output_net for c in a.cells if library[c.lib_cell].node_type.is_register}
        rb_regs = {c.instance_path: c.output_net for c in b.cells if library[c.lib_cell].node_type.is_register}
        if set(ra_regs) != set(rb_regs):
            raise SimulationError("register instance paths differ")
        pairs += [(f"{p}/Q", ra_regs[p], rb_regs[p]) for p in sorted(ra_regs)]
    if pairs:
        ia = np.array([p[1] for p in pairs])
        ib = np.array([p[2] for p in pairs])
        diff = wa.values[ia] != wb.values[ib]
        if diff.any():
            cyc = int(np.nonzero(diff.any(axis=0))[0][0])
            k = int(np.nonzero(diff[:, cyc])[0][0])
            return EquivReport(False, n_vectors, tuple(p[0] for p in pairs), cyc, pairs[k][0])
    return EquivReport(True, n_vectors, tuple(p[0] for p in pairs))


__all__ = ["Stimulus", "WaveTable", "simulate", "compile_netlist", "random_stimulus", "cosim_equiv",
           "EquivReport", "SimulationError", "write_vcd"]
