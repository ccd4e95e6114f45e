"""Per-scope directed graph view of a netlist (one node per cell, driver -> sink edges)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .types import Library, Netlist, NetlistError, NodeType, Stage, is_under


class ScopeError(NetlistError):
    pass


@dataclass(frozen=True, eq=False)
class DirectedCircuitGraph:
    scope: str
    stage: Stage
    cell_ids: np.ndarray        # (n,) ids into the owning netlist
    paths: tuple                # instance paths, aligned with cell_ids
    node_type: np.ndarray       # (n,) NodeType values
    internal_energy: np.ndarray  # (n,) pJ
    leakage: np.ndarray         # (n,) nW
    input_cap: np.ndarray       # (n,) fF summed over input pins
    load_cap: np.ndarray        # (n,) fF: output wire cap + sink pin caps
    out_net: np.ndarray         # (n,) output net id per node
    edges: np.ndarray           # (2, E) local src, dst
    boundary_nets: tuple        # nets entering the scope from outside

    @property
    def n_nodes(self) -> int:
        return int(self.cell_ids.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[1])

    def to_json(self) -> dict:
        return {
            "scope": self.scope,
            "stage": self.stage.value,
            "nodes": [
                {"path": p, "cell": int(c), "type": NodeType(int(t)).name,
                 "internal_energy": float(e), "leakage": float(lk), "input_cap": float(ic),
                 "load_cap": float(lc), "out_net": int(o)}
                for p, c, t, e, lk, ic, lc, o in zip(self.paths, self.cell_ids, self.node_type,
                                                    self.internal_energy, self.leakage,
                                                    self.input_cap, self.load_cap, self.out_net)
            ],
            "edges": self.edges.T.tolist(),
            "boundary_nets": list(self.boundary_nets),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "DirectedCircuitGraph":
        nodes = rec["nodes"]
        edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2).T
        return cls(
            scope=rec["scope"],
            stage=Stage(rec["stage"]),
            cell_ids=np.array([n["cell"] for n in nodes], dtype=np.int64),
            paths=tuple(n["path"] for n in nodes),
            node_type=np.array([NodeType[n["type"]] for n in nodes], dtype=np.int64),
            internal_energy=np.array([n["internal_energy"] for n in nodes], dtype=np.float64),
            leakage=np.array([n["leakage"] for n in nodes], dtype=np.float64),
            input_cap=np.array([n["input_cap"] for n in nodes], dtype=np.float64),
            load_cap=np.array([n["load_cap"] for n in nodes], dtype=np.float64),
            out_net=np.array([n["out_net"] for n in nodes], dtype=np.int64),
            edges=np.ascontiguousarray(edges),
            boundary_nets=tuple(rec["boundary_nets"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class CellTable:
    """Flat per-cell and per-pin arrays of one netlist, shared by every scope's graph build."""

    node_type: np.ndarray        # (cells,)
    internal_energy: np.ndarray
    leakage: np.ndarray
    input_cap: np.ndarray        # summed over input and clock pins
    out_net: np.ndarray
    driver: np.ndarray           # (nets,) driving cell, -1 if none
    pin_cell: np.ndarray         # (pins,) data pins in order, then the clock pin, per cell
    pin_net: np.ndarray
    pin_cap: np.ndarray          # input cap of the receiving pin


def cell_table(netlist: Netlist, library: Library) -> CellTable:
    libs = [library[c.lib_cell] for c in netlist.cells]
    pin_cell: List[int] = []
    pin_net: List[int] = []
    for c in netlist.cells:
        pins = c.input_nets + ((c.clock_net,) if c.clock_net is not None else ())
        pin_cell.extend([c.id] * len(pins))
        pin_net.extend(pins)
    pin_cell_a = np.array(pin_cell, dtype=np.int64)
    per_cell_cap = np.array([l.input_cap for l in libs], dtype=np.float64)
    n_pins = np.bincount(pin_cell_a, minlength=len(libs))
    return CellTable(
        node_type=np.array([int(l.node_type) for l in libs], dtype=np.int64),
        internal_energy=np.array([l.internal_energy for l in libs], dtype=np.float64),
        leakage=np.array([l.leakage for l in libs], dtype=np.float64),
        input_cap=per_cell_cap * n_pins,
        out_net=np.array([c.output_net for c in netlist.cells], dtype=np.int64),
        driver=np.array(netlist.driver, dtype=np.int64),
        pin_cell=pin_cell_a,
        pin_net=np.array(pin_net, dtype=np.int64),
        pin_cap=per_cell_cap[pin_cell_a] if pin_cell_a.size else np.zeros(0),
    )


def load_caps(netlist: Netlist, library: Library, table: Optional[CellTable] = None) -> np.ndarray:
    """Per-net load capacitance (fF): wire cap plus the input caps of every sink pin."""
    table = table or cell_table(netlist, library)
    cap = np.array([n.wire_cap for n in netlist.nets], dtype=np.float64)
    np.add.at(cap, table.pin_net, table.pin_cap)
    return cap


def build_graph(netlist: Netlist, scope: str, library: Library,
                cell_ids: Optional[Sequence[int]] = None,
                net_load: Optional[np.ndarray] = None,
                table: Optional[CellTable] = None) -> DirectedCircuitGraph:
    """Graph over the cells under ``scope`` (or exactly ``cell_ids`` when given).

    Pass ``net_load`` and ``table`` when building many scopes of one netlist.
    """
    if cell_ids is None:
        if scope not in netlist.hierarchy:
            raise ScopeError(f"unknown scope '{scope}'")
        ids = [c.id for c in netlist.cells if is_under(c.scope, scope)]
    else:
        ids = sorted(int(i) for i in cell_ids)
    if not ids:
        raise ScopeError(f"scope '{scope}' contains no cells")
    table = table or cell_table(netlist, library)
    if net_load is None:
        net_load = load_caps(netlist, library, table)
    ids_a = np.array(ids, dtype=np.int64)
    n = ids_a.size
    local = np.full(len(netlist.cells), -1, dtype=np.int64)
    local[ids_a] = np.arange(n)
    sel = local[table.pin_cell] >= 0
    k = local[table.pin_cell[sel]]
    nets = table.pin_net[sel]
    d = table.driver[nets]
    j = np.where(d >= 0, local[np.maximum(d, 0)], -1)
    inner = j >= 0
    # one edge per (driver, sink) pair, sorted by source then sink
    key = np.unique(j[inner] * n + k[inner])
    edges = np.stack([key // n, key % n]) if key.size else np.zeros((2, 0), dtype=np.int64)
    boundary = sorted({netlist.nets[int(x)].name for x in np.unique(nets[~inner])})
    out_net = table.out_net[ids_a]
    return DirectedCircuitGraph(
        scope=scope,
        stage=netlist.stage,
        cell_ids=ids_a,
        paths=tuple(netlist.cells[i].instance_path for i in ids),
        node_type=table.node_type[ids_a],
        internal_energy=table.internal_energy[ids_a],
        leakage=table.leakage[ids_a],
        input_cap=table.input_cap[ids_a],
        load_cap=net_load[out_net],
        out_net=out_net,
        edges=np.ascontiguousarray(edges),
        boundary_nets=tuple(boundary),
    )
