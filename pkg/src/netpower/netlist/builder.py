"""Mutable, name-keyed netlist construction with validation on ``build``."""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .types import (Cell, CombinationalLoopError, DanglingNetError, Library, MultipleDriverError,
                    Net, Netlist, NetlistError, NodeType, Stage, is_under, relative_net_name)


@dataclass
class CellSpec:
    lib: str
    inputs: List[str]
    output: str
    clock: Optional[str] = None

    def nets(self) -> List[str]:
        out = list(self.inputs) + [self.output]
        if self.clock is not None:
            out.append(self.clock)
        return out


@dataclass
class NetlistBuilder:
    top: str
    stage: Stage = Stage.G
    nets: Dict[str, float] = field(default_factory=dict)
    cells: Dict[str, CellSpec] = field(default_factory=dict)
    primary_inputs: List[str] = field(default_factory=list)
    primary_outputs: List[str] = field(default_factory=list)
    hierarchy: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.hierarchy.setdefault(self.top, self.top)
        self._counter = 0

    @classmethod
    def from_netlist(cls, netlist: Netlist) -> "NetlistBuilder":
        b = cls(top=netlist.top, stage=netlist.stage)
        names = [n.name for n in netlist.nets]
        for n in netlist.nets:
            b.nets[n.name] = n.wire_cap
        for c in netlist.cells:
            b.cells[c.instance_path] = CellSpec(
                lib=c.lib_cell,
                inputs=[names[i] for i in c.input_nets],
                output=names[c.output_net],
                clock=None if c.clock_net is None else names[c.clock_net],
            )
        b.primary_inputs = [names[i] for i in netlist.primary_inputs]
        b.primary_outputs = [names[i] for i in netlist.primary_outputs]
        for path in netlist.hierarchy:
            b.hierarchy[path] = netlist.module_names.get(path, path.rsplit(".", 1)[-1])
        return b

    # -- editing -------------------------------------------------------------
    def add_net(self, name: str, wire_cap: float = 0.0) -> str:
        if name not in self.nets:
            self.nets[name] = wire_cap
        return name

    def add_scope(self, path: str, module_name: Optional[str] = None) -> None:
        parts = path.split(".")
        for k in range(1, len(parts) + 1):
            p = ".".join(parts[:k])
            if p not in self.hierarchy:
                self.hierarchy[p] = parts[k - 1] if p != path or module_name is None else module_name
        if module_name is not None:
            self.hierarchy[path] = module_name

    def add_cell(self, path: str, lib: str, inputs: Sequence[str], output: str,
                 clock: Optional[str] = None) -> str:
        if path in self.cells:
            raise NetlistError(f"duplicate instance '{path}'")
        self.add_scope(path.rsplit(".", 1)[0])
        self.cells[path] = CellSpec(lib, list(inputs), output, clock)
        return path

    def remove_cell(self, path: str) -> CellSpec:
        return self.cells.pop(path)

    def fresh_net(self, owner_scope: str, stem: str) -> str:
        while True:
            self._counter += 1
            name = relative_net_name(owner_scope, self.top, f"{stem}{self._counter}")
            if name not in self.nets:
                self.nets[name] = 0.0
                return name

    def fresh_cell_path(self, scope: str, stem: str) -> str:
        while True:
            self._counter += 1
            path = f"{scope}.{stem}{self._counter}"
            if path not in self.cells:
                return path

    # -- queries -------------------------------------------------------------
    def sinks(self) -> Dict[str, List[Tuple[str, int]]]:
        acc: Dict[str, List[Tuple[str, int]]] = defaultdict(list)
        for path, spec in self.cells.items():
            for k, n in enumerate(spec.inputs):
                acc[n].append((path, k))
            if spec.clock is not None:
                acc[spec.clock].append((path, -1))
        return acc

    def drivers(self) -> Dict[str, str]:
        return {spec.output: path for path, spec in self.cells.items()}

    def rewire(self, path: str, pin: int, net: str) -> None:
        spec = self.cells[path]
        if pin == -1:
            spec.clock = net
        else:
            spec.inputs[pin] = net

    # -- freeze ----------------------------------------------------------------
    def build(self, library: Library) -> Netlist:
        for path in self.cells:
            self.add_scope(path.rsplit(".", 1)[0])
        net_ids = {name: i for i, name in enumerate(self.nets)}

        def nid(name: str) -> int:
            try:
                return net_ids[name]
            except KeyError:
                raise DanglingNetError(name) from None

        cells: List[Cell] = []
        for i, (path, spec) in enumerate(self.cells.items()):
            lib = library[spec.lib]
            if len(spec.inputs) != len(lib.inputs):
                raise NetlistError(f"instance '{path}' of {spec.lib} connects {len(spec.inputs)} "
                                   f"inputs, expected {len(lib.inputs)}")
            if (spec.clock is None) != (lib.clock_pin is None):
                raise NetlistError(f"instance '{path}' clock connection does not match {spec.lib}")
            cells.append(Cell(
                id=i,
                instance_path=path,
                lib_cell=spec.lib,
                input_nets=tuple(nid(n) for n in spec.inputs),
                output_net=nid(spec.output),
                clock_net=None if spec.clock is None else nid(spec.clock),
            ))
        pis = tuple(nid(n) for n in self.primary_inputs)
        pos = tuple(nid(n) for n in self.primary_outputs)

        driven = [False] * len(net_ids)
        for p in pis:
            if driven[p]:
                raise MultipleDriverError(self._name(p))
            driven[p] = True
        for c in cells:
            if driven[c.output_net]:
                raise MultipleDriverError(self._name(c.output_net))
            driven[c.output_net] = True
        for c in cells:
            for n in c.input_nets + ((c.clock_net,) if c.clock_net is not None else ()):
                if not driven[n]:
                    raise DanglingNetError(self._name(n), "undriven net")
        for p in pos:
            if not driven[p]:
                raise DanglingNetError(self._name(p), "undriven primary output")

        clock_root = self._check_clocks(cells, pis, library)
        self._check_acyclic(cells, library)
        return Netlist(
            stage=self.stage,
            top=self.top,
            cells=tuple(cells),
            nets=tuple(Net(i, name, cap) for i, (name, cap) in enumerate(self.nets.items())),
            primary_inputs=pis,
            primary_outputs=pos,
            clock_root=clock_root,
            hierarchy=tuple(self.hierarchy),
            module_names=dict(self.hierarchy),
        )

    def _name(self, i: int) -> str:
        return list(self.nets)[i]

    def _check_clocks(self, cells: List[Cell], pis: Tuple[int, ...], library: Library) -> Optional[int]:
        by_out = {c.output_net: c for c in cells}
        clock_src = {c.output_net for c in cells if library[c.lib_cell].node_type.is_clock}
        pi_set = set(pis)
        roots = set()
        for c in cells:
            for n in c.input_nets:
                if n in clock_src:
                    raise NetlistError(f"clock net '{self._name(n)}' used as data input of "
                                       f"'{c.instance_path}'")
            if c.clock_net is None:
                continue
            n = c.clock_net
            seen = set()
            while n not in pi_set:
                drv = by_out.get(n)
                if drv is None or not library[drv.lib_cell].node_type.is_clock:
                    raise NetlistError(f"clock pin of '{c.instance_path}' is not driven by the clock "
                                       f"network (net '{self._name(c.clock_net)}')")
                if n in seen:
                    raise CombinationalLoopError(f"loop in clock network at '{self._name(n)}'")
                seen.add(n)
                n = drv.clock_net
            roots.add(n)
        if len(roots) > 1:
            raise NetlistError("more than one clock root: " + ", ".join(sorted(self._name(r) for r in roots)))
        return next(iter(roots)) if roots else None

    def _check_acyclic(self, cells: List[Cell], library: Library) -> None:
        comb = [c for c in cells if not (library[c.lib_cell].node_type.is_register
                                         or library[c.lib_cell].node_type.is_clock)]
        by_out = {c.output_net: c.id for c in comb}
        indeg = {c.id: 0 for c in comb}
        succ: Dict[int, List[int]] = defaultdict(list)
        for c in comb:
            for n in set(c.input_nets):
                d = by_out.get(n)
                if d is not None:
                    indeg[c.id] += 1
                    succ[d].append(c.id)
        queue = deque(i for i, d in indeg.items() if d == 0)
        done = 0
        while queue:
            i = queue.popleft()
            done += 1
            for j in succ[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    queue.append(j)
        if done != len(comb):
            stuck = sorted(cells[i].instance_path for i, d in indeg.items() if d > 0)[:5]
            raise CombinationalLoopError("combinational loop through " + ", ".join(stuck))


def topo_order(netlist: Netlist, library: Library) -> List[int]:
    """Combinational cell ids in evaluation order (registers and clock cells excluded)."""
    comb = [c for c in netlist.cells
            if not (library[c.lib_cell].node_type.is_register or library[c.lib_cell].node_type.is_clock)]
    drv = netlist.driver
    indeg: Dict[int, int] = {}
    succ: Dict[int, List[int]] = defaultdict(list)
    comb_ids = {c.id for c in comb}
    for c in comb:
        preds = {drv[n] for n in c.input_nets if drv[n] in comb_ids}
        indeg[c.id] = len(preds)
        for p in preds:
            succ[p].append(c.id)
    queue = deque(c.id for c in comb if indeg[c.id] == 0)
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if len(order) != len(comb):
        raise CombinationalLoopError("combinational loop")
    return order


def clock_order(netlist: Netlist, library: Library) -> List[int]:
    """Clock-network cell ids (ICG/CK) ordered from the root outwards."""
    clk = [c for c in netlist.cells if library[c.lib_cell].node_type.is_clock]
    drv = netlist.driver
    ids = {c.id for c in clk}
    depth: Dict[int, int] = {}

    def d(cid: int) -> int:
        if cid in depth:
            return depth[cid]
        up = drv[netlist.cells[cid].clock_net]
        depth[cid] = 0 if up not in ids else d(up) + 1
        return depth[cid]

    for c in clk:
        d(c.id)
    return sorted(ids, key=lambda i: (depth[i], i))


def scope_of(path: str) -> str:
    return path.rsplit(".", 1)[0]


def cells_in_scopes(netlist: Netlist, prefixes: Iterable[str]) -> List[int]:
    pref = list(prefixes)
    return [c.id for c in netlist.cells if any(is_under(c.scope, p) for p in pref)]


__all__ = ["CellSpec", "NetlistBuilder", "topo_order", "clock_order", "NodeType"]
