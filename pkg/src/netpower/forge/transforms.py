"""Function-preserving rewrites and the emulated layout flow."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..netlist.builder import NetlistBuilder, scope_of
from ..netlist.types import (Library, Netlist, NetlistError, NodeType, Stage, common_scope, is_under,
                             net_owner)

_DUAL = {NodeType.AND: NodeType.NOR, NodeType.OR: NodeType.NAND,
         NodeType.NAND: NodeType.OR, NodeType.NOR: NodeType.AND}
_ASSOC = (NodeType.AND, NodeType.OR)


@dataclass(frozen=True)
class LayoutParams:
    max_fanout: int = 8
    branching: int = 4
    wire_cap_per_fanout: float = 0.8   # fF per sink pin
    restructure: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.max_fanout < 2:
            raise ValueError("max_fanout must be at least 2")
        if self.branching < 2:
            raise ValueError("branching must be at least 2")
        if self.wire_cap_per_fanout < 0:
            raise ValueError("wire_cap_per_fanout must be non-negative")
        if self.restructure < 0:
            raise ValueError("restructure must be non-negative")


class _Editor:
    """Rewrite context: builder plus library lookups and clock-net bookkeeping."""

    def __init__(self, b: NetlistBuilder, library: Library):
        self.b = b
        self.lib = library
        self.by_arity: Dict[Tuple[NodeType, int], str] = {}
        for c in sorted(library.cells.values(), key=lambda c: (c.drive_cap_limit, c.name)):
            self.by_arity.setdefault((c.node_type, len(c.inputs)), c.name)
        self.pos = set(b.primary_outputs)

    def type_of(self, path: str) -> NodeType:
        return self.lib[self.b.cells[path].lib].node_type

    def comb_cells(self, types: Optional[Sequence[NodeType]] = None) -> List[str]:
        out = []
        for p, spec in self.b.cells.items():
            t = self.lib[spec.lib].node_type
            if t.is_register or t.is_clock:
                continue
            if types is None or t in types:
                out.append(p)
        return out

    def clock_nets(self) -> set:
        out = set()
        for spec in self.b.cells.values():
            if spec.clock is not None:
                out.add(spec.clock)
            if self.lib[spec.lib].node_type.is_clock:
                out.add(spec.output)
        return out

    def visible(self, net: str, scope: str) -> bool:
        return is_under(scope, net_owner(net, self.b.top))

    def cell_name(self, t: NodeType, arity: int) -> Optional[str]:
        return self.by_arity.get((t, arity))

    def add_inv(self, scope: str, net: str) -> str:
        y = self.b.fresh_net(scope, "rw")
        self.b.add_cell(self.b.fresh_cell_path(scope, "rwinv"), self.cell_name(NodeType.INV, 1), [net], y)
        return y


# -- individual rewrites; each returns True when applied -------------------------

def _demorgan(ed: _Editor, rng: np.random.Generator) -> bool:
    cands = [p for p in ed.comb_cells(tuple(_DUAL))
             if ed.cell_name(_DUAL[ed.type_of(p)], len(ed.b.cells[p].inputs))]
    if not cands:
        return False
    p = cands[int(rng.integers(len(cands)))]
    spec = ed.b.cells[p]
    dual = ed.cell_name(_DUAL[ed.type_of(p)], len(spec.inputs))
    scope = scope_of(p)
    spec.inputs = [ed.add_inv(scope, n) for n in spec.inputs]
    spec.lib = dual
    return True


def _inv_pair_insert(ed: _Editor, rng: np.random.Generator) -> bool:
    cands = [p for p in ed.comb_cells() if ed.b.cells[p].inputs]
    if not cands:
        return False
    p = cands[int(rng.integers(len(cands)))]
    spec = ed.b.cells[p]
    k = int(rng.integers(len(spec.inputs)))
    scope = scope_of(p)
    spec.inputs[k] = ed.add_inv(scope, ed.add_inv(scope, spec.inputs[k]))
    return True


def _bypass(ed: _Editor, out_net: str, src_net: str, sinks) -> bool:
    """Point every sink of ``out_net`` at ``src_net`` if visibility allows."""
    users = sinks.get(out_net, [])
    if out_net in ed.pos or any(not ed.visible(src_net, scope_of(u)) for u, _ in users):
        return False
    for u, pin in users:
        ed.b.rewire(u, pin, src_net)
    return True


def _inv_pair_remove(ed: _Editor, rng: np.random.Generator) -> bool:
    drivers = ed.b.drivers()
    sinks = ed.b.sinks()
    clocks = ed.clock_nets()
    cands = []
    for p in ed.comb_cells((NodeType.INV,)):
        spec = ed.b.cells[p]
        d = drivers.get(spec.inputs[0])
        if d is not None and ed.type_of(d) == NodeType.INV and spec.output not in clocks:
            cands.append((p, d))
    order = rng.permutation(len(cands)) if cands else []
    for i in order:
        x, y = cands[i]
        src = ed.b.cells[y].inputs[0]
        mid = ed.b.cells[x].inputs[0]
        out = ed.b.cells[x].output
        if not _bypass(ed, out, src, sinks):
            continue
        ed.b.remove_cell(x)
        del ed.b.nets[out]
        if len(sinks.get(mid, [])) == 1 and mid not in ed.pos:
            ed.b.remove_cell(y)
            del ed.b.nets[mid]
        return True
    return False


def _reassoc_split(ed: _Editor, rng: np.random.Generator) -> bool:
    cands = [p for p in ed.comb_cells(_ASSOC) if len(ed.b.cells[p].inputs) >= 3
             and ed.cell_name(ed.type_of(p), 2)]
    if not cands:
        return False
    p = cands[int(rng.integers(len(cands)))]
    spec = ed.b.cells[p]
    two = ed.cell_name(ed.type_of(p), 2)
    scope = scope_of(p)
    ins = list(spec.inputs)
    k = int(rng.integers(len(ins)))
    rest = ins[:k] + ins[k + 1:]
    # fold all but one input into a chain of 2-input gates
    acc = rest[0]
    for n in rest[1:]:
        y = ed.b.fresh_net(scope, "rw")
        ed.b.add_cell(ed.b.fresh_cell_path(scope, "rwa"), two, [acc, n], y)
        acc = y
    spec.lib = two
    spec.inputs = [acc, ins[k]]
    return True


def _reassoc_merge(ed: _Editor, rng: np.random.Generator) -> bool:
    drivers = ed.b.drivers()
    sinks = ed.b.sinks()
    cands = []
    for p in ed.comb_cells(_ASSOC):
        spec = ed.b.cells[p]
        t = ed.type_of(p)
        if len(spec.inputs) != 2 or not ed.cell_name(t, 3):
            continue
        for k, n in enumerate(spec.inputs):
            d = drivers.get(n)
            if (d is not None and ed.type_of(d) == t and len(ed.b.cells[d].inputs) == 2
                    and len(sinks.get(n, [])) == 1 and n not in ed.pos):
                cands.append((p, k, d))
    if not cands:
        return False
    p, k, d = cands[int(rng.integers(len(cands)))]
    spec = ed.b.cells[p]
    inner = ed.b.cells[d]
    if not all(ed.visible(n, scope_of(p)) for n in inner.inputs):
        return False
    mid = spec.inputs[k]
    spec.inputs = list(inner.inputs) + [spec.inputs[1 - k]]
    spec.lib = ed.cell_name(ed.type_of(p), 3)
    ed.b.remove_cell(d)
    del ed.b.nets[mid]
    return True


def _buf_insert(ed: _Editor, rng: np.random.Generator) -> bool:
    cands = [p for p in ed.comb_cells() if ed.b.cells[p].inputs]
    if not cands:
        return False
    p = cands[int(rng.integers(len(cands)))]
    spec = ed.b.cells[p]
    k = int(rng.integers(len(spec.inputs)))
    scope = scope_of(p)
    y = ed.b.fresh_net(scope, "rw")
    ed.b.add_cell(ed.b.fresh_cell_path(scope, "rwbuf"), ed.cell_name(NodeType.BUF, 1), [spec.inputs[k]], y)
    spec.inputs[k] = y
    return True


def _buf_remove(ed: _Editor, rng: np.random.Generator) -> bool:
    sinks = ed.b.sinks()
    clocks = ed.clock_nets()
    cands = [p for p in ed.comb_cells((NodeType.BUF,)) if ed.b.cells[p].output not in clocks]
    order = rng.permutation(len(cands)) if cands else []
    for i in order:
        x = cands[i]
        spec = ed.b.cells[x]
        if not _bypass(ed, spec.output, spec.inputs[0], sinks):
            continue
        ed.b.remove_cell(x)
        del ed.b.nets[spec.output]
        return True
    return False


REWRITES: Dict[str, Callable[[_Editor, np.random.Generator], bool]] = {
    "demorgan": _demorgan,
    "inv_pair_insert": _inv_pair_insert,
    "inv_pair_remove": _inv_pair_remove,
    "reassoc_split": _reassoc_split,
    "reassoc_merge": _reassoc_merge,
    "buf_insert": _buf_insert,
    "buf_remove": _buf_remove,
}
DEFAULT_WEIGHTS = {"demorgan": 5, "inv_pair_insert": 2, "inv_pair_remove": 1, "reassoc_split": 2,
                   "reassoc_merge": 1, "buf_insert": 1, "buf_remove": 1}
INSERTING = ("demorgan", "inv_pair_insert", "reassoc_split", "buf_insert")


def _apply_rewrites(ed: _Editor, k: int, rng: np.random.Generator, ops: Sequence[str]) -> int:
    unknown = [o for o in ops if o not in REWRITES]
    if unknown:
        raise ValueError(f"unknown rewrite(s): {unknown}")
    w = np.array([DEFAULT_WEIGHTS[o] for o in ops], dtype=float)
    done = 0
    misses = 0
    while done < k and misses < 50 * max(k, 1):
        op = ops[int(rng.choice(len(ops), p=w / w.sum()))]
        if REWRITES[op](ed, rng):
            done += 1
        else:
            misses += 1
    return done


def equiv_transform(g: Netlist, library: Library, k: int, seed: int,
                    ops: Optional[Sequence[str]] = None) -> Netlist:
    """Apply ``k`` random local rewrites; the result is stage G_PLUS and logically equivalent."""
    b = NetlistBuilder.from_netlist(g)
    b.stage = Stage.G_PLUS
    ed = _Editor(b, library)
    _apply_rewrites(ed, k, np.random.default_rng(seed), list(ops or REWRITES))
    return b.build(library)


# -- layout emulation ----------------------------------------------------------------

def _buffer_fanout(ed: _Editor, max_fanout: int) -> int:
    b = ed.b
    clocks = ed.clock_nets()
    drivers = b.drivers()
    sinks = b.sinks()
    buf = max((c for c in ed.lib.by_type(NodeType.BUF)), key=lambda c: (c.drive_cap_limit, c.name)).name
    added = 0
    for net in list(b.nets):
        users = sinks.get(net, [])
        if net in clocks or len(users) <= max_fanout:
            continue
        d = drivers.get(net)
        scope = scope_of(d) if d is not None else b.top
        level = sorted(users, key=lambda u: (scope_of(u[0]), u[0], u[1]))
        while len(level) > max_fanout:
            nxt = []
            for i in range(0, len(level), max_fanout):
                group = level[i:i + max_fanout]
                owner = common_scope([scope] + [scope_of(u) for u, _ in group])
                y = b.fresh_net(owner, "fo")
                path = b.fresh_cell_path(scope, "fobuf")
                b.add_cell(path, buf, [net], y)
                added += 1
                for u, pin in group:
                    b.rewire(u, pin, y)
                nxt.append((path, 0))
            level = nxt
    return added


def _clock_tree(ed: _Editor, branching: int) -> int:
    b = ed.b
    cks = sorted(ed.lib.by_type(NodeType.CK), key=lambda c: (c.drive_cap_limit, c.name))
    if not cks:
        raise NetlistError("library has no CK cell")
    leaf_buf, upper_buf = cks[0].name, cks[-1].name
    groups: Dict[Tuple[str, str], List[str]] = {}
    for path, spec in b.cells.items():
        if spec.clock is not None:
            groups.setdefault((spec.clock, scope_of(path)), []).append(path)
    added = 0
    for (src, scope) in sorted(groups):
        level = sorted(groups[(src, scope)])
        first = True
        while first or len(level) > 1:
            nxt = []
            for i in range(0, len(level), branching):
                chunk = level[i:i + branching]
                y = b.fresh_net(scope, "ck")
                path = b.fresh_cell_path(scope, "ckbuf")
                b.add_cell(path, leaf_buf if first else upper_buf, [], y, src)
                added += 1
                for u in chunk:
                    b.cells[u].clock = y
                nxt.append(path)
            level = nxt
            first = False
    return added


def layout_transform(g: Netlist, library: Library, params: LayoutParams) -> Netlist:
    """Emulated place-and-route: fanout buffering, clock-tree synthesis, restructuring, wire caps."""
    params.validate()
    if g.stage != Stage.G:
        raise ValueError("layout_transform expects a stage-G netlist")
    b = NetlistBuilder.from_netlist(g)
    b.stage = Stage.P
    ed = _Editor(b, library)
    rng = np.random.default_rng(params.seed)
    _buffer_fanout(ed, params.max_fanout)
    _clock_tree(ed, params.branching)
    _apply_rewrites(ed, params.restructure, rng, INSERTING)
    fan: Dict[str, int] = {n: 0 for n in b.nets}
    for spec in b.cells.values():
        for n in spec.inputs:
            fan[n] += 1
        if spec.clock is not None:
            fan[spec.clock] += 1
    for n in b.nets:
        b.nets[n] = params.wire_cap_per_fanout * fan[n]
    return b.build(library)


def clock_tree_size(n_sinks: int, branching: int) -> Tuple[int, int]:
    """Closed form (buffers, depth) of one balanced tree over ``n_sinks`` pins."""
    total, depth, m = 0, 0, n_sinks
    while True:
        m = math.ceil(m / branching)
        total += m
        depth += 1
        if m <= 1:
            return total, depth


def structurally_equal(a: Netlist, b: Netlist) -> bool:
    """Equality of everything except the stage tag."""
    return a.signature()[1:] == b.signature()[1:]


__all__ = ["LayoutParams", "equiv_transform", "layout_transform", "REWRITES", "INSERTING",
           "clock_tree_size", "structurally_equal"]
