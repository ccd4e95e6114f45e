"""Random hierarchical gate-level designs drawn from a cell library."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..netlist.builder import NetlistBuilder
from ..netlist.liberty import fixture_library
from ..netlist.types import Library, Netlist, NetlistError, NodeType, Stage

# relative frequency of combinational cell families in generated logic
COMB_MIX = {
    NodeType.INV: 0.12, NodeType.BUF: 0.04, NodeType.AND: 0.10, NodeType.OR: 0.08,
    NodeType.NAND: 0.12, NodeType.NOR: 0.10, NodeType.XOR: 0.06, NodeType.XNOR: 0.04,
    NodeType.MUX: 0.08, NodeType.AOI: 0.08, NodeType.OAI: 0.08, NodeType.ADDER: 0.06,
}


class InfeasibleParams(ValueError):
    pass


@dataclass(frozen=True)
class GenParams:
    n_cells: int = 500
    fanout: int = 4               # sub-modules per hierarchy level
    register_fraction: float = 0.2
    n_icg: int = 4
    seed: int = 0
    leaf_cells: int = 150         # approximate cells per leaf module
    name: str = "top"

    def validate(self) -> None:
        if self.n_cells < 50:
            raise InfeasibleParams("n_cells must be at least 50")
        if not 0 < self.register_fraction <= 0.5:
            raise InfeasibleParams("register_fraction must lie in (0, 0.5]")
        if self.fanout < 2:
            raise InfeasibleParams("fanout must be at least 2")
        if self.n_icg < 0:
            raise InfeasibleParams("n_icg must be non-negative")
        if round(self.n_cells * self.register_fraction) < 1:
            raise InfeasibleParams("register fraction yields zero registers")


def _pick_cell(rng: np.random.Generator, library: Library, t: NodeType) -> str:
    cands = sorted(c.name for c in library.by_type(t))
    if not cands:
        raise InfeasibleParams(f"library has no {t.name} cell")
    return cands[int(rng.integers(len(cands)))]


def _choose_inputs(rng: np.random.Generator, pool: List[str], k: int, recent: int = 24) -> List[str]:
    out: List[str] = []
    for _ in range(k):
        for _attempt in range(8):
            if rng.random() < 0.6 and len(pool) > 1:
                lo = max(0, len(pool) - recent)
                s = pool[int(rng.integers(lo, len(pool)))]
            else:
                s = pool[int(rng.integers(len(pool)))]
            if s not in out:
                break
        out.append(s)
    return out


def _comb_types(rng: np.random.Generator, n: int) -> List[NodeType]:
    types = list(COMB_MIX)
    p = np.array([COMB_MIX[t] for t in types])
    return [types[i] for i in rng.choice(len(types), size=n, p=p / p.sum())]


def _grow_logic(b: NetlistBuilder, rng: np.random.Generator, library: Library, scope: str,
                owner: str, pool: List[str], n: int, stem: str = "g") -> List[str]:
    """Append ``n`` random combinational cells to ``scope``; returns their output nets."""
    outs = []
    for t in _comb_types(rng, n):
        lib = library[_pick_cell(rng, library, t)]
        ins = _choose_inputs(rng, pool, len(lib.inputs))
        y = b.fresh_net(owner, "n")
        b.add_cell(b.fresh_cell_path(scope, stem), lib.name, ins, y)
        pool.append(y)
        outs.append(y)
    return outs


def _leaf_paths(top: str, n_leaves: int, fanout: int) -> List[str]:
    if n_leaves <= fanout:
        return [f"{top}.u{k}" for k in range(n_leaves)]
    return [f"{top}.m{k // fanout}.u{k % fanout}" for k in range(n_leaves)]


def gen_design(params: GenParams, library: Optional[Library] = None) -> Netlist:
    """Generate a stage-G design.

    Layout: ``clk``, ``rst``, ``en_*`` (one per ICG) and ``in_*`` primary inputs;
    leaf modules each holding registers (some banks behind a local ICG), a
    random combinational DAG and a TIE cell; a few glue gates at the top
    drive the primary outputs.  Combinational nets only cross leaves forward
    (leaf i reads leaf j's logic only for j < i), register outputs cross
    freely, so the design is acyclic after the register cut.
    """
    params.validate()
    library = library or fixture_library()
    rng = np.random.default_rng(params.seed)
    top = params.name
    b = NetlistBuilder(top=top, stage=Stage.G)

    n_leaves = max(3, round(params.n_cells / params.leaf_cells))
    leaves = _leaf_paths(top, n_leaves, params.fanout)
    for p in leaves:
        b.add_scope(p, "leaf_" + p.rsplit(".", 1)[1] if p.count(".") == 1 else "leaf")
    for p in {p.rsplit(".", 1)[0] for p in leaves if p.count(".") > 1}:
        b.hierarchy[p] = "group"

    n_in = int(np.clip(round(math.sqrt(params.n_cells)), 8, 64))
    n_out = max(4, n_in // 2)
    for name in ["clk", "rst"] + [f"en_{k}" for k in range(params.n_icg)] + [f"in_{k}" for k in range(n_in)]:
        b.add_net(name)
        b.primary_inputs.append(name)
    data_in = [f"in_{k}" for k in range(n_in)]

    n_glue = max(n_out, round(0.03 * params.n_cells))
    budget = params.n_cells - n_glue
    w = rng.uniform(0.6, 1.4, size=n_leaves)
    sizes = np.floor(budget * w / w.sum()).astype(int)
    sizes[: budget - sizes.sum()] += 1
    n_regs_total = max(1, round(params.n_cells * params.register_fraction))
    reg_split = np.floor(n_regs_total * sizes / sizes.sum()).astype(int)
    reg_split[: n_regs_total - reg_split.sum()] += 1
    icg_owner = [k % n_leaves for k in range(params.n_icg)]

    exported_comb: List[List[str]] = []
    exported_reg: List[str] = []
    leaf_regs: List[List[Tuple[str, str]]] = []  # pending (register path, Q net) per leaf

    # registers first so that their outputs can be shared across leaves
    for li, scope in enumerate(leaves):
        n_reg = int(reg_split[li])
        icgs = [k for k, o in enumerate(icg_owner) if o == li]
        gck = []
        for k in icgs:
            y = b.fresh_net(scope, "gck")
            b.add_cell(f"{scope}.icg{k}", _pick_cell(rng, library, NodeType.ICG), [f"en_{k}"], y, "clk")
            gck.append(y)
        regs = []
        bank = 0
        r = 0
        while r < n_reg:
            width = int(rng.integers(4, 9))
            clock = gck[bank % len(gck)] if gck and rng.random() < 0.7 else "clk"
            bank += 1
            for _ in range(min(width, n_reg - r)):
                u = rng.random()
                t = NodeType.DFF if u < 0.8 else (NodeType.DFFRS if u < 0.95 else NodeType.LATCH)
                q = b.fresh_net(top, "q")  # register outputs are visible design-wide
                path = b.fresh_cell_path(scope, "r")
                regs.append((path, q, t, clock))
                r += 1
        leaf_regs.append(regs)
        exported_reg.extend(q for _, q, _, _ in regs)

    pending = []
    for li, scope in enumerate(leaves):
        regs = leaf_regs[li]
        n_icg = sum(1 for o in icg_owner if o == li)
        n_tie = 1
        n_comb = max(4, int(sizes[li]) - len(regs) - n_icg - n_tie)
        tie = b.fresh_net(scope, "tie")
        b.add_cell(b.fresh_cell_path(scope, "tie"), _pick_cell_tie(library, low=True), [], tie)
        own_q = [q for _, q, _, _ in regs]
        ext_q = [q for q in exported_reg if q not in set(own_q)]
        pool = _sample(rng, data_in, max(4, n_in // 2))
        pool += _sample(rng, ext_q, 4)
        for prev in exported_comb:
            pool += _sample(rng, prev, 3)
        pool += own_q
        outs = _grow_logic(b, rng, library, scope, scope, pool, n_comb)
        # promote a few late signals to top-owned nets so that other leaves and glue can read them
        exports = outs[-max(3, n_comb // 10):]
        exported_comb.append(_rename_exports(b, exports))
        late = [s for s in (exported_comb[-1] + outs[len(outs) // 3:]) if s in b.nets]
        pending.append((regs, tie, late))

    for li, (regs, tie, late) in enumerate(pending):
        for path, q, t, clock in regs:
            lib = library[_pick_cell(rng, library, t)]
            d = late[int(rng.integers(len(late)))]
            if t == NodeType.DFFRS:
                ins = [d, "rst", tie]
            else:
                ins = [d]
            b.add_cell(path, lib.name, ins, q, clock)

    # top-level glue driving the primary outputs
    glue_pool = [s for ex in exported_comb for s in ex] + _sample(rng, exported_reg, 8)
    outs = _grow_logic(b, rng, library, top, top, glue_pool, n_glue, stem="glue")
    for k, y in enumerate(outs[-n_out:]):
        po = f"out_{k}"
        b.nets[po] = 0.0
        _rename_net(b, y, po)
        b.primary_outputs.append(po)
    return b.build(library)


def _sample(rng: np.random.Generator, items: List[str], k: int) -> List[str]:
    if not items:
        return []
    idx = rng.choice(len(items), size=min(k, len(items)), replace=False)
    return [items[i] for i in sorted(idx)]


def _pick_cell_tie(library: Library, low: bool) -> str:
    for c in sorted(library.by_type(NodeType.TIE), key=lambda c: c.name):
        if (c.function.strip() == "0") == low:
            return c.name
    raise InfeasibleParams("library lacks a TIE cell")


def _rename_net(b: NetlistBuilder, old: str, new: str) -> None:
    if old == new:
        return
    for spec in b.cells.values():
        spec.inputs = [new if n == old else n for n in spec.inputs]
        if spec.output == old:
            spec.output = new
        if spec.clock == old:
            spec.clock = new
    b.nets[new] = b.nets.pop(old)


def _rename_exports(b: NetlistBuilder, nets: List[str]) -> List[str]:
    out = []
    for n in nets:
        new = n.replace(".", "_")
        while new in b.nets:
            new += "_x"
        _rename_net(b, n, new)
        out.append(new)
    return out


def gen_comb_block(n_inputs: int, n_cells: int, seed: int, n_outputs: int = 4,
                   library: Optional[Library] = None, name: str = "blk") -> Netlist:
    """Flat purely combinational block (for exhaustive truth-table checks)."""
    library = library or fixture_library()
    rng = np.random.default_rng(seed)
    b = NetlistBuilder(top=name, stage=Stage.G)
    pool = []
    for k in range(n_inputs):
        b.add_net(f"in_{k}")
        b.primary_inputs.append(f"in_{k}")
        pool.append(f"in_{k}")
    outs = _grow_logic(b, rng, library, name, name, pool, n_cells)
    for k, y in enumerate(outs[-n_outputs:]):
        _rename_net(b, y, f"out_{k}")
        b.primary_outputs.append(f"out_{k}")
    return b.build(library)


__all__ = ["GenParams", "gen_design", "gen_comb_block", "InfeasibleParams", "COMB_MIX"]
