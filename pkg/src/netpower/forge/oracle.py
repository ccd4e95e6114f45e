"""Analytic per-cycle group power: internal + switching + clock-pin + leakage."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..netlist.graph import load_caps
from ..netlist.types import Library, Netlist, NodeType, PowerGroup, Stage

PJ, FF, NW = 1e-12, 1e-15, 1e-9
GROUPS = ("combinational", "register", "clock_tree")


@dataclass(frozen=True)
class GroupPower:
    """Watts per power group for one cycle (or any aggregate)."""

    combinational: float
    register: float
    clock_tree: float

    @property
    def total(self) -> float:
        return self.combinational + self.register + self.clock_tree

    def as_tuple(self):
        return (self.combinational, self.register, self.clock_tree)


@dataclass(frozen=True)
class CellPowerModel:
    """Per-cell coefficients so that power = dyn*toggle(out) + ck*active(clock pin) + leak."""

    dyn: np.ndarray        # W per output toggle
    ck: np.ndarray         # W per active clock-pin cycle
    leak: np.ndarray       # W
    group: np.ndarray      # PowerGroup per cell
    out_net: np.ndarray
    clock_net: np.ndarray  # -1 when the cell has no clock pin


def cell_power_model(netlist: Netlist, library: Library, ideal_clock: Optional[bool] = None) -> CellPowerModel:
    """Coefficients of the oracle formula.

    ``ideal_clock`` (default: every stage before layout) drops the dynamic
    terms of CK/ICG cells, leaving only their leakage.
    """
    if ideal_clock is None:
        ideal_clock = netlist.stage != Stage.P
    f, v2 = library.frequency, library.voltage ** 2
    cload = load_caps(netlist, library)
    n = len(netlist.cells)
    dyn = np.zeros(n)
    ck = np.zeros(n)
    leak = np.zeros(n)
    group = np.zeros(n, dtype=np.int64)
    out = np.zeros(n, dtype=np.int64)
    clk = np.full(n, -1, dtype=np.int64)
    for c in netlist.cells:
        lib = library[c.lib_cell]
        t = lib.node_type
        group[c.id] = int(t.group)
        out[c.id] = c.output_net
        leak[c.id] = lib.leakage * NW
        if c.clock_net is not None:
            clk[c.id] = c.clock_net
        if ideal_clock and t.is_clock:
            continue
        dyn[c.id] = f * (lib.internal_energy * PJ + 0.5 * v2 * cload[c.output_net] * FF)
        ck[c.id] = f * lib.clock_pin_energy * PJ
    return CellPowerModel(dyn, ck, leak, group, out, clk)


def cell_power(model: CellPowerModel, toggles: np.ndarray) -> np.ndarray:
    """(n_cells, n_cycles) watts from a (n_nets, n_cycles) toggle matrix."""
    p = model.dyn[:, None] * toggles[model.out_net]
    has_clk = model.clock_net >= 0
    if has_clk.any():
        p[has_clk] += model.ck[has_clk, None] * toggles[model.clock_net[has_clk]]
    p += model.leak[:, None]
    return p


def group_power_trace(netlist: Netlist, library: Library, toggles: np.ndarray,
                      cells: Optional[Sequence[int]] = None,
                      ideal_clock: Optional[bool] = None,
                      model: Optional[CellPowerModel] = None) -> np.ndarray:
    """(3, n_cycles) watts per group, optionally restricted to a subset of cells.

    Clock nets toggle exactly when active, so the toggle matrix also carries
    clock activity for the clock-pin term.
    """
    model = model or cell_power_model(netlist, library, ideal_clock)
    p = cell_power(model, toggles)
    grp = model.group
    if cells is not None:
        idx = np.asarray(cells, dtype=np.int64)
        p, grp = p[idx], grp[idx]
    out = np.zeros((3, toggles.shape[1]))
    for g in range(3):
        sel = grp == g
        if sel.any():
            out[g] = p[sel].sum(axis=0)
    return out


def power_oracle(netlist: Netlist, library: Library, wave, cycle: int,
                 cells: Optional[Sequence[int]] = None) -> GroupPower:
    if not 0 <= cycle < wave.n_cycles:
        raise IndexError(f"cycle {cycle} outside 0..{wave.n_cycles - 1}")
    tg = wave.toggles[:, cycle:cycle + 1]
    g = group_power_trace(netlist, library, tg, cells)[:, 0]
    return GroupPower(float(g[0]), float(g[1]), float(g[2]))


def labels_csv(rows: Iterable[tuple]) -> str:
    """CSV of (design, scope, cycle, group, watts)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["design", "scope", "cycle", "group", "watts"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4]))])
    return buf.getvalue()


__all__ = ["GroupPower", "GROUPS", "CellPowerModel", "cell_power_model", "cell_power",
           "group_power_trace", "power_oracle", "labels_csv"]
