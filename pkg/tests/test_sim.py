import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netpower.forge import gen_comb_block
from netpower.netlist.builder import NetlistBuilder, topo_order
from netpower.netlist.vcd import parse_vcd
from netpower.sim import SimulationError, Stimulus, cosim_equiv, random_stimulus, simulate

# reference truth functions, written out by hand independently of the library expressions
REF = {
    "INVX1": lambda a: 1 - a, "INVX2": lambda a: 1 - a, "BUFX2": lambda a: a, "BUFX4": lambda a: a,
    "AND2X1": lambda a, b: a & b, "AND3X1": lambda a, b, c: a & b & c,
    "OR2X1": lambda a, b: a | b, "OR3X1": lambda a, b, c: a | b | c,
    "NAND2X1": lambda a, b: 1 - (a & b), "NAND3X1": lambda a, b, c: 1 - (a & b & c),
    "NOR2X1": lambda a, b: 1 - (a | b), "NOR3X1": lambda a, b, c: 1 - (a | b | c),
    "XOR2X1": lambda a, b: a ^ b, "XNOR2X1": lambda a, b: 1 - (a ^ b),
    "MUX2X1": lambda a, b, s: b if s else a,
    "AOI21X1": lambda a1, a2, b: 1 - ((a1 & a2) | b),
    "AOI22X1": lambda a1, a2, b1, b2: 1 - ((a1 & a2) | (b1 & b2)),
    "OAI21X1": lambda a1, a2, b: 1 - ((a1 | a2) & b),
    "OAI22X1": lambda a1, a2, b1, b2: 1 - ((a1 | a2) & (b1 | b2)),
    "FASX1": lambda a, b, ci: a ^ b ^ ci, "FACX1": lambda a, b, ci: int(a + b + ci >= 2),
    "TIEHIX1": lambda: 1, "TIELOX1": lambda: 0,
}


def _reference_eval(netlist, lib, assignment):
    val = {}
    for k, n in enumerate(netlist.primary_inputs):
        val[n] = assignment[k]
    for cid in topo_order(netlist, lib):
        c = netlist.cells[cid]
        val[c.output_net] = REF[c.lib_cell](*(val[n] for n in c.input_nets))
    return [val[n] for n in netlist.primary_outputs]


def _exhaustive(netlist):
    k = len(netlist.primary_inputs)
    combos = np.array(list(itertools.product((0, 1), repeat=k)), dtype=np.uint8)
    stim = Stimulus({netlist.nets[n].name: combos[:, j] for j, n in enumerate(netlist.primary_inputs)},
                    len(combos))
    return combos, stim


def _inv(lib):
    b = NetlistBuilder("t")
    b.add_net("a"); b.add_net("y")
    b.primary_inputs.append("a"); b.primary_outputs.append("y")
    b.add_cell("t.u", "INVX1", ["a"], "y")
    return b.build(lib)


def test_inverter(lib):
    n = _inv(lib)
    w = simulate(n, lib, Stimulus({"a": np.array([0, 1, 0, 1])}, 4))
    assert w.values[n.net_id("y")].tolist() == [1, 0, 1, 0]
    assert w.toggles[n.net_id("y")].tolist() == [1, 1, 1, 1]


def test_dff_delays_one_cycle(lib):
    b = NetlistBuilder("t")
    for x in ("d", "clk", "q"):
        b.add_net(x)
    b.primary_inputs += ["d", "clk"]
    b.primary_outputs.append("q")
    b.add_cell("t.r", "DFFX1", ["d"], "q", clock="clk")
    n = b.build(lib)
    w = simulate(n, lib, Stimulus({"d": np.array([0, 1, 1, 0, 1])}, 5))
    assert w.values[n.net_id("q")].tolist() == [0, 0, 1, 1, 0]
    w = simulate(n, lib, Stimulus({"d": np.array([1, 1, 0, 0])}, 4))
    assert w.values[n.net_id("q")].tolist() == [0, 1, 1, 0]
    # the free-running clock toggles every cycle
    assert w.toggles[n.net_id("clk")].tolist() == [1] * 4


def test_icg_with_enable_low_blocks_clock(lib):
    b = NetlistBuilder("t")
    for x in ("d", "clk", "gck", "q", "lo"):
        b.add_net(x)
    b.primary_inputs += ["d", "clk"]
    b.primary_outputs.append("q")
    b.add_cell("t.tie", "TIELOX1", [], "lo")
    b.add_cell("t.g", "ICGX1", ["lo"], "gck", clock="clk")
    b.add_cell("t.r", "DFFX1", ["d"], "q", clock="gck")
    n = b.build(lib)
    w = simulate(n, lib, Stimulus({"d": np.ones(6, np.uint8)}, 6))
    assert not w.toggles[n.net_id("gck")].any()
    assert not w.values[n.net_id("q")].any()


@pytest.mark.parametrize("n_inputs,seed", [(2, 0), (3, 1), (5, 2), (6, 3), (8, 4), (8, 5)])
def test_exhaustive_truth_tables(lib, n_inputs, seed):
    blk = gen_comb_block(n_inputs, 40, seed, library=lib)
    combos, stim = _exhaustive(blk)
    w = simulate(blk, lib, stim)
    outs = w.values[list(blk.primary_outputs)].T
    for row, assignment in zip(outs, combos):
        assert row.tolist() == _reference_eval(blk, lib, assignment.tolist())


def test_every_library_cell_matches_reference(lib):
    for name, ref in REF.items():
        cell = lib[name]
        b = NetlistBuilder("t")
        ins = [b.add_net(f"i{k}") for k in range(len(cell.inputs))]
        b.add_net("y")
        b.primary_inputs += ins
        b.primary_outputs.append("y")
        b.add_cell("t.u", name, ins, "y")
        n = b.build(lib)
        if not ins:
            w = simulate(n, lib, Stimulus({}, 1))
            assert w.values[n.net_id("y"), 0] == ref()
            continue
        combos, stim = _exhaustive(n)
        w = simulate(n, lib, stim)
        assert w.values[n.net_id("y")].tolist() == [ref(*r) for r in combos.tolist()]


def test_cosim_reflexive_and_detects_mismatch(lib, small_design):
    assert cosim_equiv(small_design, small_design, lib, 200, seed=1).equivalent
    inv = _inv(lib)
    b = NetlistBuilder.from_netlist(inv)
    b.cells["t.u"].lib = "BUFX2"
    rep = cosim_equiv(inv, b.build(lib), lib, 50, seed=0)
    assert not rep.equivalent
    assert rep.net == "y" and rep.cycle == 0


def test_determinism(lib, small_design):
    stim = random_stimulus(small_design, 40, 9)
    assert simulate(small_design, lib, stim) == simulate(small_design, lib, stim)


def test_stimulus_errors(lib):
    n = _inv(lib)
    with pytest.raises(SimulationError):
        simulate(n, lib, Stimulus({}, 3))
    with pytest.raises(SimulationError, match="X/Z"):
        simulate(n, lib, Stimulus({"a": np.array([0, 2, 1])}, 3))
    with pytest.raises(SimulationError):
        Stimulus({"a": np.array([0, 1])}, 3)


@given(seed=st.integers(0, 5000), cycles=st.integers(1, 30))
def test_toggle_is_xor_of_consecutive_values(lib, small_design, seed, cycles):
    w = simulate(small_design, lib, random_stimulus(small_design, cycles, seed))
    v = w.values.astype(np.int64)
    assert np.array_equal(w.toggles[:, 0], v[:, 0])
    assert np.array_equal(w.toggles[:, 1:], np.abs(np.diff(v, axis=1)))


def test_vcd_and_csv_outputs_agree(lib, small_design):
    w = simulate(small_design, lib, random_stimulus(small_design, 12, 2))
    tr = parse_vcd(w.to_vcd(100), 100, netlist=small_design, n_cycles=12)
    assert np.array_equal(tr.bits, w.toggles)
    lines = w.toggle_csv().splitlines()
    assert lines[0] == "net,cycle,bit"
    assert len(lines) == 1 + w.values.size
    net, cyc, bit = lines[1 + 12 * 3 + 5].split(",")
    assert net == w.names[3] and int(cyc) == 5 and int(bit) == w.toggles[3, 5]
