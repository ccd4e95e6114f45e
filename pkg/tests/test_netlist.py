import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netpower.forge import GenParams, gen_design
from netpower.netlist.builder import NetlistBuilder, topo_order
from netpower.netlist.graph import ScopeError, build_graph
from netpower.netlist.liberty import classify_cell, classify_name, parse_liberty_lite, write_liberty_lite
from netpower.netlist.types import (N_NODE_TYPES, CombinationalLoopError, DanglingNetError, MultipleDriverError,
                                    NodeType, ParseError, PowerGroup, Stage, UnknownCellError)
from netpower.netlist.vcd import VcdError, parse_vcd, write_vcd
from netpower.netlist.verilog import parse_netlist, write_netlist
from netpower.sim import random_stimulus, simulate

HIER = """
module leaf (a, y);
  input a;
  output y;
  INVX1 u0 (.A(a), .Y(y));
endmodule
module mid (a, clk, q);
  input a;
  input clk;
  output q;
  wire n;
  leaf l0 (.a(a), .y(n));
  DFFX1 r0 (.D(n), .CK(clk), .Q(q));
endmodule
module top (a, clk, q, y);
  input a;
  input clk;
  output q;
  output y;
  mid m0 (.a(a), .clk(clk), .q(q));
  BUFX2 b0 (.A(a), .Y(y));
endmodule
"""


# -- node taxonomy -------------------------------------------------------------------

def test_taxonomy_has_eighteen_types_and_groups():
    assert N_NODE_TYPES == 18
    regs = {t for t in NodeType if t.group == PowerGroup.REGISTER}
    clk = {t for t in NodeType if t.group == PowerGroup.CLOCK_TREE}
    assert regs == {NodeType.DFF, NodeType.DFFRS, NodeType.LATCH}
    assert clk == {NodeType.ICG, NodeType.CK}


def test_classify_by_name():
    assert classify_name("DFFX1") == NodeType.DFF
    assert classify_name("CKBUFX4") == NodeType.CK
    assert classify_name("ICGX1") == NodeType.ICG
    with pytest.raises(UnknownCellError):
        classify_name("WIDGET3")


def test_classification_total_onto_fixture(lib):
    seen = {classify_cell(name, lib) for name in lib.cells}
    assert seen == set(NodeType)
    for name in lib.cells:
        assert classify_cell(name, lib) == lib[name].node_type
    with pytest.raises(UnknownCellError):
        classify_cell("NOPE", lib)


# -- liberty-lite ------------------------------------------------------------------------

MINI_LIB = """library (mini) {
  cell (INVX1) { internal_energy : 0.01 ; leakage : 1 ; input_cap : 1 ; }
}"""


def test_liberty_minimal():
    lib = parse_liberty_lite(MINI_LIB)
    assert list(lib.cells) == ["INVX1"]
    c = lib["INVX1"]
    assert (c.node_type, c.internal_energy, c.leakage, c.input_cap) == (NodeType.INV, 0.01, 1.0, 1.0)
    assert lib.frequency == 1e9


def test_liberty_errors():
    dup = MINI_LIB.replace("}\n}", "}\n  cell (INVX1) { internal_energy : 0.01 ; leakage : 1 ; input_cap : 1 ; }\n}")
    with pytest.raises(ParseError, match="duplicate"):
        parse_liberty_lite(dup)
    with pytest.raises(ParseError, match="missing required field 'leakage'"):
        parse_liberty_lite("library (x) { cell (INVX1) { internal_energy : 0.01 ; input_cap : 1 ; } }")
    with pytest.raises(ParseError, match="negative"):
        parse_liberty_lite("library (x) { cell (INVX1) { internal_energy : -1 ; leakage : 1 ; input_cap : 1 ; } }")
    with pytest.raises(ParseError, match="clock_pin_energy"):
        parse_liberty_lite("library (x) { cell (INVX1) { internal_energy : 1 ; leakage : 1 ; input_cap : 1 ;"
                           " clock_pin_energy : 0.1 ; } }")
    with pytest.raises(ParseError) as exc:
        parse_liberty_lite("library (x) {\n  cell (INVX1) { internal_energy : abc ; leakage : 1 ; input_cap : 1 ; } }")
    assert exc.value.line == 2


def test_liberty_round_trip(lib):
    again = parse_liberty_lite(write_liberty_lite(lib))
    assert dict(again.cells) == dict(lib.cells)
    assert (again.voltage, again.frequency) == (lib.voltage, lib.frequency)


def test_fixture_library_fields_nonnegative(lib):
    for c in lib.cells.values():
        assert min(c.internal_energy, c.leakage, c.input_cap, c.clock_pin_energy) >= 0
        if c.clock_pin_energy > 0:
            assert c.node_type.is_register or c.node_type.is_clock


# -- structural netlist ----------------------------------------------------------------

def test_parse_single_inverter(lib):
    n = parse_netlist("module t (a, y); input a; output y; INVX1 u (.A(a), .Y(y)); endmodule", lib)
    assert len(n.cells) == 1
    assert len(n.primary_inputs) + len(n.primary_outputs) == 2
    assert n.stage == Stage.G


def test_parse_multiple_drivers(lib):
    src = ("module t (a, y); input a; output y; wire n1;\n"
           "INVX1 u0 (.A(a), .Y(n1)); INVX1 u1 (.A(a), .Y(n1)); BUFX2 u2 (.A(n1), .Y(y)); endmodule")
    with pytest.raises(MultipleDriverError) as exc:
        parse_netlist(src, lib)
    assert exc.value.net == "n1"


def test_parse_errors(lib):
    with pytest.raises(ParseError) as exc:
        parse_netlist("module t (a, y);\n  input a;\n  output y\n  INVX1 u (.A(a), .Y(y));\nendmodule", lib)
    assert exc.value.line == 4
    with pytest.raises(UnknownCellError):
        parse_netlist("module t (a, y); input a; output y; FOOX1 u (.A(a), .Y(y)); endmodule", lib)
    with pytest.raises(DanglingNetError):
        parse_netlist("module t (a, y); input a; output y; INVX1 u (.A(zz), .Y(y)); endmodule", lib)


def test_hierarchical_round_trip(lib):
    n = parse_netlist(HIER, lib)
    assert sorted(c.instance_path for c in n.cells) == ["top.b0", "top.m0.l0.u0", "top.m0.r0"]
    assert set(n.hierarchy) == {"top", "top.m0", "top.m0.l0"}
    again = parse_netlist(write_netlist(n, lib), lib)
    assert again == n
    assert write_netlist(again, lib) == write_netlist(n, lib)


def test_stage_and_wire_caps_survive_round_trip(lib, small_lineage):
    _, p, *_ = small_lineage
    again = parse_netlist(write_netlist(p, lib), lib)
    assert again.stage == Stage.P
    assert again == p
    assert any(n.wire_cap > 0 for n in again.nets)


@given(seed=st.integers(0, 10_000))
def test_generated_round_trip_property(lib, seed):
    g = gen_design(GenParams(n_cells=80, seed=seed, leaf_cells=30, n_icg=1), lib)
    assert parse_netlist(write_netlist(g, lib), lib) == g
    order = topo_order(g, lib)   # register-cut graph sorts
    assert len(set(order)) == len(order)


def test_combinational_loop_rejected(lib):
    b = NetlistBuilder("t")
    for n in ("a", "x", "y"):
        b.add_net(n)
    b.primary_inputs.append("a")
    b.add_cell("t.u0", "NAND2X1", ["a", "y"], "x")
    b.add_cell("t.u1", "INVX1", ["x"], "y")
    with pytest.raises(CombinationalLoopError):
        b.build(lib)


# -- directed graphs -----------------------------------------------------------------

def test_graph_chain(lib):
    n = parse_netlist("module t (a, y); input a; output y; wire m;"
                      " INVX1 u0 (.A(a), .Y(m)); BUFX2 u1 (.A(m), .Y(y)); endmodule", lib)
    g = build_graph(n, "t", lib)
    assert (g.n_nodes, g.n_edges) == (2, 1)
    assert g.edges[:, 0].tolist() == [0, 1]
    assert g.boundary_nets == ("a",)


def test_graph_scope_errors(lib):
    n = parse_netlist(HIER, lib)
    with pytest.raises(ScopeError):
        build_graph(n, "top.nope", lib)
    b = NetlistBuilder("t")
    b.add_net("a")
    b.add_net("y")
    b.primary_inputs.append("a")
    b.add_cell("t.u", "INVX1", ["a"], "y")
    b.add_scope("t.empty")
    with pytest.raises(ScopeError, match="no cells"):
        build_graph(b.build(lib), "t.empty", lib)


def test_graph_edges_match_brute_force(lib):
    g = gen_design(GenParams(n_cells=200, seed=5, leaf_cells=200, n_icg=1), lib)
    for scope in g.hierarchy:
        cells = [c for c in g.cells if c.instance_path.startswith(scope + ".")]
        if not cells:
            continue
        ids = {c.id for c in cells}
        pairs = set()
        for a, b in itertools.product(cells, cells):
            pins = b.input_nets + ((b.clock_net,) if b.clock_net is not None else ())
            if a.output_net in pins:
                pairs.add((a.id, b.id))
        gr = build_graph(g, scope, lib)
        got = {(int(gr.cell_ids[s]), int(gr.cell_ids[d])) for s, d in gr.edges.T}
        assert got == pairs
        assert set(gr.cell_ids.tolist()) == ids


def test_graph_json_round_trip(lib, small_design):
    gr = build_graph(small_design, small_design.top, lib)
    import json
    from netpower.netlist.graph import DirectedCircuitGraph
    back = DirectedCircuitGraph.from_json(json.loads(gr.dumps()))
    assert back.dumps() == gr.dumps()


# -- VCD -----------------------------------------------------------------------------

def test_vcd_toggle_every_period():
    src = "$timescale 1ps $end\n$var wire 1 ! s $end\n$enddefinitions $end\n#0\n1!\n#10\n0!\n#20\n1!\n#30\n0!\n"
    tr = parse_vcd(src, clock_period=10)
    assert tr.row("s").tolist() == [1, 1, 1, 1]


def test_vcd_constant_signal():
    src = "$var wire 1 ! s $end\n$enddefinitions $end\n#0\n0!\n#35\n"
    assert parse_vcd(src, 10, n_cycles=4).row("s").tolist() == [0, 0, 0, 0]


def test_vcd_errors():
    head = "$var wire 1 ! s $end\n$enddefinitions $end\n"
    with pytest.raises(VcdError):
        parse_vcd(head + "#0\n1?\n", 10)
    with pytest.raises(VcdError):
        parse_vcd(head + "#20\n1!\n#10\n0!\n", 10)


def test_vcd_unmapped_signal(lib):
    n = parse_netlist("module t (a, y); input a; output y; INVX1 u (.A(a), .Y(y)); endmodule", lib)
    src = "$var wire 1 ! zz $end\n$enddefinitions $end\n#0\n1!\n"
    with pytest.raises(VcdError):
        parse_vcd(src, 10, netlist=n)


def test_vcd_simulator_round_trip(lib, small_design):
    wave = simulate(small_design, lib, random_stimulus(small_design, 50, 3))
    tr = parse_vcd(wave.to_vcd(clock_period=1000), 1000, netlist=small_design, n_cycles=50)
    assert tr == wave.trace()


@given(bits=st.lists(st.lists(st.integers(0, 1), min_size=6, max_size=6), min_size=1, max_size=5))
def test_vcd_writer_parser_property(bits):
    values = np.array(bits, dtype=np.uint8)
    names = [f"n{i}" for i in range(values.shape[0])]
    tr = parse_vcd(write_vcd(names, values, clock_period=7), 7, n_cycles=values.shape[1])
    prev = np.zeros_like(values)
    prev[:, 1:] = values[:, :-1]
    assert np.array_equal(tr.bits, values ^ prev)
