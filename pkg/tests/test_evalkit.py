import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netpower.encoder import EncoderConfig, init_weights
from netpower.evalkit import (baseline_power, baseline_prelayout, component_report, component_totals,
                              evaluate_design, mape, mape_detail, runtime_report, summary_json)
from netpower.finetune import HEADS, GroupModels
from netpower.forge import LayoutParams, gen_comb_block
from netpower.forge.oracle import GROUPS, group_power_trace, power_oracle
from netpower.gbrt import GbrtModel
from netpower.netlist.builder import NetlistBuilder
from netpower.pipeline import model_path, oracle_path
from netpower.sim import random_stimulus, simulate


# -- MAPE ------------------------------------------------------------------------------

def test_mape_examples():
    assert mape([50, 200], [40, 220]) == pytest.approx(15.0, abs=1e-12)
    assert mape([100], [90]) == pytest.approx(10.0, abs=1e-12)
    y = np.array([1.0, 2.0, 3.0])
    assert mape(y, y) == 0.0


def test_mape_zero_labels_excluded_and_errors():
    val, skipped = mape_detail([0, 100, 0], [5, 90, 7])
    assert val == pytest.approx(10.0) and skipped == 2
    with pytest.raises(ValueError, match="zero"):
        mape([0, 0], [1, 1])
    with pytest.raises(ValueError, match="length"):
        mape([1, 2], [1])


@given(ys=st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=20), k=st.floats(1e-3, 1e3),
       seed=st.integers(0, 1000))
def test_mape_scale_invariant_and_nonnegative(ys, k, seed):
    y = np.array(ys)
    p = y * np.random.default_rng(seed).uniform(0.5, 1.5, size=y.size)
    a = mape(y, p)
    assert a >= 0
    assert mape(k * y, k * p) == pytest.approx(a, rel=1e-9, abs=1e-9)
    assert mape(y, y) == 0.0


# -- baseline --------------------------------------------------------------------------

def test_baseline_is_exact_on_identical_stages(lib):
    blk = gen_comb_block(6, 50, seed=3, library=lib)
    w = simulate(blk, lib, random_stimulus(blk, 40, 1))
    label = group_power_trace(blk, lib, w.toggles).T
    base = baseline_prelayout(blk, lib, w)
    assert mape(label.sum(axis=1), base.sum(axis=1)) == 0.0
    assert mape(label[:, 0], base[:, 0]) == 0.0
    gp = baseline_power(blk, lib, w, 7)
    assert np.allclose([gp.combinational, gp.register, gp.clock_tree], base[7], rtol=1e-15)


def test_baseline_clock_tree_misses_the_tree(lib, small_lineage):
    g, p, _, wg, wp = small_lineage
    label = group_power_trace(p, lib, wp.toggles).T
    base = baseline_prelayout(g, lib, wg)
    ct = GROUPS.index("clock_tree")
    assert abs(mape(label[:, ct], base[:, ct]) - 100.0) <= 2.0
    # the baseline's clock tree group is leakage of the gating cells only
    icg_leak = sum(lib[c.lib_cell].leakage * 1e-9 for c in g.cells if lib[c.lib_cell].node_type.is_clock)
    assert np.allclose(base[:, ct], icg_leak, rtol=1e-12, atol=0)


def test_baseline_underestimates_when_wire_caps_dominate(lib):
    blk = gen_comb_block(6, 50, seed=4, library=lib)
    b = NetlistBuilder.from_netlist(blk)
    for name in b.nets:
        b.nets[name] = 25.0   # fF, well above the pin loads
    loaded = b.build(lib)
    w = simulate(blk, lib, random_stimulus(blk, 60, 2))
    label = group_power_trace(loaded, lib, w.toggles).T
    base = baseline_prelayout(blk, lib, w)
    assert np.all(base[:, 0] <= label[:, 0])
    assert np.any(base[:, 0] < label[:, 0])


# -- components ----------------------------------------------------------------------------

SCOPES = ["top.a", "top.a.x", "top.b", "top.c.y", "_glue"]


def _random_sc(seed, C=6):
    rng = np.random.default_rng(seed)
    return rng.uniform(1e-6, 1e-5, size=(len(SCOPES), C, 3)), rng.uniform(1e-6, 1e-5, size=(len(SCOPES), C, 3))


def test_single_prefix_covers_design():
    pred, lab = _random_sc(0)
    rows = component_report(pred, lab, SCOPES[:-1], ["top"])
    assert rows[0].n_scopes == 4
    assert rows[0].pred_w == pytest.approx(pred[:-1].sum(axis=(0, 2)).mean(), rel=1e-12)
    tot = component_totals(lab, SCOPES, ["top", "_glue"]).sum(axis=0)
    assert np.allclose(tot, lab.sum(axis=(0, 2)), rtol=1e-12)
    with pytest.raises(ValueError):
        component_totals(lab, SCOPES, ["top.zz"])


@given(seed=st.integers(0, 10_000))
def test_component_table_matches_recomputation(seed):
    pred, lab = _random_sc(seed)
    prefixes = ["top.a", "top.b", "top.c", "_glue"]   # disjoint, covering
    rows = component_report(pred, lab, SCOPES, prefixes)
    members = {"top.a": [0, 1], "top.b": [2], "top.c": [3], "_glue": [4]}
    for r in rows:
        idx = members[r.prefix]
        y = lab[idx].sum(axis=(0, 2))
        p = pred[idx].sum(axis=(0, 2))
        assert r.n_scopes == len(idx)
        assert r.label_w == pytest.approx(y.mean(), rel=1e-12)
        assert r.pred_w == pytest.approx(p.mean(), rel=1e-12)
        assert r.mape == pytest.approx(float(np.mean(np.abs(y - p) / y) * 100), rel=1e-9)
    # disjoint prefixes add to the design total
    parts = component_totals(pred, SCOPES, prefixes).sum(axis=0)
    assert np.allclose(parts, pred.sum(axis=(0, 2)), rtol=1e-9)


def test_prefix_is_path_aware():
    vals = np.ones((3, 2))
    out = component_totals(vals, ["top.a", "top.ab", "top.a.x"], ["top.a"])
    assert out[0].tolist() == [2.0, 2.0]


# -- design reports ------------------------------------------------------------------------

def test_evaluate_design_and_reports():
    pred, lab = _random_sc(1)
    base = lab.sum(axis=0) * 0.5
    rep = evaluate_design("d", lab, pred, base, SCOPES, ["top", "_glue"])
    assert rep.n_cycles == 6
    y, p = lab.sum(axis=(0, 2)), pred.sum(axis=(0, 2))
    assert rep.model_mape["total"] == pytest.approx(mape(y, p))
    assert rep.baseline_mape["total"] == pytest.approx(50.0)
    for g in GROUPS + ("total",):
        assert rep.model_mape[g] >= 0
    assert len(rep.trace_csv().splitlines()) == 1 + 6
    assert len(rep.plot_csv().splitlines()) == 1 + 3 * 4 * 6
    assert rep.components_csv().splitlines()[0] == "design,prefix,n_scopes,label_w,pred_w,mape"
    assert summary_json([rep]) == summary_json([rep])


# -- runtime ------------------------------------------------------------------------------

def test_runtime_report_aggregation():
    t = [{"model": {"preprocess": 1.0, "inference": 0.5}, "oracle": {"layout": 2, "simulate": 3, "label": 1},
          "wall": {"model": 1.5, "oracle": 6.0}}] * 2
    rep = runtime_report(t)
    assert rep.model_total == 3.0 and rep.oracle_total == 12.0 and rep.speedup == 4.0
    assert rep.phase_consistency() == 0.0
    assert rep.to_csv().splitlines()[-1] == "ratio,speedup,4.0000"


def _constant_models(d):
    widths = {"combinational": d + 3, "register": d + 3, "clock_tree": d}
    return GroupModels({h: GbrtModel(widths[h], 1.0) for h in HEADS}, d)


def test_measured_phases_and_repeat_stability(lib, small_lineage):
    g, _, stim, wg, _ = small_lineage
    enc = init_weights(EncoderConfig(embed_dim=8))
    models = _constant_models(8)
    model_path(enc, models, g, lib, wg.toggles, 20)   # warm-up
    runs = []
    for _ in range(3):
        t0 = time.perf_counter()
        _, mp = model_path(enc, models, g, lib, wg.toggles, 20)
        t1 = time.perf_counter()
        _, op = oracle_path(g, lib, stim, LayoutParams(seed=3))
        t2 = time.perf_counter()
        runs.append({"model": mp, "oracle": op, "wall": {"model": t1 - t0, "oracle": t2 - t1}})
    for r in runs:
        rep = runtime_report([r])
        assert all(v > 0 for v in list(rep.model.values()) + list(rep.oracle.values()))
        assert rep.phase_consistency() <= 0.05
        assert np.isfinite(rep.speedup) and rep.speedup > 0
    for path in ("model", "oracle"):
        walls = [r["wall"][path] for r in runs]
        assert max(walls) < 3 * min(walls)


def test_oracle_path_matches_direct_labelling(lib, small_lineage):
    g, p, stim, _, wp = small_lineage
    trace, _ = oracle_path(g, lib, stim, LayoutParams(seed=3))
    assert np.array_equal(trace, group_power_trace(p, lib, wp.toggles))
    gp = power_oracle(p, lib, wp, 5)
    assert np.allclose(trace[:, 5], [gp.combinational, gp.register, gp.clock_tree], rtol=1e-12)
