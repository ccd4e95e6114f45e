import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from netpower.forge import GenParams, LayoutParams, gen_design, gen_workload, layout_transform
from netpower.netlist.liberty import fixture_library
from netpower.sim import simulate

torch.set_num_threads(1)

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def lib():
    return fixture_library()


@pytest.fixture(scope="session")
def small_design(lib):
    return gen_design(GenParams(n_cells=300, seed=11, leaf_cells=60, n_icg=2), lib)


@pytest.fixture(scope="session")
def small_lineage(lib, small_design):
    """(G, P, stimulus, wave G, wave P) for a 300-cell design over 60 cycles."""
    g = small_design
    p = layout_transform(g, lib, LayoutParams(seed=3))
    stim = gen_workload(g, 60, 5)
    return g, p, stim, simulate(g, lib, stim), simulate(p, lib, stim)


def rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def make_bundle(lib, name, seed, n_cycles=12, n_cells=150, min_cells=40):
    from netpower.forge import equiv_transform
    from netpower.segment import DesignBundle
    g = gen_design(GenParams(n_cells=n_cells, seed=seed, leaf_cells=50, n_icg=1), lib)
    gp = equiv_transform(g, lib, 10, seed)
    p = layout_transform(g, lib, LayoutParams(seed=seed))
    stim = gen_workload(g, n_cycles, seed)
    tg = [simulate(x, lib, stim).toggles for x in (g, gp, p)]
    return DesignBundle(name, lib, g, gp, p, *tg, min_cells=min_cells)


@pytest.fixture(scope="session")
def tiny_data(lib, tmp_path_factory):
    """Assembled three-design dataset (d0, d1 train; d2 test), 12 cycles each."""
    from netpower.segment import assemble_dataset
    bundles = [make_bundle(lib, f"d{k}", seed) for k, seed in enumerate((1, 3, 5))]
    out = tmp_path_factory.mktemp("tiny_data")
    manifest, data = assemble_dataset(bundles, str(out), ["d0", "d1"], ["d2"])
    return manifest, data, bundles


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
