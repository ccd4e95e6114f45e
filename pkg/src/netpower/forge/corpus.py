"""One design lineage end to end: G, its equivalent variant G+, the layout netlist P and their waveforms."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

from ..netlist.types import Library
from ..segment import DesignBundle
from ..sim import simulate
from .generate import GenParams, gen_design
from .transforms import LayoutParams, equiv_transform, layout_transform
from .workload import gen_workload


@dataclass
class BundleTimings:
    seconds: Dict[str, float] = field(default_factory=dict)


def make_bundle(name: str, gen: GenParams, layout: LayoutParams, library: Library, n_cycles: int,
                workload_seed: int, equiv_rewrites: Optional[int] = None, min_cells: int = 20,
                timings: Optional[BundleTimings] = None) -> DesignBundle:
    """Generate, rewrite, lay out and simulate one design under a shared workload."""
    t = timings.seconds if timings is not None else {}
    t0 = time.perf_counter()
    g = gen_design(gen, library)
    k = equiv_rewrites if equiv_rewrites is not None else max(4, len(g.cells) // 20)
    gplus = equiv_transform(g, library, k, seed=gen.seed + 101)
    t1 = time.perf_counter()
    p = layout_transform(g, library, replace(layout, seed=layout.seed + gen.seed))
    t2 = time.perf_counter()
    stim = gen_workload(g, n_cycles, workload_seed)
    wg = simulate(g, library, stim)
    wgp = simulate(gplus, library, stim)
    t3 = time.perf_counter()
    wp = simulate(p, library, stim)
    t4 = time.perf_counter()
    t.update({"generate": t1 - t0, "layout": t2 - t1, "simulate_g": t3 - t2, "simulate_p": t4 - t3})
    return DesignBundle(name, library, g, gplus, p, wg.toggles, wgp.toggles, wp.toggles, min_cells)


__all__ = ["make_bundle", "BundleTimings"]
