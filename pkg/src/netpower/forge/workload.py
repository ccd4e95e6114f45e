"""Synthetic workloads: Bernoulli data inputs, bursty clock-gate enables, sparse reset."""
from __future__ import annotations

import numpy as np

from ..netlist.types import Netlist
from ..sim import Stimulus


def _bursty(rng: np.random.Generator, n: int) -> np.ndarray:
    """Alternating on/off phases with geometric lengths and a per-stream duty bias."""
    duty = rng.uniform(0.25, 0.75)
    mean_len = rng.uniform(6.0, 16.0)
    out = np.zeros(n, dtype=np.uint8)
    state = int(rng.random() < duty)
    c = 0
    while c < n:
        mean = mean_len * (duty if state else 1.0 - duty) * 2.0
        length = int(rng.geometric(1.0 / max(mean, 1.5)))
        out[c:c + length] = state
        c += length
        state ^= 1
    return out


def gen_workload(netlist: Netlist, n_cycles: int, seed: int) -> Stimulus:
    """Stimulus for every primary input except the clock root.

    ``en_*`` inputs get bursty phases, ``rst`` is a 5% Bernoulli stream that
    is held high for the first two cycles, and every other input is a
    Bernoulli stream whose one-probability is drawn from [0.05, 0.5].
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be at least 1")
    rng = np.random.default_rng(seed)
    ins = {}
    for n in netlist.primary_inputs:
        if n == netlist.clock_root:
            continue
        name = netlist.nets[n].name
        if name.startswith("en_"):
            ins[name] = _bursty(rng, n_cycles)
        elif name == "rst":
            row = (rng.random(n_cycles) < 0.05).astype(np.uint8)
            row[:2] = 1
            ins[name] = row
        else:
            p = rng.uniform(0.05, 0.5)
            ins[name] = (rng.random(n_cycles) < p).astype(np.uint8)
    return Stimulus(ins, n_cycles, seed)


__all__ = ["gen_workload"]
