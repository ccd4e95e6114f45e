"""Sub-module segmentation, cross-stage alignment, feature annotation and dataset assembly."""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .forge.oracle import GroupPower, cell_power_model, group_power_trace
from .netlist.graph import DirectedCircuitGraph, build_graph, cell_table, load_caps
from .netlist.types import N_NODE_TYPES, Library, Netlist, NetlistError, Stage, is_under

GLUE = "_glue"
FEATURE_WIDTH = N_NODE_TYPES + 3  # one-hot | toggle | internal energy | leakage
TOGGLE_COL = N_NODE_TYPES
ENERGY_COL = N_NODE_TYPES + 1
LEAK_COL = N_NODE_TYPES + 2


class AlignmentError(NetlistError):
    pass


class DatasetError(ValueError):
    pass


# -- segmentation -----------------------------------------------------------------

def _ancestors(path: str):
    while True:
        yield path
        if "." not in path:
            return
        path = path.rsplit(".", 1)[0]


def segment(netlist: Netlist, min_cells: int = 20) -> List[str]:
    """Deepest hierarchy prefixes holding at least ``min_cells`` cells, plus ``_glue``."""
    per_scope = Counter(c.instance_path.rsplit(".", 1)[0] for c in netlist.cells)
    counts: Dict[str, int] = {h: 0 for h in netlist.hierarchy}
    for sc, k in per_scope.items():
        for p in _ancestors(sc):
            if p in counts:
                counts[p] += k
    big = [h for h in netlist.hierarchy if counts[h] >= min_cells]
    chosen = sorted(h for h in big if not any(o != h and is_under(o, h) for o in big))
    if not chosen:
        return [netlist.top] if netlist.cells else []
    covered = sum(counts[h] for h in chosen)
    if covered < len(netlist.cells):
        chosen.append(GLUE)
    return chosen


def scope_cells(netlist: Netlist, scopes: Sequence[str]) -> Dict[str, List[int]]:
    """Assign every cell to exactly one of ``scopes``.

    A cell goes to the first listed scope that is a prefix of its hierarchy
    path; cells matching none go to ``_glue`` when it is listed.
    """
    rank = {s: i for i, s in enumerate(scopes) if s != GLUE}
    out: Dict[str, List[int]] = {s: [] for s in scopes}
    resolved: Dict[str, Optional[str]] = {}
    for c in netlist.cells:
        sc = c.instance_path.rsplit(".", 1)[0]
        target = resolved.get(sc, "")
        if target == "":
            hits = [p for p in _ancestors(sc) if p in rank]
            target = min(hits, key=rank.__getitem__) if hits else None
            resolved[sc] = target
        if target is None:
            if GLUE not in out:
                raise AlignmentError(f"cell '{c.instance_path}' falls outside every scope")
            target = GLUE
        out[target].append(c.id)
    return out


def align_stages(subs_g: Sequence[str], subs_p: Sequence[str]) -> List[Tuple[str, str]]:
    """Pair scopes by identical path; the pairing must be a bijection."""
    sp = set(subs_p)
    missing = [s for s in subs_g if s not in sp]
    if missing:
        raise AlignmentError(f"unmatched scope(s) on the second stage: {missing}")
    extra = sorted(sp - set(subs_g))
    if extra:
        raise AlignmentError(f"scope(s) without a first-stage counterpart: {extra}")
    return [(s, s) for s in subs_g]


# -- annotation -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SubModuleSample:
    graph: DirectedCircuitGraph
    stage: Stage
    cycle: int
    features: np.ndarray                 # (n, 21)
    key: str
    label: Optional[GroupPower] = None

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes


def static_features(graph: DirectedCircuitGraph) -> np.ndarray:
    x = np.zeros((graph.n_nodes, FEATURE_WIDTH))
    x[np.arange(graph.n_nodes), graph.node_type] = 1.0
    x[:, ENERGY_COL] = graph.internal_energy
    x[:, LEAK_COL] = graph.leakage
    return x


def annotate(graph: DirectedCircuitGraph, wave, cycle: int, library: Optional[Library] = None,
             label: Optional[GroupPower] = None) -> SubModuleSample:
    """Feature rows for one cycle.  ``wave`` is a WaveTable or an (n_nets, n_cycles) toggle array.

    Energies and leakage are already carried by the graph (copied from the
    library when it was built); ``library`` is accepted for symmetry.
    """
    toggles = wave.toggles if hasattr(wave, "toggles") else np.asarray(wave)
    if toggles.shape[0] <= int(graph.out_net.max(initial=-1)):
        raise DatasetError("waveform does not cover the graph's nets")
    if not 0 <= cycle < toggles.shape[1]:
        raise DatasetError(f"cycle {cycle} outside the waveform")
    x = static_features(graph)
    x[:, TOGGLE_COL] = toggles[graph.out_net, cycle]
    return SubModuleSample(graph, graph.stage, cycle, x, graph.scope, label)


# -- dataset --------------------------------------------------------------------------

@dataclass
class DesignBundle:
    """Everything the dataset needs for one design lineage."""

    name: str
    library: Library
    g: Netlist
    gplus: Netlist
    p: Netlist
    toggles_g: np.ndarray
    toggles_gplus: np.ndarray
    toggles_p: np.ndarray
    min_cells: int = 20

    def scopes(self) -> List[str]:
        return segment(self.g, self.min_cells)


@dataclass
class DesignData:
    """In-memory view of one assembled design: graphs, per-node toggles and labels per scope."""

    name: str
    scopes: List[str]
    graphs: Dict[str, Dict[Stage, DirectedCircuitGraph]]
    node_toggles: Dict[str, Dict[Stage, np.ndarray]]   # (n_nodes, n_cycles) uint8
    labels: np.ndarray                                   # (n_scopes, n_cycles, 3) watts, P-stage oracle
    n_cycles: int

    def sample(self, scope: str, stage: Stage, cycle: int) -> SubModuleSample:
        gr = self.graphs[scope][stage]
        x = static_features(gr)
        x[:, TOGGLE_COL] = self.node_toggles[scope][stage][:, cycle]
        lab = None
        if stage == Stage.G:
            row = self.labels[self.scopes.index(scope), cycle]
            lab = GroupPower(float(row[0]), float(row[1]), float(row[2]))
        return SubModuleSample(gr, stage, cycle, x, scope, lab)


@dataclass
class DatasetManifest:
    designs: List[str]
    train: List[str]
    test: List[str]
    seed: int
    n_cycles: int
    scopes: Dict[str, List[str]]
    files: Dict[str, Dict[str, str]]
    index: List[Tuple[str, str, int, str]] = field(default_factory=list)

    def validate(self) -> None:
        if set(self.train) & set(self.test):
            raise DatasetError(f"designs in both splits: {sorted(set(self.train) & set(self.test))}")
        unknown = (set(self.train) | set(self.test)) - set(self.designs)
        if unknown:
            raise DatasetError(f"split names unknown designs: {sorted(unknown)}")

    def to_json(self) -> str:
        return json.dumps({
            "format_version": 1, "designs": self.designs, "train": self.train, "test": self.test,
            "seed": self.seed, "n_cycles": self.n_cycles, "scopes": self.scopes, "files": self.files,
            "index": [list(r) for r in self.index],
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        m = cls(d["designs"], d["train"], d["test"], d["seed"], d["n_cycles"], d["scopes"], d["files"],
                [tuple(r) for r in d["index"]])
        m.validate()
        return m

    def quadruples(self, designs: Optional[Iterable[str]] = None) -> List[Tuple[str, str, int]]:
        keep = set(self.designs if designs is None else designs)
        return [(d, s, c) for d, s, c, st in self.index if st == Stage.G.value and d in keep]


def build_design_data(bundle: DesignBundle) -> DesignData:
    lib = bundle.library
    n = bundle.toggles_g.shape[1]
    for tg, st in ((bundle.toggles_gplus, "G_PLUS"), (bundle.toggles_p, "P")):
        if tg is None:
            raise DatasetError(f"design '{bundle.name}' is missing stage {st}")
        if tg.shape[1] != n:
            raise DatasetError(f"design '{bundle.name}': stage {st} has {tg.shape[1]} cycles, expected {n}")
    scopes = bundle.scopes()
    stages = {Stage.G: (bundle.g, bundle.toggles_g), Stage.G_PLUS: (bundle.gplus, bundle.toggles_gplus),
              Stage.P: (bundle.p, bundle.toggles_p)}
    parts = {st: scope_cells(nl, scopes) for st, (nl, _) in stages.items()}
    for st in (Stage.G_PLUS, Stage.P):
        align_stages(scopes, [s for s, ids in parts[st].items() if ids])
    graphs: Dict[str, Dict[Stage, DirectedCircuitGraph]] = {s: {} for s in scopes}
    node_tg: Dict[str, Dict[Stage, np.ndarray]] = {s: {} for s in scopes}
    for st, (nl, tg) in stages.items():
        table = cell_table(nl, lib)
        loads = load_caps(nl, lib, table)
        for s in scopes:
            gr = build_graph(nl, s, lib, cell_ids=parts[st][s], net_load=loads, table=table)
            graphs[s][st] = gr
            node_tg[s][st] = np.ascontiguousarray(tg[gr.out_net])
    model = cell_power_model(bundle.p, lib)
    labels = np.stack([group_power_trace(bundle.p, lib, bundle.toggles_p, parts[Stage.P][s], model=model).T
                       for s in scopes])
    return DesignData(bundle.name, scopes, graphs, node_tg, labels, n)


def assemble_dataset(bundles: Sequence[DesignBundle], out_dir: str, train: Sequence[str],
                     test: Sequence[str], seed: int = 0) -> Tuple[DatasetManifest, Dict[str, DesignData]]:
    """Write per-design graph JSON + columnar arrays and return the manifest."""
    names = [b.name for b in bundles]
    if len(set(names)) != len(names):
        raise DatasetError("duplicate design names")
    manifest = DatasetManifest(designs=list(names), train=list(train), test=list(test), seed=seed,
                               n_cycles=0, scopes={}, files={})
    manifest.validate()
    os.makedirs(out_dir, exist_ok=True)
    data: Dict[str, DesignData] = {}
    cycles = set()
    for b in bundles:
        dd = build_design_data(b)
        data[b.name] = dd
        cycles.add(dd.n_cycles)
        manifest.scopes[b.name] = dd.scopes
        gpath = os.path.join(out_dir, f"{b.name}.graphs.jsonl")
        apath = os.path.join(out_dir, f"{b.name}.arrays.npz")
        with open(gpath, "w") as fh:
            for s in dd.scopes:
                for st in Stage:
                    fh.write(dd.graphs[s][st].dumps() + "\n")
        arrays = {"labels": dd.labels}
        for i, s in enumerate(dd.scopes):
            for st in Stage:
                arrays[f"toggles_{i}_{st.value}"] = dd.node_toggles[s][st]
        np.savez_compressed(apath, **arrays)
        manifest.files[b.name] = {"graphs": os.path.basename(gpath), "arrays": os.path.basename(apath)}
    if len(cycles) > 1:
        raise DatasetError(f"designs disagree on cycle count: {sorted(cycles)}")
    manifest.n_cycles = cycles.pop() if cycles else 0
    for name in names:
        for s in manifest.scopes[name]:
            for c in range(manifest.n_cycles):
                for st in Stage:
                    manifest.index.append((name, s, c, st.value))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest, data


def load_dataset(out_dir: str) -> Tuple[DatasetManifest, Dict[str, DesignData]]:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = DatasetManifest.from_json(fh.read())
    data = {}
    for name in manifest.designs:
        files = manifest.files[name]
        scopes = manifest.scopes[name]
        graphs: Dict[str, Dict[Stage, DirectedCircuitGraph]] = {s: {} for s in scopes}
        with open(os.path.join(out_dir, files["graphs"])) as fh:
            for line in fh:
                g = DirectedCircuitGraph.from_json(json.loads(line))
                graphs[g.scope][g.stage] = g
        with np.load(os.path.join(out_dir, files["arrays"])) as z:
            labels = z["labels"]
            tg = {s: {st: z[f"toggles_{i}_{st.value}"] for st in Stage} for i, s in enumerate(scopes)}
        data[name] = DesignData(name, scopes, graphs, tg, labels, manifest.n_cycles)
    return manifest, data


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = ["GLUE", "FEATURE_WIDTH", "TOGGLE_COL", "ENERGY_COL", "LEAK_COL", "segment", "scope_cells",
           "align_stages", "annotate", "SubModuleSample", "static_features", "DesignBundle",
           "DesignData", "DatasetManifest", "build_design_data", "assemble_dataset", "load_dataset",
           "AlignmentError", "DatasetError"]
