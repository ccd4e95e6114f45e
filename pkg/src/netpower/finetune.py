"""Power-group heads: group features, per-scope embeddings, GBRT fitting and total-power composition."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .encoder import Encoder, GraphBatch, IN_DIM
from .forge.oracle import GroupPower
from .gbrt import GbrtConfig, GbrtModel, gbrt_fit
from .netlist.graph import DirectedCircuitGraph, build_graph, cell_table, load_caps
from .netlist.types import N_NODE_TYPES, Library, Netlist, NodeType, PowerGroup, Stage
from .segment import TOGGLE_COL, DesignData, SubModuleSample, scope_cells, segment, static_features

log = logging.getLogger(__name__)

GROUP_OF_TYPE = np.array([int(NodeType(t).group) for t in range(N_NODE_TYPES)], dtype=np.int64)
UW = 1e6   # heads are fitted in microwatts
EMBED_MODES = ("exact", "cached")


@dataclass(frozen=True)
class GroupFeatures:
    e_g: np.ndarray
    n_comb: int
    i_comb: float   # pJ
    c_comb: float   # fF
    n_reg: int
    i_reg: float
    c_reg: float

    def ct_row(self) -> np.ndarray:
        return np.asarray(self.e_g, dtype=np.float64)

    def comb_row(self) -> np.ndarray:
        return np.concatenate([self.e_g, [self.n_comb, self.i_comb, self.c_comb]])

    def reg_row(self) -> np.ndarray:
        return np.concatenate([self.e_g, [self.n_reg, self.i_reg, self.c_reg]])


def _group_weights(graph: DirectedCircuitGraph) -> np.ndarray:
    """(6, n) weights so that weights @ toggles gives n/I/C per group (counts use a ones row)."""
    grp = GROUP_OF_TYPE[graph.node_type]
    w = np.zeros((6, graph.n_nodes))
    for k, g in enumerate((PowerGroup.COMBINATIONAL, PowerGroup.REGISTER)):
        sel = grp == int(g)
        w[3 * k, sel] = 1.0
        w[3 * k + 1, sel] = graph.internal_energy[sel]
        w[3 * k + 2, sel] = graph.load_cap[sel]
    return w


def group_feature_matrix(graph: DirectedCircuitGraph, node_toggles: np.ndarray) -> np.ndarray:
    """(n_cycles, 6) of n_comb, I_comb, C_comb, n_reg, I_reg, C_reg."""
    w = _group_weights(graph)
    out = w @ node_toggles.astype(np.float64)
    out[0] = w[0].sum()
    out[3] = w[3].sum()
    return out.T


def extract_group_features(sample: SubModuleSample, e_g, library: Optional[Library] = None) -> GroupFeatures:
    """Group counts and toggle-weighted energy/capacitance sums of one stage-G sample."""
    tog = sample.features[:, TOGGLE_COL]
    row = group_feature_matrix(sample.graph, tog[:, None])[0]
    e = e_g.detach().cpu().numpy() if isinstance(e_g, torch.Tensor) else np.asarray(e_g, dtype=np.float64)
    return GroupFeatures(e.astype(np.float64), int(row[0]), float(row[1]), float(row[2]),
                         int(row[3]), float(row[4]), float(row[5]))


# -- per-scope embeddings --------------------------------------------------------------

def _repeat_batch(graph: DirectedCircuitGraph, x: np.ndarray, dtype) -> GraphBatch:
    """``x`` is (k, n, 21): k feature variants of the same graph."""
    k, n, _ = x.shape
    full = np.concatenate([x.reshape(k * n, -1), np.zeros((k * n, IN_DIM - x.shape[2]))], axis=1)
    return GraphBatch(full, [graph.edges] * k, [n] * k, dtype)


@torch.no_grad()
def scope_embedding_table(encoder: Encoder, graph: DirectedCircuitGraph, node_toggles: np.ndarray,
                          mode: str = "cached", chunk: int = 32):
    """Distinct graph embeddings of one scope over a workload and the per-cycle index into them.

    ``exact`` encodes every cycle.  ``cached`` encodes once per distinct
    clock-gating state (the toggle bits of the scope's ICG cells) with every
    other node's toggle replaced by its mean activity over the workload.
    """
    if mode not in EMBED_MODES:
        raise ValueError(f"unknown embedding mode '{mode}'")
    base = static_features(graph)
    n_cycles = node_toggles.shape[1]
    if mode == "exact":
        out = []
        for s in range(0, n_cycles, chunk):
            cyc = np.arange(s, min(s + chunk, n_cycles))
            x = np.repeat(base[None], cyc.size, axis=0)
            x[:, :, TOGGLE_COL] = node_toggles[:, cyc].T
            out.append(encoder(_repeat_batch(graph, x, encoder.dtype)).graph_emb.double().numpy())
        return np.concatenate(out), np.arange(n_cycles)
    x, inverse = _gating_variants(graph, node_toggles)
    emb = encoder(_repeat_batch(graph, x, encoder.dtype)).graph_emb.double().numpy()
    return emb, inverse


def _gating_variants(graph: DirectedCircuitGraph, node_toggles: np.ndarray):
    """Feature variants, one per distinct ICG toggle pattern, and the per-cycle variant index."""
    n_cycles = node_toggles.shape[1]
    icg = np.nonzero(graph.node_type == int(NodeType.ICG))[0]
    keys = node_toggles[icg].T if icg.size else np.zeros((n_cycles, 0), np.uint8)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    x = np.repeat(static_features(graph)[None], uniq.shape[0], axis=0)
    x[:, :, TOGGLE_COL] = node_toggles.mean(axis=1)[None, :]
    if icg.size:
        x[:, icg, TOGGLE_COL] = uniq
    return x, np.asarray(inverse).reshape(-1)


def scope_embeddings(encoder: Encoder, graph: DirectedCircuitGraph, node_toggles: np.ndarray,
                     mode: str = "cached") -> np.ndarray:
    """(n_cycles, d) graph embedding of one scope at every cycle."""
    table, index = scope_embedding_table(encoder, graph, node_toggles, mode)
    return table[index]


@dataclass
class DesignFeatures:
    """Head inputs for every (scope, cycle) of one design; embeddings are stored once per distinct value."""

    scopes: List[str]
    e_table: np.ndarray   # (K, d)
    e_index: np.ndarray   # (S, C) rows of e_table
    groups: np.ndarray    # (S, C, 6)

    @property
    def n_cycles(self) -> int:
        return self.e_index.shape[1]

    @property
    def e_g(self) -> np.ndarray:
        return self.e_table[self.e_index]

    def rows(self, head: str) -> np.ndarray:
        e = self.e_table[self.e_index.reshape(-1)]
        if head == "clock_tree":
            return e
        S, C = self.e_index.shape
        g = self.groups.reshape(S * C, 6)
        cols = slice(0, 3) if head == "combinational" else slice(3, 6)
        return np.concatenate([e, g[:, cols]], axis=1)


def features_from_graphs(encoder: Encoder, graphs: Mapping[str, DirectedCircuitGraph],
                         node_toggles: Mapping[str, np.ndarray], scopes: Sequence[str],
                         mode: str = "cached") -> DesignFeatures:
    g = np.stack([group_feature_matrix(graphs[s], node_toggles[s]) for s in scopes])
    if mode == "cached":
        # one forward pass over every gating variant of every scope
        variants = [_gating_variants(graphs[s], node_toggles[s]) for s in scopes]
        xs, edges, sizes, index, off = [], [], [], [], 0
        for s, (x, inv) in zip(scopes, variants):
            k, n, _ = x.shape
            xs.append(x.reshape(k * n, -1))
            edges.extend([graphs[s].edges] * k)
            sizes.extend([n] * k)
            index.append(inv + off)
            off += k
        x = np.concatenate(xs)
        x = np.concatenate([x, np.zeros((x.shape[0], IN_DIM - x.shape[1]))], axis=1)
        with torch.no_grad():
            table = encoder(GraphBatch(x, edges, sizes, encoder.dtype)).graph_emb.double().numpy()
        return DesignFeatures(list(scopes), table, np.stack(index), g)
    tables, index, off = [], [], 0
    for s in scopes:
        t, i = scope_embedding_table(encoder, graphs[s], node_toggles[s], mode)
        tables.append(t)
        index.append(i + off)
        off += t.shape[0]
    return DesignFeatures(list(scopes), np.concatenate(tables), np.stack(index), g)


def features_from_design_data(encoder: Encoder, dd: DesignData, mode: str = "cached") -> DesignFeatures:
    graphs = {s: dd.graphs[s][Stage.G] for s in dd.scopes}
    tg = {s: dd.node_toggles[s][Stage.G] for s in dd.scopes}
    return features_from_graphs(encoder, graphs, tg, dd.scopes, mode)


def prepare_netlist(netlist: Netlist, library: Library, toggles: np.ndarray, min_cells: int = 20,
                    scopes: Optional[Sequence[str]] = None):
    """Segment a stage-G netlist and slice the waveform per scope (the model path's preprocessing)."""
    scopes = list(scopes) if scopes is not None else segment(netlist, min_cells)
    parts = scope_cells(netlist, scopes)
    table = cell_table(netlist, library)
    loads = load_caps(netlist, library, table)
    graphs = {s: build_graph(netlist, s, library, cell_ids=parts[s], net_load=loads, table=table) for s in scopes}
    tg = {s: np.ascontiguousarray(toggles[graphs[s].out_net]) for s in scopes}
    return scopes, graphs, tg


# -- heads ----------------------------------------------------------------------------

HEADS = ("combinational", "register", "clock_tree")


@dataclass
class FinetuneConfig:
    n_estimators: int = 500
    max_depth: int = 5
    shrinkage: float = 0.1
    embedding_mode: str = "cached"

    def gbrt(self) -> GbrtConfig:
        return GbrtConfig(self.n_estimators, self.max_depth, self.shrinkage)


@dataclass
class GroupModels:
    """F_Comb, F_Reg and F_CT; outputs are watts."""

    models: Dict[str, GbrtModel]
    embed_dim: int
    embedding_mode: str = "cached"

    def __post_init__(self):
        missing = [h for h in HEADS if h not in self.models or self.models[h] is None]
        if missing:
            raise ValueError(f"missing head model(s): {missing}")
        widths = {"clock_tree": self.embed_dim, "combinational": self.embed_dim + 3,
                  "register": self.embed_dim + 3}
        for h, w in widths.items():
            if self.models[h].n_features != w:
                raise ValueError(f"head '{h}' expects {self.models[h].n_features} features, not {w}")

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for h in HEADS:
            with open(os.path.join(out_dir, f"{h}.json"), "w") as fh:
                fh.write(self.models[h].to_json())
        with open(os.path.join(out_dir, "heads.json"), "w") as fh:
            json.dump({"format_version": 1, "embed_dim": self.embed_dim,
                       "embedding_mode": self.embedding_mode}, fh, sort_keys=True)

    @classmethod
    def load(cls, out_dir: str) -> "GroupModels":
        with open(os.path.join(out_dir, "heads.json")) as fh:
            meta = json.load(fh)
        models = {}
        for h in HEADS:
            with open(os.path.join(out_dir, f"{h}.json")) as fh:
                models[h] = GbrtModel.from_json(fh.read())
        return cls(models, meta["embed_dim"], meta["embedding_mode"])


@dataclass
class PowerPrediction:
    """Per (scope, cycle) watts; ``groups[..., k]`` follows ``HEADS`` order."""

    scopes: List[str]
    groups: np.ndarray    # (S, C, 3)

    @property
    def total(self) -> np.ndarray:
        g = self.groups
        return g[..., 0] + g[..., 1] + g[..., 2]

    def design_groups(self) -> np.ndarray:
        """(C, 3) design-level group power."""
        return self.groups.sum(axis=0)

    def design_total(self) -> np.ndarray:
        return self.total.sum(axis=0)

    def at(self, scope: str, cycle: int) -> GroupPower:
        row = self.groups[self.scopes.index(scope), cycle]
        return GroupPower(float(row[0]), float(row[1]), float(row[2]))

    def to_csv(self, design: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design", "scope", "cycle", "comb_w", "reg_w", "ct_w", "total_w"])
        tot = self.total
        for i, s in enumerate(self.scopes):
            for c in range(self.groups.shape[1]):
                g = self.groups[i, c]
                w.writerow([design, s, c, repr(float(g[0])), repr(float(g[1])), repr(float(g[2])),
                            repr(float(tot[i, c]))])
        return buf.getvalue()


def predict_total(models: GroupModels, features: DesignFeatures) -> PowerPrediction:
    """Group predictions from each head's own feature subset; totals are their exact sum."""
    S, C = features.e_index.shape
    out = np.zeros((S, C, 3))
    for k, h in enumerate(HEADS):
        if h == "clock_tree":
            p = models.models[h].predict(features.e_table)[features.e_index]
        else:
            p = models.models[h].predict(features.rows(h)).reshape(S, C)
        out[..., k] = p / UW
    return PowerPrediction(list(features.scopes), out)


def predict_sample(models: GroupModels, sample: SubModuleSample, e_g) -> GroupPower:
    f = extract_group_features(sample, e_g)
    ct = models.models["clock_tree"].predict(f.ct_row()[None])[0] / UW
    comb = models.models["combinational"].predict(f.comb_row()[None])[0] / UW
    reg = models.models["register"].predict(f.reg_row()[None])[0] / UW
    return GroupPower(float(comb), float(reg), float(ct))


def _stack(feats: Sequence[DesignFeatures], labels: Sequence[np.ndarray], head: str):
    k = HEADS.index(head)
    X = np.concatenate([f.rows(head) for f in feats])
    y = np.concatenate([lab[..., k].reshape(-1) for lab in labels]) * UW
    return X, y


def _mape(y: np.ndarray, p: np.ndarray) -> float:
    keep = y != 0
    return float(np.mean(np.abs(y[keep] - p[keep]) / np.abs(y[keep])) * 100.0) if keep.any() else float("nan")


def finetune_all(train: Mapping[str, DesignFeatures], train_labels: Mapping[str, np.ndarray],
                 config: FinetuneConfig, embed_dim: int,
                 val: Optional[Mapping[str, DesignFeatures]] = None,
                 val_labels: Optional[Mapping[str, np.ndarray]] = None):
    """Fit one GBRT per group on training designs; returns (GroupModels, per-group metrics)."""
    if not train:
        raise ValueError("empty training split")
    names = sorted(train)
    metrics: Dict[str, Dict[str, float]] = {}
    models = {}
    for h in HEADS:
        X, y = _stack([train[n] for n in names], [train_labels[n] for n in names], h)
        m = gbrt_fit(X, y, config.gbrt())
        models[h] = m
        p = m.predict(X)
        rec = {"train_mse_uw2": float(np.mean((p - y) ** 2)), "train_mape": _mape(y, p)}
        if val:
            vn = sorted(val)
            Xv, yv = _stack([val[n] for n in vn], [val_labels[n] for n in vn], h)
            pv = m.predict(Xv)
            rec.update({"val_mse_uw2": float(np.mean((pv - yv) ** 2)), "val_mape": _mape(yv, pv)})
            if rec["train_mape"] > rec["val_mape"]:
                warnings.warn(f"head '{h}': training MAPE exceeds held-out MAPE", RuntimeWarning)
        log.info("head %s: %s", h, rec)
        metrics[h] = rec
    return GroupModels(models, embed_dim, config.embedding_mode), metrics


__all__ = ["GroupFeatures", "extract_group_features", "group_feature_matrix", "scope_embeddings",
           "scope_embedding_table", "DesignFeatures", "features_from_graphs", "features_from_design_data", "prepare_netlist",
           "HEADS", "FinetuneConfig", "GroupModels", "PowerPrediction", "predict_total", "predict_sample",
           "finetune_all", "EMBED_MODES"]
