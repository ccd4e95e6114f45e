"""Metrics and reports: MAPE, pre-layout baseline, per-cycle traces, component tables, runtime accounting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .forge.oracle import GROUPS, GroupPower, group_power_trace
from .netlist.types import Library, Netlist, is_under
from .segment import GLUE

SERIES = GROUPS + ("total",)


def mape_detail(labels, preds) -> Tuple[float, int]:
    """MAPE in percent over nonzero labels and the number of zero-label entries skipped."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    keep = y != 0
    if not keep.any():
        raise ValueError("all labels are zero; MAPE is undefined")
    return float(np.mean(np.abs(y[keep] - p[keep]) / np.abs(y[keep])) * 100.0), int((~keep).sum())


def mape(labels, preds) -> float:
    return mape_detail(labels, preds)[0]


def baseline_prelayout(netlist: Netlist, library: Library, toggles, cycles: Optional[Sequence[int]] = None):
    """(n_cycles, 3) group power of the stage-G netlist with an ideal clock (no CK tree, no clock switching)."""
    tg = toggles.toggles if hasattr(toggles, "toggles") else np.asarray(toggles)
    if cycles is not None:
        tg = tg[:, np.asarray(cycles, dtype=np.int64)]
    return group_power_trace(netlist, library, tg, ideal_clock=True).T


def baseline_power(netlist: Netlist, library: Library, toggles, cycle: int) -> GroupPower:
    row = baseline_prelayout(netlist, library, toggles, [cycle])[0]
    return GroupPower(float(row[0]), float(row[1]), float(row[2]))


# -- component aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class ComponentRow:
    prefix: str
    n_scopes: int
    label_w: float      # mean over cycles of the component's total label
    pred_w: float
    mape: float


def _matches(scope: str, prefix: str) -> bool:
    if prefix == GLUE or scope == GLUE:
        return scope == prefix
    return is_under(scope, prefix)


def component_totals(values: np.ndarray, scopes: Sequence[str], prefixes: Sequence[str]) -> np.ndarray:
    """(len(prefixes), C) per-cycle totals; ``values`` is (S, C, 3) or (S, C)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v.sum(axis=2)
    out = np.zeros((len(prefixes), v.shape[1]))
    for k, pre in enumerate(prefixes):
        sel = [i for i, s in enumerate(scopes) if _matches(s, pre)]
        if not sel:
            raise ValueError(f"prefix '{pre}' matches no scope")
        out[k] = v[sel].sum(axis=0)
    return out


def component_report(preds: np.ndarray, labels: np.ndarray, scopes: Sequence[str],
                     prefixes: Sequence[str]) -> List[ComponentRow]:
    """Sum scope predictions and labels under each prefix; MAPE is over the per-cycle component totals."""
    p = component_totals(preds, scopes, prefixes)
    y = component_totals(labels, scopes, prefixes)
    rows = []
    for k, pre in enumerate(prefixes):
        n = sum(1 for s in scopes if _matches(s, pre))
        rows.append(ComponentRow(pre, n, float(y[k].mean()), float(p[k].mean()), mape(y[k], p[k])))
    return rows


# -- runtime ---------------------------------------------------------------------------

MODEL_PHASES = ("preprocess", "inference")
ORACLE_PHASES = ("layout", "simulate", "label")


@dataclass
class RuntimeReport:
    model: Dict[str, float]        # phase -> seconds (summed over designs)
    oracle: Dict[str, float]
    model_wall: float              # end-to-end timers around each path
    oracle_wall: float

    @property
    def model_total(self) -> float:
        return float(sum(self.model.values()))

    @property
    def oracle_total(self) -> float:
        return float(sum(self.oracle.values()))

    @property
    def speedup(self) -> float:
        return self.oracle_total / self.model_total if self.model_total > 0 else float("inf")

    def phase_consistency(self) -> float:
        """Largest relative gap between the phase sum and the end-to-end timer of either path."""
        gaps = [abs(self.model_total - self.model_wall) / self.model_wall,
                abs(self.oracle_total - self.oracle_wall) / self.oracle_wall]
        return float(max(gaps))

    def rows(self) -> List[Tuple[str, str, float]]:
        out = [("model", k, v) for k, v in self.model.items()]
        out += [("oracle", k, v) for k, v in self.oracle.items()]
        out += [("model", "total", self.model_total), ("oracle", "total", self.oracle_total)]
        return out

    def to_dict(self) -> dict:
        return {"model": self.model, "oracle": self.oracle, "model_total_s": self.model_total,
                "oracle_total_s": self.oracle_total, "model_wall_s": self.model_wall,
                "oracle_wall_s": self.oracle_wall, "speedup": self.speedup}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "phase", "seconds"])
        for r in self.rows():
            w.writerow([r[0], r[1], f"{r[2]:.6f}"])
        w.writerow(["ratio", "speedup", f"{self.speedup:.4f}"])
        return buf.getvalue()


def runtime_report(timings: Sequence[Mapping[str, Mapping[str, float]]]) -> RuntimeReport:
    """Aggregate per-design timings ``{"model": {...}, "oracle": {...}, "wall": {"model": s, "oracle": s}}``."""
    model = {k: 0.0 for k in MODEL_PHASES}
    oracle = {k: 0.0 for k in ORACLE_PHASES}
    mw = ow = 0.0
    for t in timings:
        for k, v in t["model"].items():
            model[k] = model.get(k, 0.0) + float(v)
        for k, v in t["oracle"].items():
            oracle[k] = oracle.get(k, 0.0) + float(v)
        mw += float(t["wall"]["model"])
        ow += float(t["wall"]["oracle"])
    return RuntimeReport(model, oracle, mw, ow)


# -- design report --------------------------------------------------------------------

@dataclass
class EvalReport:
    design: str
    n_cycles: int
    model_mape: Dict[str, float]
    baseline_mape: Dict[str, float]
    excluded: Dict[str, int]
    labels: np.ndarray = field(repr=False)      # (C, 3)
    preds: np.ndarray = field(repr=False)
    baseline: np.ndarray = field(repr=False)
    components: List[ComponentRow] = field(default_factory=list)

    def summary(self) -> dict:
        return {"design": self.design, "n_cycles": self.n_cycles,
                "model_mape": {k: round(v, 6) for k, v in self.model_mape.items()},
                "baseline_mape": {k: round(v, 6) for k, v in self.baseline_mape.items()},
                "excluded_cycles": self.excluded,
                "components": [{**asdict(c), "label_w": float(f"{c.label_w:.9e}"),
                                "pred_w": float(f"{c.pred_w:.9e}"), "mape": round(c.mape, 6)}
                               for c in self.components]}

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["cycle"]
        for g in SERIES:
            head += [f"{g}_label_w", f"{g}_pred_w", f"{g}_baseline_w"]
        w.writerow(head)
        L, P, B = (np.column_stack([a, a.sum(axis=1)]) for a in (self.labels, self.preds, self.baseline))
        for c in range(self.n_cycles):
            row = [c]
            for k in range(4):
                row += [f"{L[c, k]:.9e}", f"{P[c, k]:.9e}", f"{B[c, k]:.9e}"]
            w.writerow(row)
        return buf.getvalue()

    def plot_csv(self) -> str:
        """Long format (cycle, series, watts) for external plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cycle", "series", "watts"])
        for name, arr in (("label", self.labels), ("pred", self.preds), ("baseline", self.baseline)):
            full = np.column_stack([arr, arr.sum(axis=1)])
            for k, g in enumerate(SERIES):
                for c in range(self.n_cycles):
                    w.writerow([c, f"{g}_{name}", f"{full[c, k]:.9e}"])
        return buf.getvalue()

    def components_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design", "prefix", "n_scopes", "label_w", "pred_w", "mape"])
        for c in self.components:
            w.writerow([self.design, c.prefix, c.n_scopes, f"{c.label_w:.9e}", f"{c.pred_w:.9e}",
                        f"{c.mape:.6f}"])
        return buf.getvalue()


def evaluate_design(design: str, labels_sc: np.ndarray, preds_sc: np.ndarray, baseline: np.ndarray,
                    scopes: Sequence[str], prefixes: Optional[Sequence[str]] = None) -> EvalReport:
    """Design-level report from per-scope (S, C, 3) labels and predictions and a (C, 3) baseline."""
    lab = labels_sc.sum(axis=0)
    pred = preds_sc.sum(axis=0)
    mm, bm, ex = {}, {}, {}
    for k, g in enumerate(SERIES):
        y = lab.sum(axis=1) if g == "total" else lab[:, k]
        p = pred.sum(axis=1) if g == "total" else pred[:, k]
        b = baseline.sum(axis=1) if g == "total" else baseline[:, k]
        mm[g], ex[g] = mape_detail(y, p)
        bm[g] = mape(y, b)
    comps = component_report(preds_sc, labels_sc, scopes, list(prefixes)) if prefixes else []
    return EvalReport(design, lab.shape[0], mm, bm, ex, lab, pred, baseline, comps)


def summary_json(reports: Sequence[EvalReport]) -> str:
    """Deterministic JSON of the accuracy metrics (no timings)."""
    agg = {}
    for g in SERIES:
        agg[g] = {"model_mape": round(float(np.mean([r.model_mape[g] for r in reports])), 6),
                  "baseline_mape": round(float(np.mean([r.baseline_mape[g] for r in reports])), 6)}
    return json.dumps({"format_version": 1, "designs": [r.summary() for r in reports], "mean": agg},
                      indent=1, sort_keys=True)


__all__ = ["mape", "mape_detail", "baseline_prelayout", "baseline_power", "ComponentRow", "component_totals",
           "component_report", "RuntimeReport", "runtime_report", "EvalReport", "evaluate_design",
           "summary_json", "SERIES", "MODEL_PHASES", "ORACLE_PHASES"]
