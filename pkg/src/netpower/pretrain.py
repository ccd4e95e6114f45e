"""Self-supervised pre-training: masking, the five task losses, Adam, and the epoch loop."""
from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .encoder import (Encoder, EncoderConfig, GraphBatch, IN_DIM, init_weights, load_checkpoint,
                      save_checkpoint)
from .netlist.types import N_NODE_TYPES, Stage
from .segment import FEATURE_WIDTH, TOGGLE_COL, DesignData, SubModuleSample

log = logging.getLogger(__name__)


class MaskKind(enum.IntEnum):
    TOGGLE = 0
    TYPE = 1


@dataclass(frozen=True, eq=False)
class MaskedSample:
    """A sample with masked nodes; ``features`` already carries the two indicator channels."""

    base: SubModuleSample
    features: np.ndarray                     # (n, 23)
    toggle_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    toggle_truth: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    type_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    type_truth: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def graph(self):
        return self.base.graph

    @property
    def n_nodes(self) -> int:
        return self.base.n_nodes

    def ids(self, kind: MaskKind) -> np.ndarray:
        return self.toggle_ids if kind == MaskKind.TOGGLE else self.type_ids


def n_masked(ratio: float, n: int) -> int:
    return min(n, int(math.ceil(ratio * n - 1e-9)))


def apply_mask(sample, kind: MaskKind, ratio: float, seed) -> MaskedSample:
    """Mask ``ceil(ratio * n)`` nodes of one kind, avoiding nodes already masked for the other kind."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if isinstance(sample, MaskedSample):
        base, feats = sample.base, sample.features.copy()
        prev = sample
    else:
        base = sample
        feats = np.concatenate([sample.features, np.zeros((sample.n_nodes, 2))], axis=1)
        prev = None
    n = base.n_nodes
    taken = np.zeros(n, dtype=bool)
    if prev is not None:
        taken[prev.toggle_ids] = True
        taken[prev.type_ids] = True
    free = np.nonzero(~taken)[0]
    k = min(n_masked(ratio, n), free.size)
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(free, size=k, replace=False)) if k else np.zeros(0, np.int64)
    kw = {} if prev is None else {"toggle_ids": prev.toggle_ids, "toggle_truth": prev.toggle_truth,
                                  "type_ids": prev.type_ids, "type_truth": prev.type_truth}
    if kind == MaskKind.TOGGLE:
        kw["toggle_truth"] = base.features[ids, TOGGLE_COL].astype(np.int64)
        kw["toggle_ids"] = ids
        feats[ids, TOGGLE_COL] = 0.0
        feats[ids, FEATURE_WIDTH] = 1.0
    else:
        kw["type_truth"] = np.argmax(base.features[ids, :N_NODE_TYPES], axis=1).astype(np.int64) \
            if k else np.zeros(0, np.int64)
        kw["type_ids"] = ids
        feats[ids, :N_NODE_TYPES] = 0.0
        feats[ids, FEATURE_WIDTH + 1] = 1.0
    return MaskedSample(base, feats, **kw)


# -- losses ------------------------------------------------------------------------

def _t(x, dtype=torch.float64) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def loss_masked_toggle(p, t) -> torch.Tensor:
    """Mean binary cross-entropy; ``p`` is the predicted probability of a toggle."""
    p, t = _t(p), _t(t)
    if p.numel() == 0:
        raise ValueError("empty mask set")
    p = p.clamp(1e-12, 1 - 1e-12)
    t = t.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def loss_masked_type(q, c) -> torch.Tensor:
    """Mean categorical cross-entropy of distributions ``q`` against labels/one-hots ``c``."""
    q = _t(q)
    if q.shape[0] == 0:
        raise ValueError("empty mask set")
    c = _t(c, torch.int64) if not isinstance(c, torch.Tensor) else c
    if c.dim() == 2:
        c = c.argmax(dim=1)
    return -torch.log(q.clamp_min(1e-12).gather(1, c.long()[:, None])).mean()


def loss_size(pred, true) -> torch.Tensor:
    pred, true = _t(pred), _t(true)
    return ((pred - true.to(pred.dtype)) ** 2).mean()


def info_nce(anchor, positive, negatives, tau: float = 0.07) -> torch.Tensor:
    """-log softmax of the positive similarity among {positive} U negatives (cosine similarity)."""
    a, p = _t(anchor), _t(positive)
    negs = _t(negatives)
    if negs.dim() == 1:
        negs = negs[None]
    for name, e in (("anchor", a), ("positive", p)):
        if float(torch.linalg.vector_norm(e.detach())) == 0.0:
            raise ValueError(f"zero-norm {name} embedding")
    if negs.numel() and bool((torch.linalg.vector_norm(negs, dim=-1) == 0).any()):
        raise ValueError("zero-norm negative embedding")
    cos = torch.nn.functional.cosine_similarity
    s_pos = cos(a, p, dim=-1) / tau
    s_neg = cos(a[None], negs, dim=-1) / tau
    logits = torch.cat([s_pos[None], s_neg])
    return -(s_pos - torch.logsumexp(logits, dim=0))


def info_nce_matrix(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor,
                    tau: float = 0.07) -> torch.Tensor:
    """Mean in-batch InfoNCE: anchor i, positive i, negatives ``negatives[j]`` for j != i."""
    B = anchors.shape[0]
    a = torch.nn.functional.normalize(anchors, dim=1, eps=1e-12)
    p = torch.nn.functional.normalize(positives, dim=1, eps=1e-12)
    n = torch.nn.functional.normalize(negatives, dim=1, eps=1e-12)
    s_pos = (a * p).sum(dim=1) / tau
    s_neg = a @ n.T / tau
    eye = torch.eye(B, dtype=torch.bool)
    s_neg = s_neg.masked_fill(eye, float("-inf"))
    logits = torch.cat([s_pos[:, None], s_neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - s_pos).mean()


# -- heads and batches -------------------------------------------------------------

class MLPHead(torch.nn.Module):
    """d -> d -> k perceptron with a ReLU hidden layer."""

    def __init__(self, d: int, k: int, gen: torch.Generator):
        super().__init__()
        self.w1 = torch.nn.Parameter((torch.randn(d, d, generator=gen, dtype=torch.float64) / math.sqrt(d)).float())
        self.b1 = torch.nn.Parameter(torch.zeros(d))
        self.w2 = torch.nn.Parameter((torch.randn(d, k, generator=gen, dtype=torch.float64) / math.sqrt(d)).float())
        self.b2 = torch.nn.Parameter(torch.zeros(k))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def make_heads(config: EncoderConfig, dtype: torch.dtype = torch.float32) -> torch.nn.ModuleDict:
    gen = torch.Generator().manual_seed(config.seed + 7919)
    d = config.embed_dim
    return torch.nn.ModuleDict({
        "toggle": MLPHead(d, 2, gen), "node_type": MLPHead(d, N_NODE_TYPES, gen), "size": MLPHead(d, 1, gen),
    }).to(dtype)


@dataclass
class Quadruple:
    """Aligned views of one scope at one cycle: masked G, G+, P."""

    g: MaskedSample
    gplus: SubModuleSample
    p: SubModuleSample
    key: Tuple[str, str]


@dataclass
class LossBreakdown:
    l_mt: torch.Tensor
    l_mn: torch.Tensor
    l_size: torch.Tensor
    l_cl1: torch.Tensor
    l_cl2: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_mt + self.l_mn + self.l_size + self.l_cl1 + self.l_cl2

    def values(self) -> Dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("l_mt", "l_mn", "l_size", "l_cl1", "l_cl2")}
        out["total"] = float(self.total.detach())
        return out


def batch_graphs(samples: Sequence, dtype: torch.dtype) -> GraphBatch:
    xs = []
    for s in samples:
        f = s.features
        xs.append(f if f.shape[1] == IN_DIM else np.concatenate([f, np.zeros((f.shape[0], 2))], axis=1))
    return GraphBatch(np.concatenate(xs), [s.graph.edges for s in samples], [s.n_nodes for s in samples], dtype)


def _head(heads, name):
    return heads[name] if name in heads else None


def _enabled(heads, name) -> bool:
    return name not in heads or heads[name] is not None


def total_loss(batch: Sequence[Quadruple], encoder: Encoder, heads: Mapping[str, torch.nn.Module],
               tau: float = 0.07, stop_grad_p: bool = False, raw_size: bool = False) -> LossBreakdown:
    """Unweighted sum of the five task losses for one batch of aligned quadruples.

    A missing head (``toggle``, ``node_type``, ``size``) or a missing contrastive
    entry (``cl1``, ``cl2`` set to None in ``heads``) zeroes that component.
    """
    B = len(batch)
    if B < 2:
        raise ValueError("a batch needs at least two quadruples (in-batch negatives)")
    keys = [q.key for q in batch]
    if len(set(keys)) != B:
        raise ValueError("scopes within a batch must be pairwise distinct")
    dtype = encoder.dtype
    gb = batch_graphs([q.g for q in batch] + [q.gplus for q in batch] + [q.p for q in batch], dtype)
    emb = encoder(gb)
    e_g, e_gp, e_p = emb.graph_emb[:B], emb.graph_emb[B:2 * B], emb.graph_emb[2 * B:]
    zero = emb.graph_emb.sum() * 0.0
    offs = gb.offsets[:B]

    l_mt = zero
    if _head(heads, "toggle") is not None:
        idx = np.concatenate([q.g.toggle_ids + o for q, o in zip(batch, offs)])
        if idx.size:
            truth = torch.as_tensor(np.concatenate([q.g.toggle_truth for q in batch]))
            logits = heads["toggle"](emb.node_embs[torch.as_tensor(idx)])
            l_mt = torch.nn.functional.cross_entropy(logits, truth)
    l_mn = zero
    if _head(heads, "node_type") is not None:
        idx = np.concatenate([q.g.type_ids + o for q, o in zip(batch, offs)])
        if idx.size:
            truth = torch.as_tensor(np.concatenate([q.g.type_truth for q in batch]))
            logits = heads["node_type"](emb.node_embs[torch.as_tensor(idx)])
            l_mn = torch.nn.functional.cross_entropy(logits, truth)
    l_size = zero
    if _head(heads, "size") is not None:
        n = torch.as_tensor([float(q.g.n_nodes) for q in batch], dtype=dtype)
        target = n if raw_size else torch.log2(n)
        l_size = loss_size(heads["size"](e_g)[:, 0], target)
    l_cl1 = info_nce_matrix(e_g, e_gp, e_g, tau) if _enabled(heads, "cl1") else zero
    ep = e_p.detach() if stop_grad_p else e_p
    l_cl2 = info_nce_matrix(e_g, ep, ep, tau) if _enabled(heads, "cl2") else zero
    return LossBreakdown(l_mt, l_mn, l_size, l_cl1, l_cl2)


# -- optimiser -----------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: OptimizerState) -> OptimizerState:
    """In-place bias-corrected Adam update of ``params``; aborts on non-finite gradients."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in '{name}' at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if p.shape != g.shape:
                raise ValueError(f"gradient shape mismatch for '{name}'")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


# -- training loop -----------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    tau: float = 0.07
    mask_ratio: float = 0.15
    cycles_per_scope: int = 0          # 0 = every cycle
    checkpoint_every: int = 10
    seed: int = 0
    stop_grad_p: bool = False
    raw_size: bool = False


def make_batches(items: Sequence[Tuple[str, str, int]], batch_size: int,
                 rng: np.random.Generator) -> List[List[Tuple[str, str, int]]]:
    """Shuffle and pack into batches whose (design, scope) keys are pairwise distinct."""
    order = rng.permutation(len(items))
    open_batches: List[List[Tuple[str, str, int]]] = []
    keysets: List[set] = []
    done: List[List[Tuple[str, str, int]]] = []
    for i in order:
        it = items[i]
        key = (it[0], it[1])
        for b, ks in zip(open_batches, keysets):
            if key not in ks:
                b.append(it)
                ks.add(key)
                break
        else:
            open_batches.append([it])
            keysets.append({key})
        full = [k for k, b in enumerate(open_batches) if len(b) == batch_size]
        for k in reversed(full):
            done.append(open_batches.pop(k))
            keysets.pop(k)
    done.extend(b for b in open_batches if len(b) >= 2)
    return done


def training_items(data: Mapping[str, DesignData], designs: Iterable[str], cycles_per_scope: int,
                   seed: int) -> List[Tuple[str, str, int]]:
    items = []
    for d in sorted(designs):
        dd = data[d]
        cycles = np.arange(dd.n_cycles)
        if cycles_per_scope and cycles_per_scope < dd.n_cycles:
            cycles = np.sort(np.random.default_rng([seed, len(d)]).choice(dd.n_cycles, cycles_per_scope,
                                                                           replace=False))
        for s in dd.scopes:
            items.extend((d, s, int(c)) for c in cycles)
    return items


def make_quadruple(data: Mapping[str, DesignData], item: Tuple[str, str, int], ratio: float,
                   seed) -> Quadruple:
    d, s, c = item
    dd = data[d]
    g = dd.sample(s, Stage.G, c)
    m = apply_mask(g, MaskKind.TOGGLE, ratio, [*seed, 0])
    m = apply_mask(m, MaskKind.TYPE, ratio, [*seed, 1])
    return Quadruple(m, dd.sample(s, Stage.G_PLUS, c), dd.sample(s, Stage.P, c), (d, s))


LOG_FIELDS = ["epoch", "batch", "l_mt", "l_mn", "l_size", "l_cl1", "l_cl2", "total"]


@dataclass
class PretrainResult:
    encoder: Encoder
    heads: torch.nn.ModuleDict
    state: OptimizerState
    log: List[Dict[str, float]]
    epoch_means: List[float]


def _named_params(encoder: Encoder, heads: torch.nn.ModuleDict) -> Dict[str, torch.nn.Parameter]:
    out = {f"encoder/{k}": p for k, p in encoder.named_parameters()}
    out.update({f"heads/{k}": p for k, p in heads.named_parameters()})
    return out


def save_pretrain_checkpoint(path: str, res: PretrainResult, config: EncoderConfig, epoch: int,
                             pcfg: PretrainConfig) -> None:
    modules = {"encoder": res.encoder, "heads": res.heads}
    opt = {}
    for k, t in res.state.m.items():
        opt[f"m::{k}"] = t
        opt[f"v::{k}"] = res.state.v[k]
    holder = torch.nn.Module()
    for i, (k, t) in enumerate(sorted(opt.items())):
        holder.register_buffer(f"b{i}", t.detach().clone())
    names = [k for k, _ in sorted(opt.items())]
    modules["adam"] = holder
    save_checkpoint(path, modules, config, extra={"epoch": epoch, "step": res.state.step,
                                                 "adam_names": names, "pretrain": asdict(pcfg),
                                                 "epoch_means": res.epoch_means})


def load_pretrain_checkpoint(path: str, dtype: torch.dtype = torch.float32):
    config, groups, meta = load_checkpoint(path)
    enc = init_weights(config, dtype)
    enc.load_arrays(groups["encoder"])
    heads = make_heads(config, dtype)
    hstate = heads.state_dict()
    heads.load_state_dict({k: torch.as_tensor(groups["heads"][k], dtype=hstate[k].dtype) for k in hstate})
    extra = meta["extra"]
    pcfg = PretrainConfig(**extra["pretrain"]) if "pretrain" in extra else PretrainConfig()
    state = OptimizerState(lr=pcfg.lr, step=int(extra.get("step", 0)))
    for i, name in enumerate(extra.get("adam_names", [])):
        kind, pname = name.split("::", 1)
        t = torch.as_tensor(groups["adam"][f"b{i}"], dtype=dtype)
        (state.m if kind == "m" else state.v)[pname] = t
    return config, enc, heads, state, extra


def pretrain(data: Mapping[str, DesignData], designs: Sequence[str], enc_config: EncoderConfig,
             config: PretrainConfig, out_dir: Optional[str] = None, resume: Optional[str] = None,
             stop_after: Optional[int] = None) -> PretrainResult:
    """Joint five-task training; deterministic under ``config.seed`` (also across resume)."""
    items = training_items(data, designs, config.cycles_per_scope, config.seed)
    if not items:
        raise ValueError("empty training manifest")
    torch.manual_seed(config.seed)
    if resume:
        enc_config, encoder, heads, state, extra = load_pretrain_checkpoint(resume)
        start = int(extra["epoch"])
        epoch_means = list(extra.get("epoch_means", []))
    else:
        encoder = init_weights(enc_config)
        heads = make_heads(enc_config)
        # start the size regressor at the corpus mean so early steps are not spent on the offset
        sizes = [data[d].graphs[s][Stage.G].n_nodes for d, s in sorted({(d, s) for d, s, _ in items})]
        target = np.mean(sizes if config.raw_size else np.log2(sizes))
        with torch.no_grad():
            heads["size"].b2.fill_(float(target))
        state = OptimizerState(lr=config.lr)
        start = 0
        epoch_means = []
    params = _named_params(encoder, heads)
    res = PretrainResult(encoder, heads, state, [], epoch_means)
    log_fh = None
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "pretrain_log.csv")
        fresh = not resume or not os.path.exists(log_path)
        log_fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    try:
        for epoch in range(start, last):
            rng = np.random.default_rng([config.seed, epoch])
            batches = make_batches(items, config.batch_size, rng)
            totals = []
            for bi, batch in enumerate(batches):
                quads = [make_quadruple(data, it, config.mask_ratio, (config.seed, epoch, bi, k))
                         for k, it in enumerate(batch)]
                lb = total_loss(quads, encoder, heads, config.tau, config.stop_grad_p, config.raw_size)
                loss = lb.total
                grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
                adam_step(params, {k: g for k, g in zip(params, grads)}, state)
                row = {"epoch": epoch, "batch": bi, **lb.values()}
                res.log.append(row)
                totals.append(row["total"])
                if writer:
                    writer.writerow(row)
            epoch_means.append(float(np.mean(totals)) if totals else float("nan"))
            log.info("epoch %d mean loss %.4f over %d batches", epoch, epoch_means[-1], len(batches))
            if out_dir and ((epoch + 1) % max(config.checkpoint_every, 1) == 0 or epoch + 1 == config.epochs):
                save_pretrain_checkpoint(os.path.join(out_dir, f"pretrain_e{epoch + 1:03d}.npz"), res,
                                         enc_config, epoch + 1, config)
        if out_dir:
            save_pretrain_checkpoint(os.path.join(out_dir, "pretrain.npz"), res, enc_config, last, config)
    finally:
        if log_fh:
            log_fh.close()
    return res


# -- held-out evaluation of the masked tasks ---------------------------------------------

@torch.no_grad()
def masked_task_accuracy(data: Mapping[str, DesignData], designs: Sequence[str], encoder: Encoder,
                         heads: Mapping[str, torch.nn.Module], ratio: float = 0.15, seed: int = 12345,
                         cycles_per_scope: int = 20, batch_graphs_n: int = 32) -> Dict[str, float]:
    """Masked node-type accuracy and masked-toggle balanced accuracy on the given designs."""
    items = training_items(data, designs, cycles_per_scope, seed)
    type_ok = type_n = 0
    tp = tn = pos = neg = 0
    for start in range(0, len(items), batch_graphs_n):
        chunk = items[start:start + batch_graphs_n]
        ms = []
        for k, (d, s, c) in enumerate(chunk):
            g = data[d].sample(s, Stage.G, c)
            m = apply_mask(g, MaskKind.TOGGLE, ratio, [seed, start, k, 0])
            ms.append(apply_mask(m, MaskKind.TYPE, ratio, [seed, start, k, 1]))
        gb = batch_graphs(ms, encoder.dtype)
        emb = encoder(gb)
        t_idx = np.concatenate([m.toggle_ids + o for m, o in zip(ms, gb.offsets)])
        y_idx = np.concatenate([m.type_ids + o for m, o in zip(ms, gb.offsets)])
        if t_idx.size:
            pred = heads["toggle"](emb.node_embs[torch.as_tensor(t_idx)]).argmax(1).numpy()
            truth = np.concatenate([m.toggle_truth for m in ms])
            tp += int(((pred == 1) & (truth == 1)).sum())
            tn += int(((pred == 0) & (truth == 0)).sum())
            pos += int((truth == 1).sum())
            neg += int((truth == 0).sum())
        if y_idx.size:
            pred = heads["node_type"](emb.node_embs[torch.as_tensor(y_idx)]).argmax(1).numpy()
            truth = np.concatenate([m.type_truth for m in ms])
            type_ok += int((pred == truth).sum())
            type_n += truth.size
    rec1 = tp / pos if pos else float("nan")
    rec0 = tn / neg if neg else float("nan")
    return {"type_accuracy": type_ok / max(type_n, 1), "toggle_balanced_accuracy": 0.5 * (rec1 + rec0),
            "n_type": type_n, "n_toggle": pos + neg}


__all__ = ["MaskKind", "MaskedSample", "apply_mask", "loss_masked_toggle", "loss_masked_type", "loss_size",
           "info_nce", "info_nce_matrix", "MLPHead", "make_heads", "Quadruple", "LossBreakdown", "total_loss",
           "OptimizerState", "adam_step", "PretrainConfig", "make_batches", "pretrain", "PretrainResult",
           "load_pretrain_checkpoint", "masked_task_accuracy", "training_items", "make_quadruple"]
