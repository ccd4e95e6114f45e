"""Graph encoder: directed mean-aggregation message passing plus one linear-attention layer.

Per graph with node inputs X (n x 23):

    h  = ReLU(norm(X) W_x + b_x)
    h  = h + ReLU(mean_in(h) W_in^l + mean_out(h) W_out^l + b^l)     for each layer l
    Q, K, V = h W_q, h W_k, h W_v
    Z  = beta V + (1 - beta) attn(Q, K, V)
    node_emb = (h + Z) W_o + b_o + log2(n) s
    E_g = mean(node_emb)

``attn`` uses the non-negative kernel 1 + cos(q_i, k_j), evaluated in linear
time as (sum_j v_j + q~_i (K~^T V)) / (n + q~_i (K~^T 1)).  ``s`` is a learned
size token so the pooled embedding is not blind to graph size.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .segment import ENERGY_COL, FEATURE_WIDTH, LEAK_COL

CHECKPOINT_VERSION = 1
MASK_CHANNELS = 2
IN_DIM = FEATURE_WIDTH + MASK_CHANNELS
EPS = 1e-12
# fixed input scaling: pJ energies and nW leakage brought to O(1)
_ENERGY_SCALE = 100.0
_LEAK_SCALE = 0.05


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    mp_layers: int = 2
    beta: float = 0.5
    seed: int = 0
    in_dim: int = IN_DIM

    def validate(self) -> None:
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be at least 8")
        if self.mp_layers < 1:
            raise ValueError("mp_layers must be at least 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass
class Embeddings:
    node_embs: torch.Tensor   # (N, d) over all graphs of a batch
    graph_emb: torch.Tensor   # (B, d)
    graph_index: torch.Tensor  # (N,)


class GraphBatch:
    """Several graphs stacked block-diagonally; nodes of a graph are contiguous."""

    def __init__(self, x: np.ndarray, edges: Sequence[np.ndarray], sizes: Sequence[int],
                 dtype: torch.dtype = torch.float32):
        self.sizes = [int(s) for s in sizes]
        if any(s <= 0 for s in self.sizes):
            raise ValueError("empty graph in batch")
        n = sum(self.sizes)
        if x.shape != (n, IN_DIM):
            raise ValueError(f"feature matrix shape {x.shape}, expected ({n}, {IN_DIM})")
        self.dtype = dtype
        self.x = torch.as_tensor(_normalise(x), dtype=dtype)
        offs = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        self.offsets = offs
        src = np.concatenate([e[0] + o for e, o in zip(edges, offs)]) if edges else np.zeros(0, np.int64)
        dst = np.concatenate([e[1] + o for e, o in zip(edges, offs)]) if edges else np.zeros(0, np.int64)
        self.a_in = _mean_operator(dst, src, n, dtype)    # row i averages over predecessors of i
        self.a_out = _mean_operator(src, dst, n, dtype)   # row i averages over successors of i
        self.graph_index = torch.as_tensor(np.repeat(np.arange(len(self.sizes)), self.sizes))
        self.n_graphs = len(self.sizes)
        # padded layout for per-graph attention sums
        self.n_max = max(self.sizes)
        pos = np.concatenate([np.arange(s) for s in self.sizes])
        self.pad_index = torch.as_tensor(self.graph_index.numpy() * self.n_max + pos)
        self.counts = torch.as_tensor(self.sizes, dtype=dtype)

    @classmethod
    def from_samples(cls, samples, masks: Optional[Sequence[Optional[np.ndarray]]] = None,
                     dtype: torch.dtype = torch.float32) -> "GraphBatch":
        xs = []
        for k, s in enumerate(samples):
            m = None if masks is None else masks[k]
            xs.append(with_mask_channels(s.features, m))
        return cls(np.concatenate(xs), [s.graph.edges for s in samples], [s.n_nodes for s in samples], dtype)

    def to(self, dtype: torch.dtype) -> "GraphBatch":
        out = object.__new__(GraphBatch)
        out.__dict__.update(self.__dict__)
        out.dtype = dtype
        out.x = self.x.to(dtype)
        out.a_in = self.a_in.to(dtype)
        out.a_out = self.a_out.to(dtype)
        out.counts = self.counts.to(dtype)
        return out


def with_mask_channels(features: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Append the two mask indicator channels (zeros when no mask is given)."""
    if features.shape[1] == IN_DIM:
        return features
    if mask is None:
        mask = np.zeros((features.shape[0], MASK_CHANNELS))
    return np.concatenate([features, mask], axis=1)


def _normalise(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    x[:, ENERGY_COL] *= _ENERGY_SCALE
    x[:, LEAK_COL] *= _LEAK_SCALE
    return x


def _mean_operator(row: np.ndarray, col: np.ndarray, n: int, dtype) -> torch.Tensor:
    if row.size == 0:
        return torch.sparse_coo_tensor(torch.zeros((2, 0), dtype=torch.long), torch.zeros(0, dtype=dtype),
                                       (n, n), check_invariants=False).coalesce()
    deg = np.bincount(row, minlength=n).astype(np.float64)
    vals = 1.0 / deg[row]
    idx = torch.as_tensor(np.stack([row, col]))
    return torch.sparse_coo_tensor(idx, torch.as_tensor(vals, dtype=dtype), (n, n), check_invariants=False).coalesce()


class Encoder(torch.nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        gen = torch.Generator().manual_seed(config.seed)

        def mat(fan_in: int, fan_out: int) -> torch.nn.Parameter:
            w = torch.randn(fan_in, fan_out, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
            return torch.nn.Parameter(w.float())

        self.w_x = mat(config.in_dim, d)
        self.b_x = torch.nn.Parameter(torch.zeros(d))
        self.w_in = torch.nn.ParameterList([mat(d, d) for _ in range(config.mp_layers)])
        self.w_out = torch.nn.ParameterList([mat(d, d) for _ in range(config.mp_layers)])
        self.b_mp = torch.nn.ParameterList([torch.nn.Parameter(torch.zeros(d)) for _ in range(config.mp_layers)])
        self.w_q = mat(d, d)
        self.w_k = mat(d, d)
        self.w_v = mat(d, d)
        self.w_o = mat(d, d)
        self.b_o = torch.nn.Parameter(torch.zeros(d))
        self.size_token = torch.nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64).float() / math.sqrt(d))

    @property
    def dtype(self) -> torch.dtype:
        return self.w_x.dtype

    def forward(self, batch: GraphBatch) -> Embeddings:
        if batch.dtype != self.dtype:
            batch = batch.to(self.dtype)
        h = torch.relu(batch.x @ self.w_x + self.b_x)
        for w_in, w_out, b in zip(self.w_in, self.w_out, self.b_mp):
            m_in = torch.sparse.mm(batch.a_in, h)
            m_out = torch.sparse.mm(batch.a_out, h)
            h = h + torch.relu(m_in @ w_in + m_out @ w_out + b)
        q, k, v = h @ self.w_q, h @ self.w_k, h @ self.w_v
        beta = self.config.beta
        z = beta * v + (1.0 - beta) * batched_linear_attention(q, k, v, batch) if beta < 1.0 else v
        sizes = torch.log2(batch.counts)[batch.graph_index]
        node = (h + z) @ self.w_o + self.b_o + sizes[:, None] * self.size_token
        pooled = torch.zeros(batch.n_graphs, node.shape[1], dtype=node.dtype).index_add_(0, batch.graph_index, node)
        return Embeddings(node, pooled / batch.counts[:, None], batch.graph_index)

    # -- checkpoint ------------------------------------------------------------
    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().double().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        state = self.state_dict()
        missing = set(state) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks arrays: {sorted(missing)}")
        for k, ref in state.items():
            a = arrays[k]
            if tuple(a.shape) != tuple(ref.shape):
                raise ValueError(f"array '{k}' has shape {a.shape}, expected {tuple(ref.shape)}")
        self.load_state_dict({k: torch.as_tensor(arrays[k], dtype=state[k].dtype) for k in state})


def _normalise_rows(x: torch.Tensor) -> torch.Tensor:
    return x / torch.clamp(torch.linalg.vector_norm(x, dim=-1, keepdim=True), min=EPS)


def batched_linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
    """Per-graph kernel attention in O(n d^2), graphs laid out in a zero-padded (B, n_max, d) block."""
    d = q.shape[1]
    qn, kn = _normalise_rows(q), _normalise_rows(k)
    B, m = batch.n_graphs, batch.n_max

    def pad(t: torch.Tensor) -> torch.Tensor:
        out = torch.zeros(B * m, t.shape[1], dtype=t.dtype)
        out = out.index_copy(0, batch.pad_index, t)
        return out.view(B, m, t.shape[1])

    kp, vp = pad(kn), pad(v)
    kv = torch.bmm(kp.transpose(1, 2), vp)          # (B, d, d)
    ksum = kp.sum(dim=1)                            # (B, d)
    vsum = vp.sum(dim=1)                            # (B, d)
    gi = batch.graph_index
    qkv = torch.bmm(pad(qn), kv).view(B * m, d).index_select(0, batch.pad_index)
    num = vsum[gi] + qkv
    den = batch.counts[gi] + (qn * ksum[gi]).sum(dim=1)
    return num / (den[:, None] + EPS)


def linear_attention(q, k, v, beta: float = 0.0):
    """Single-graph mix Z = beta V + (1 - beta) attn(Q, K, V); numpy or torch in, same type out."""
    is_np = isinstance(q, np.ndarray)
    qt, kt, vt = (torch.as_tensor(a, dtype=torch.float64) if is_np else a for a in (q, k, v))
    qn, kn = _normalise_rows(qt), _normalise_rows(kt)
    n = qt.shape[0]
    num = vt.sum(dim=0, keepdim=True) + qn @ (kn.T @ vt)
    den = n + qn @ kn.sum(dim=0)
    z = beta * vt + (1.0 - beta) * num / (den[:, None] + EPS)
    return z.numpy() if is_np else z


def dense_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, beta: float = 0.0) -> np.ndarray:
    """O(n^2) evaluation of the same kernel, for testing."""
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), EPS)
    kn = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), EPS)
    a = 1.0 + qn @ kn.T
    return beta * v + (1.0 - beta) * (a @ v) / (a.sum(axis=1, keepdims=True) + EPS)


def init_weights(config: EncoderConfig, dtype: torch.dtype = torch.float32) -> Encoder:
    return Encoder(config).to(dtype)


def encode(weights: Encoder, samples, masks=None) -> Embeddings:
    """Encode one sample or a list of samples (masks optional, per sample)."""
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
        masks = None if masks is None else [masks]
    if any(s.n_nodes == 0 for s in samples):
        raise ValueError("cannot encode an empty graph")
    return weights(GraphBatch.from_samples(samples, masks, dtype=weights.dtype))


def encode_grad(weights: Encoder, samples, upstream_node: Optional[torch.Tensor] = None,
                upstream_graph: Optional[torch.Tensor] = None, masks=None) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of <upstream, embeddings> with respect to every weight."""
    emb = encode(weights, samples, masks)
    total = emb.node_embs.sum() * 0.0
    if upstream_node is not None:
        if upstream_node.shape != emb.node_embs.shape:
            raise ValueError("upstream node gradient has the wrong shape")
        total = total + (emb.node_embs * upstream_node.to(emb.node_embs.dtype)).sum()
    if upstream_graph is not None:
        if upstream_graph.shape != emb.graph_emb.shape:
            raise ValueError("upstream graph gradient has the wrong shape")
        total = total + (emb.graph_emb * upstream_graph.to(emb.graph_emb.dtype)).sum()
    names = [n for n, _ in weights.named_parameters()]
    params = [p for _, p in weights.named_parameters()]
    grads = torch.autograd.grad(total, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def save_checkpoint(path: str, modules: Dict[str, torch.nn.Module], config: EncoderConfig,
                    extra: Optional[dict] = None) -> None:
    arrays = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            arrays[f"{prefix}/{k}"] = v.detach().cpu().double().numpy()
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(config),
            "shapes": {k: list(a.shape) for k, a in arrays.items()}, "extra": extra or {}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str):
    """Returns (config, {prefix: {name: array}}, meta)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version", 0) > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint format {meta['format_version']} is newer than supported")
        groups: Dict[str, Dict[str, np.ndarray]] = {}
        for key in z.files:
            if key == "__meta__":
                continue
            prefix, name = key.split("/", 1)
            groups.setdefault(prefix, {})[name] = z[key]
    return EncoderConfig(**meta["config"]), groups, meta


def load_encoder(path: str, dtype: torch.dtype = torch.float32) -> Encoder:
    config, groups, _ = load_checkpoint(path)
    enc = init_weights(config, dtype)
    enc.load_arrays(groups["encoder"])
    return enc


__all__ = ["EncoderConfig", "Encoder", "Embeddings", "GraphBatch", "init_weights", "encode", "encode_grad",
           "linear_attention", "batched_linear_attention", "dense_attention_reference", "save_checkpoint",
           "load_checkpoint", "load_encoder", "IN_DIM", "MASK_CHANNELS", "with_mask_channels"]
