import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from netpower.encoder import (IN_DIM, EncoderConfig, dense_attention_reference, encode, encode_grad, init_weights,
                              linear_attention, load_encoder, save_checkpoint)
from netpower.forge import GenParams, gen_design, gen_workload
from netpower.netlist.graph import build_graph
from netpower.segment import annotate
from netpower.sim import simulate


@pytest.fixture(scope="module")
def samples(lib):
    g = gen_design(GenParams(n_cells=200, seed=2, leaf_cells=50, n_icg=1), lib)
    w = simulate(g, lib, gen_workload(g, 4, 1))
    scopes = [s for s in g.hierarchy if s.count(".") == 1][:3]
    return [annotate(build_graph(g, s, lib), w, 2) for s in scopes]


NODE_FIELDS = ("cell_ids", "node_type", "internal_energy", "leakage", "input_cap", "load_cap", "out_net")


def _reindex(sample, order, edges):
    """Sample restricted/reordered to the node list ``order`` with the given local edges."""
    gr = sample.graph
    sub = dataclasses.replace(gr, edges=edges, paths=tuple(gr.paths[i] for i in order),
                              **{f: getattr(gr, f)[order] for f in NODE_FIELDS})
    return dataclasses.replace(sample, graph=sub, features=sample.features[order])


def test_init_deterministic_and_shaped():
    a, b = init_weights(EncoderConfig(embed_dim=8, seed=4)), init_weights(EncoderConfig(embed_dim=8, seed=4))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    assert tuple(a.w_x.shape) == (IN_DIM, 8)
    for name in ("w_q", "w_k", "w_v", "w_o"):
        assert tuple(getattr(a, name).shape) == (8, 8)
    assert len(a.w_in) == len(a.w_out) == 2
    c = init_weights(EncoderConfig(embed_dim=8, seed=5))
    assert not torch.equal(a.w_x, c.w_x)


def test_init_scale():
    enc = init_weights(EncoderConfig(embed_dim=128, mp_layers=1, seed=0))
    w = torch.cat([enc.w_q.flatten(), enc.w_k.flatten()]).detach().double()
    assert w.numel() >= 10_000
    target = 1 / np.sqrt(128)
    assert abs(float(w.std()) - target) <= 0.2 * target


def test_config_validation():
    for bad in (dict(embed_dim=4), dict(mp_layers=0), dict(beta=1.5)):
        with pytest.raises(ValueError):
            EncoderConfig(**bad).validate()


# -- attention ---------------------------------------------------------------------

def test_attention_single_row_returns_v():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 1, 5))
    assert np.allclose(linear_attention(q, k, v), v, atol=1e-12)


def test_attention_duplicate_rows():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(3, 6, 4))
    q[3], k[3], v[3] = q[1], k[1], v[1]
    z = linear_attention(q, k, v, beta=0.3)
    assert np.allclose(z[1], z[3], atol=1e-14)


@given(n=st.integers(1, 64), d=st.integers(1, 16), beta=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_attention_matches_dense_reference(n, d, beta, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, n, d))
    assert np.allclose(linear_attention(q, k, v, beta), dense_attention_reference(q, k, v, beta),
                       rtol=0, atol=1e-10)


def test_attention_zero_rows_are_finite():
    q = np.zeros((4, 3))
    k = np.zeros((4, 3))
    v = np.arange(12.0).reshape(4, 3)
    z = linear_attention(q, k, v)
    assert np.isfinite(z).all()
    assert np.allclose(z, v.mean(axis=0))


# -- encode ----------------------------------------------------------------------------

def test_single_node_graph(lib):
    from netpower.netlist.builder import NetlistBuilder
    b = NetlistBuilder("t")
    b.add_net("a"), b.add_net("y")
    b.primary_inputs.append("a")
    b.add_cell("t.u", "INVX1", ["a"], "y")
    n = b.build(lib)
    s = annotate(build_graph(n, "t", lib), np.ones((2, 1), np.uint8), 0)
    e = encode(init_weights(EncoderConfig(embed_dim=8)), s)
    assert e.node_embs.shape == (1, 8)
    assert torch.allclose(e.graph_emb[0], e.node_embs[0])


def test_graph_embedding_is_mean_and_finite(samples):
    enc = init_weights(EncoderConfig(embed_dim=16))
    e = encode(enc, samples)
    for b in range(len(samples)):
        rows = e.node_embs[e.graph_index == b]
        assert torch.allclose(e.graph_emb[b], rows.mean(dim=0), atol=1e-6)
    assert torch.isfinite(e.node_embs).all()


def test_batching_matches_single(samples):
    enc = init_weights(EncoderConfig(embed_dim=16), torch.float64)
    together = encode(enc, samples)
    for b, s in enumerate(samples):
        alone = encode(enc, s)
        assert torch.allclose(together.graph_emb[b], alone.graph_emb[0], atol=1e-10)


def test_permutation_equivariance(samples):
    s = samples[0]
    enc = init_weights(EncoderConfig(embed_dim=16), torch.float64)
    perm = np.random.default_rng(3).permutation(s.n_nodes)   # old index -> new index
    order = np.argsort(perm)                                  # new index -> old index
    s2 = _reindex(s, order, perm[s.graph.edges])
    e1, e2 = encode(enc, s), encode(enc, s2)
    assert torch.allclose(e1.graph_emb, e2.graph_emb, atol=1e-10)
    assert torch.allclose(e1.node_embs[order], e2.node_embs, atol=1e-10)


def test_empty_graph_rejected(samples):
    empty = _reindex(samples[0], np.zeros(0, np.int64), np.zeros((2, 0), np.int64))
    with pytest.raises(ValueError):
        encode(init_weights(EncoderConfig(embed_dim=8)), empty)


# -- gradients -------------------------------------------------------------------------

def _small(samples, n=10):
    gr = samples[0].graph
    e = gr.edges[:, (gr.edges[0] < n) & (gr.edges[1] < n)]
    return _reindex(samples[0], np.arange(n), e)


def test_zero_upstream_gives_zero_gradients(samples):
    enc = init_weights(EncoderConfig(embed_dim=8))
    e = encode(enc, samples[0])
    grads = encode_grad(enc, samples[0], upstream_node=torch.zeros_like(e.node_embs))
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_dead_path_when_attention_disabled(samples):
    enc = init_weights(EncoderConfig(embed_dim=8, beta=1.0))
    e = encode(enc, samples[0])
    grads = encode_grad(enc, samples[0], upstream_graph=torch.ones_like(e.graph_emb))
    assert float(grads["w_q"].abs().max()) == 0.0 and float(grads["w_k"].abs().max()) == 0.0
    assert float(grads["w_v"].abs().max()) > 0.0


def test_gradients_match_finite_differences(samples):
    s = _small(samples)
    assert s.n_nodes == 10
    enc = init_weights(EncoderConfig(embed_dim=8, seed=1), torch.float64)
    rng = np.random.default_rng(0)
    # zero biases put isolated nodes exactly on the ReLU kink; move off it
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.startswith("b_"):
                p.copy_(torch.as_tensor(rng.normal(scale=0.1, size=p.shape)))
    up_n = torch.as_tensor(rng.normal(size=(10, 8)))
    up_g = torch.as_tensor(rng.normal(size=(1, 8)))
    grads = encode_grad(enc, s, upstream_node=up_n, upstream_graph=up_g)

    def f():
        e = encode(enc, s)
        return float((e.node_embs * up_n).sum() + (e.graph_emb * up_g).sum())

    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for name, p in enc.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                fp = f()
                flat[i] = old - h
                fm = f()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                an = float(grads[name].view(-1)[i])
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-6))
    assert worst <= 1e-4, worst


def test_upstream_shape_mismatch(samples):
    enc = init_weights(EncoderConfig(embed_dim=8))
    with pytest.raises(ValueError):
        encode_grad(enc, samples[0], upstream_node=torch.zeros(3, 3))


def test_checkpoint_round_trip(samples, tmp_path):
    enc = init_weights(EncoderConfig(embed_dim=8, seed=9))
    path = str(tmp_path / "enc.npz")
    save_checkpoint(path, {"encoder": enc}, enc.config)
    back = load_encoder(path)
    assert torch.equal(encode(enc, samples).graph_emb, encode(back, samples).graph_emb)
