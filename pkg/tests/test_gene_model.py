import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from scbignn.gene_model import (
    GeneModel,
    GeneModelConfig,
    attention_layer,
    batch_from_lists,
    embed_cell,
    read_out,
)
from scbignn.numerics import grad_check, softmax_rows


def make(seed=0, **kw):
    cfg = dict(n_genes=6, n_classes=3, d_g=4, n_layers=2, n_heads=1, width=4, hidden=5, dtype="float64")
    cfg.update(kw)
    m = GeneModel.init(GeneModelConfig(**cfg), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    for k, v in m.params.items():
        if k.endswith("bias") or k == "alpha":
            v[:] = rng.normal(scale=0.5, size=v.shape)
    return m


def test_embed_zero_count_mlp_gives_gene_embeddings():
    m = make()
    for k in m.params:
        if k.startswith("count_mlp"):
            m.params[k][:] = 0
    e = embed_cell(m, [1, 4], [2.0, 0.3])
    np.testing.assert_array_equal(e, m.params["gene_embedding"][[1, 4]])


def test_embed_shapes_and_oracle():
    m = make()
    assert embed_cell(m, [2], [1.5]).shape == (1, 4)
    genes, vals = [0, 3, 5], [0.2, 1.7, 3.1]
    ref = oracles.to_np(oracles.embed(m.params, genes, vals))
    np.testing.assert_allclose(embed_cell(m, genes, vals), ref, atol=1e-12)


def test_empty_cell_rejected():
    with pytest.raises(ValueError, match="cell 0"):
        batch_from_lists([([], [])])


def test_attention_single_gene():
    m = make()
    f = np.random.default_rng(2).normal(size=(1, 4))
    out, maps = attention_layer(m, 0, f)
    assert maps[0].tolist() == [[1.0]]
    proj = f @ m.params["layer0.head0.W"]
    from scbignn.numerics import mlp_forward

    np.testing.assert_allclose(out, mlp_forward(m.mlp("layer0.head0.mlp"), proj), atol=1e-14)


def test_attention_identical_rows_uniform():
    m = make()
    f = np.tile(np.random.default_rng(3).normal(size=(1, 4)), (2, 1))
    _, maps = attention_layer(m, 0, f)
    np.testing.assert_allclose(maps[0], 0.5, atol=1e-15)


@pytest.mark.parametrize("heads,scaled", [(1, True), (2, True), (1, False)])
def test_attention_layer_matches_oracle(heads, scaled):
    m = make(7, n_heads=heads, scaled=scaled)
    f = np.random.default_rng(8).normal(size=(3, 4))
    out, maps = attention_layer(m, 0, f)
    ref = oracles.attention_layer(m.params, 0, heads, oracles.M(f), scaled)
    np.testing.assert_allclose(out, oracles.to_np(ref), atol=1e-12)
    for s in maps:
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_attention_dimension_mismatch():
    m = make()
    with pytest.raises(ValueError):
        attention_layer(m, 0, np.ones((2, 3)))


def test_pair_mask_hook_restricts_attention():
    m = make()
    f = np.random.default_rng(1).normal(size=(3, 4))
    mask = np.array([[True, False, False], [True, True, False], [False, False, False]])
    _, maps = attention_layer(m, 0, f, pair_mask=mask)
    s = maps[0]
    assert s[0, 1] == 0 and s[0, 2] == 0 and s[2, 0] == 0 and s[2, 2] == 1.0
    np.testing.assert_allclose(s.sum(axis=1), 1.0)


def test_read_out_modes():
    m = make()
    reps = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(read_out(m, reps, [0, 1]), [0.5, 0.5])
    learned = make(readout="learned")
    learned.params["alpha"][3] = 2.0
    r = np.array([[0.4, -1.0, 3.0]])
    np.testing.assert_allclose(read_out(learned, r, [3]), 2 * r[0])
    reps = np.random.default_rng(4).normal(size=(3, 4))
    ref = oracles.read_out(learned.params, oracles.M(reps), [0, 2, 5], True)
    np.testing.assert_allclose(read_out(learned, reps, [0, 2, 5]), oracles.to_np(ref), atol=1e-13)


def cells_two():
    return [([0, 1, 3], [1.0, 2.0, 0.5]), ([1, 2], [3.0, 0.2])]


def test_identical_cells_identical_logits():
    m = make()
    fwd = m.forward(batch_from_lists([([0, 2], [1.0, 2.0]), ([0, 2], [1.0, 2.0])]))
    assert fwd.logits[0].tobytes() == fwd.logits[1].tobytes()


def test_zero_classifier_gives_uniform():
    m = make(n_classes=2)
    for k in m.params:
        if k.startswith("classifier"):
            m.params[k][:] = 0
    fwd = m.forward(batch_from_lists(cells_two()))
    np.testing.assert_allclose(fwd.probs, 0.5)


@pytest.mark.parametrize("readout", ["mean", "learned"])
@pytest.mark.parametrize("layers,heads", [(2, 1), (1, 4), (0, 1)])
def test_end_to_end_matches_oracle(readout, layers, heads):
    m = make(5, n_genes=4, n_layers=layers, n_heads=heads, width=8, readout=readout)
    cells = cells_two()
    fwd = m.forward(batch_from_lists(cells), capture=True)
    for b, (g, v) in enumerate(cells):
        h, logits = oracles.gene_forward(m.params, m.config, g, v)
        np.testing.assert_allclose(fwd.h[b], oracles.to_np(h), atol=1e-11)
        np.testing.assert_allclose(fwd.logits[b], oracles.to_np(logits), atol=1e-11)


def test_padding_does_not_leak():
    m = make(9)
    cells = [([0, 1, 2, 3, 4], [1, 2, 3, 4, 5.0]), ([2], [1.0])]
    both = m.forward(batch_from_lists(cells)).logits
    alone = m.forward(batch_from_lists(cells[1:])).logits
    np.testing.assert_allclose(both[1], alone[0], atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_invariants_random_cells(seed):
    rng = np.random.default_rng(seed)
    m = make(seed % 50, n_layers=2, n_heads=2, readout="learned" if seed % 2 else "mean")
    cells = []
    for _ in range(3):
        g = np.sort(rng.choice(6, size=rng.integers(1, 7), replace=False))
        cells.append((g, rng.random(g.size) * 5))
    fwd = m.forward(batch_from_lists(cells), capture=True)
    probs = fwd.probs
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    for layer in fwd.attention:
        for s in layer:
            valid = batch_from_lists(cells).mask
            sums = s.sum(axis=-1)[valid]
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gene_order_permutation_leaves_h_unchanged(seed):
    rng = np.random.default_rng(seed)
    m = make(seed % 20, readout="learned" if seed % 2 else "mean")
    g = np.sort(rng.choice(6, size=4, replace=False))
    v = rng.random(4) * 3
    e = embed_cell(m, g, v)
    perm = rng.permutation(4)

    def h_of(f, genes):
        for l in range(m.config.n_layers):
            f, _ = attention_layer(m, l, f)
        return read_out(m, f, genes)

    np.testing.assert_allclose(h_of(e, g), h_of(e[perm], g[perm]), atol=1e-6)


def test_zero_layers_is_classifier_of_readout():
    m = make(n_layers=0)
    g, v = [1, 3, 4], [0.5, 1.0, 2.0]
    fwd = m.forward(batch_from_lists([(g, v)]))
    e = embed_cell(m, g, v)
    from scbignn.numerics import mlp_forward

    manual = mlp_forward(m.mlp("classifier"), e.mean(axis=0)[None])
    np.testing.assert_allclose(fwd.logits, manual, atol=1e-14)


def _loss_fn(m, batch, targets, weights):
    return lambda: m.loss_and_grad(batch, targets, weights)


@pytest.mark.parametrize("readout", ["mean", "learned"])
def test_backward_finite_differences(readout):
    m = make(3, n_genes=4, readout=readout)
    batch = batch_from_lists(cells_two())
    targets = np.array([[1.0, 0, 0], [0.2, 0.3, 0.5]])
    assert grad_check(_loss_fn(m, batch, targets, np.array([0.5, 0.5])), m.params, 1e-6) < 1e-4


def test_backward_at_exact_fit_is_flat():
    m = make(4)
    batch = batch_from_lists(cells_two())
    w = m.params["classifier.1.weight"]
    w[:] = 0
    m.params["classifier.1.bias"][:] = [60.0, 0.0, 0.0]
    _, grads = m.loss_and_grad(batch, np.array([[1.0, 0, 0], [1.0, 0, 0]]), np.array([0.5, 0.5]))
    assert np.sqrt(sum((g ** 2).sum() for g in grads.values())) < 1e-6


def test_duplicating_batch_keeps_mean_gradient():
    m = make(6)
    cells = cells_two()
    t = np.array([[0.0, 1, 0], [0.5, 0.5, 0]])
    _, g1 = m.loss_and_grad(batch_from_lists(cells), t, np.full(2, 1 / 2))
    _, g2 = m.loss_and_grad(batch_from_lists(cells + cells), np.vstack([t, t]), np.full(4, 1 / 4))
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-13)


def test_float32_training_mode_runs():
    m = make(dtype="float32")
    fwd = m.forward(batch_from_lists(cells_two()))
    assert fwd.logits.dtype == np.float32
    assert np.all(np.isfinite(softmax_rows(fwd.logits)))
