import itertools
import math

import numpy as np
import pytest

from scbignn.cell_model import CellGraph, CellModel, CellModelConfig
from scbignn.checkpoint import load_cell_model, load_gene_model
from scbignn.data import LabelSet, preprocess
from scbignn.em import (
    EmProblem,
    EmState,
    TrainConfig,
    TrainingDivergence,
    accuracy_of,
    e_step,
    elbo_from_probs,
    estimate_elbo,
    final_predictions,
    m_step,
    make_cell_model,
    make_gene_model,
    pretrain_gene_model,
    pseudo_targets,
    run_em,
)
from scbignn.gene_model import gene_loss_and_grad, gene_predict
from scbignn.numerics import cross_entropy, param_checksum, softmax_rows
from scbignn.synthetic import make_counts, semi_supervised_labels

SMALL = dict(d_g=8, width=8, hidden=8)
CELL_SMALL = dict(width=8, hidden=8, input_width=8)


def quick(**kw):
    base = dict(pretrain_epochs=2, epochs=2, min_steps_per_epoch=2, cell_steps_per_epoch=2,
                batch_labeled=32, batch_unlabeled=32)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    mat, y = make_counts(n_cells=90, n_genes=60, seed=3)
    pm = preprocess(mat, T=30)
    return pm.values, semi_supervised_labels(y, 0.3, seed=3)


def problem_of(data, val_fraction=0.1, seed=0):
    x, labels = data
    return EmProblem.build(x, labels, val_fraction, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_labeled=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_gene=0)
    with pytest.raises(ValueError):
        TrainConfig(pseudo_label="mode")


def test_problem_splits(data):
    pr = problem_of(data)
    lab = pr.labels.labeled
    assert set(pr.train) | set(pr.val) == set(lab)
    assert not set(pr.train) & set(pr.unlabeled)
    assert set(pr.val) <= set(pr.unlabeled)
    assert set(pr.test) == set(pr.labels.unlabeled)


def test_zero_epochs_returns_initial_parameters(data):
    pr = problem_of(data)
    g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
    before = param_checksum(g.params)
    out = pretrain_gene_model(quick(pretrain_epochs=0), pr, g, np.random.default_rng(1))
    assert param_checksum(out.params) == before


def test_pretrain_deterministic(data):
    def run():
        pr = problem_of(data)
        g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
        return param_checksum(pretrain_gene_model(quick(), pr, g, np.random.default_rng(1)).params)

    assert run() == run()


def test_pretrain_fits_separable_two_class_data():
    mat, y = make_counts(n_cells=120, n_genes=60, n_classes=2, seed=1)
    pm = preprocess(mat, T=40)
    labels = LabelSet(["a", "b"], y)
    pr = EmProblem.build(pm.values, labels, 0.0, np.random.default_rng(0))
    g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
    g = pretrain_gene_model(TrainConfig(pretrain_epochs=40, lr_gene=3e-3, seed=0), pr, g, np.random.default_rng(0))
    _, logits = gene_predict(g, pr.x, pr.train)
    assert np.mean(np.argmax(logits, axis=1) == y[pr.train]) > 0.99


def test_pseudo_target_modes():
    rng = np.random.default_rng(0)
    dist = rng.dirichlet(np.ones(3), size=2000)
    assert pseudo_targets(dist, "soft", rng) is dist
    hard = pseudo_targets(dist, "argmax", rng)
    assert np.array_equal(np.argmax(hard, axis=1), np.argmax(dist, axis=1))
    drawn = pseudo_targets(dist, "sample", rng)
    np.testing.assert_array_equal(drawn.sum(axis=1), 1.0)
    assert set(np.unique(drawn)) == {0.0, 1.0}
    # class frequencies of the draws track the mean distribution
    np.testing.assert_allclose(drawn.mean(axis=0), dist.mean(axis=0), atol=0.04)


def test_soft_loss_is_cross_entropy_against_full_distribution(data):
    pr = problem_of(data)
    g = make_gene_model(pr, np.random.default_rng(0), dtype="float64", **SMALL)
    rows = pr.unlabeled[:20]
    dist = np.random.default_rng(1).dirichlet(np.ones(3), size=20)
    targets = pseudo_targets(dist, "soft", np.random.default_rng(2))
    loss, _ = gene_loss_and_grad(g, pr.x, rows, targets, np.full(20, 1 / 20))
    _, logits = gene_predict(g, pr.x, rows)
    assert loss == pytest.approx(cross_entropy(logits, dist), rel=1e-12)


def test_beta_zero_removes_labeled_gradient(data):
    pr = problem_of(data)
    g = make_gene_model(pr, np.random.default_rng(0), dtype="float64", **SMALL)
    lab, unl = pr.train[:10], pr.unlabeled[:10]
    rows = np.concatenate([lab, unl])
    t_unl = np.random.default_rng(1).dirichlet(np.ones(3), size=10)
    t = np.vstack([pr.one_hot(lab), t_unl])
    w = np.concatenate([np.zeros(10), np.full(10, 0.05)])
    _, full = gene_loss_and_grad(g, pr.x, rows, t, w)
    _, only_u = gene_loss_and_grad(g, pr.x, unl, t_unl, np.full(10, 0.05))
    for k in full:
        np.testing.assert_allclose(full[k], only_u[k], atol=1e-14)


def test_beta_zero_estep_ignores_label_values(data):
    x, labels = data

    def fit(y):
        lab = LabelSet(labels.classes, y, labels.truth)
        pr = EmProblem.build(x, lab, 0.0, np.random.default_rng(0))
        g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
        state = EmState()
        state.p_pseudo = np.full((pr.unlabeled.size, 3), 1 / 3)
        return param_checksum(e_step(quick(beta=0.0), state, g, pr, np.random.default_rng(5)).params)

    flipped = labels.y.copy()
    known = flipped >= 0
    flipped[known] = (flipped[known] + 1) % 3
    assert fit(labels.y) == fit(flipped)


def test_estep_matching_onehot_targets_gives_small_loss(data):
    pr = problem_of(data)
    g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
    g.params["classifier.1.weight"][:] = 0
    g.params["classifier.1.bias"][:] = [30.0, 0.0, 0.0]
    onehot = np.zeros((pr.unlabeled.size, 3))
    onehot[:, 0] = 1
    loss, grads = gene_loss_and_grad(g, pr.x, pr.unlabeled, onehot, np.full(pr.unlabeled.size, 1 / pr.unlabeled.size))
    assert loss < 1e-3
    assert max(float(np.abs(v).max()) for v in grads.values()) < 1e-6


def test_phase_isolation_and_graph_rebuild(data):
    pr = problem_of(data)
    cfg = quick()
    rng = np.random.default_rng(0)
    gene = make_gene_model(pr, rng, **SMALL)
    cell = make_cell_model(pr, gene, rng, **CELL_SMALL)
    state = EmState()
    g_sum, c_sum = param_checksum(gene.params), param_checksum(cell.params)
    new_cell, graph, p_logits = m_step(cfg, state, gene, cell, pr, np.random.default_rng(1))
    assert param_checksum(gene.params) == g_sum
    assert param_checksum(cell.params) == c_sum
    assert param_checksum(new_cell.params) != c_sum
    np.testing.assert_allclose(state.p_pseudo.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(state.q_pseudo.sum(axis=1), 1.0, atol=1e-6)
    trained_sum = param_checksum(new_cell.params)
    new_gene = e_step(cfg, state, gene, pr, np.random.default_rng(2))
    assert param_checksum(new_cell.params) == trained_sum
    assert param_checksum(gene.params) == g_sum
    assert param_checksum(new_gene.params) != g_sum
    # perturbing phi changes the rebuilt graph
    _, graph2, _ = m_step(cfg, EmState(), new_gene, new_cell, pr, np.random.default_rng(1))
    a, b = {tuple(e) for e in graph.edges().tolist()}, {tuple(e) for e in graph2.edges().tolist()}
    assert a != b


def test_mstep_labeled_only_is_supervised_cross_entropy():
    rng = np.random.default_rng(0)
    m = CellModel.init(CellModelConfig(n_genes=4, h_width=3, n_classes=2, width=4, hidden=4, input_width=2,
                                       dtype="float64"), rng)
    g = CellGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    x, h = rng.random((4, 4)), rng.normal(size=(4, 3))
    t = np.eye(2)[[0, 1, 1, 0]]
    loss, _ = m.loss_and_grad(g, x, h, np.arange(4), t, np.full(4, 0.25))
    assert loss == pytest.approx(cross_entropy(m.forward(g, x, h).logits, t), rel=1e-12)


def test_zero_iterations_leaves_cell_model_untrained(data):
    x, labels = data
    gene, cell, state, _ = run_em(quick(em_iters=0), x, labels, SMALL, CELL_SMALL)
    assert cell is None and not state.cell_trained
    assert [e["phase"] for e in state.accuracy_history] == ["pretrain"]


def test_run_em_is_deterministic_and_checkpoints(data, tmp_path):
    x, labels = data
    cfg = quick(em_iters=2)
    g1, c1, s1, _ = run_em(cfg, x, labels, SMALL, CELL_SMALL, checkpoint_dir=tmp_path / "a")
    g2, c2, s2, _ = run_em(cfg, x, labels, SMALL, CELL_SMALL, checkpoint_dir=tmp_path / "b")
    assert s1.loss_history == s2.loss_history
    assert param_checksum(g1.params) == param_checksum(g2.params)
    assert param_checksum(c1.params) == param_checksum(c2.params)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["iter1_estep.ckpt", "iter1_mstep.ckpt", "iter2_estep.ckpt", "iter2_mstep.ckpt",
                     "pretrain.ckpt"]
    assert [e["phase"] for e in s1.accuracy_history] == ["pretrain", "mstep", "estep", "mstep", "estep"]
    assert s1.iteration == 2 <= s1.max_iterations


def test_final_p_scored_on_its_mstep_inputs(data, tmp_path):
    x, labels = data
    cfg = quick(em_iters=2)
    gene, cell, state, problem = run_em(cfg, x, labels, SMALL, CELL_SMALL, checkpoint_dir=tmp_path)
    _, p_logits, graph, h = final_predictions(gene, cell, problem, cfg, state)
    assert graph is state.graph
    assert accuracy_of(p_logits, problem.truth, problem.test) == state.curve("p")[-1]
    np.testing.assert_array_equal(h, gene_predict(gene, problem.x)[0])
    _, meta = load_cell_model(tmp_path / "iter2_mstep.ckpt")
    assert meta["gene_source"] == "iter1_estep.ckpt"
    g1, _ = load_gene_model(tmp_path / "iter1_estep.ckpt")
    assert meta["gene_checksum"] == param_checksum(g1.params)


def test_divergence_raises_with_last_model(data, monkeypatch):
    import scbignn.em as em

    monkeypatch.setattr(em, "gene_loss_and_grad", lambda *a, **k: (float("nan"), {}))
    pr = problem_of(data)
    g = make_gene_model(pr, np.random.default_rng(0), **SMALL)
    with pytest.raises(TrainingDivergence) as info:
        pretrain_gene_model(quick(), pr, g, np.random.default_rng(0))
    assert info.value.model is not None


# ------------------------------------------------------------------ ELBO


def enumerated_log_likelihood(p, labeled, y, unlabeled):
    """log sum over every joint assignment of the unlabeled cells, cells independent."""
    total = 0.0
    for assign in itertools.product(range(p.shape[1]), repeat=len(unlabeled)):
        term = math.prod(p[i, y[i]] for i in labeled) * math.prod(p[i, c] for i, c in zip(unlabeled, assign))
        total += term
    return math.log(total)


def test_elbo_without_unlabeled_is_labeled_log_likelihood():
    p = np.array([[0.7, 0.3], [0.2, 0.8]])
    est, se = elbo_from_probs(p, p, np.array([0, 1]), np.array([0, 1]), np.array([], dtype=int), 10,
                              np.random.default_rng(0))
    assert est == pytest.approx(math.log(0.7) + math.log(0.8), abs=1e-15) and se == 0.0


def test_elbo_equals_likelihood_at_exact_posterior():
    p = np.array([[0.2, 0.5, 0.3]])
    est, _ = elbo_from_probs(p, p.copy(), np.array([], dtype=int), np.array([-1]), np.array([0]), 200,
                             np.random.default_rng(0))
    assert est == pytest.approx(enumerated_log_likelihood(p, [], [-1], [0]), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_elbo_bounded_by_enumerated_likelihood(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(2), size=3)
    q = rng.dirichlet(np.ones(2), size=3)
    labeled, y, unlabeled = np.array([0]), np.array([1, -1, -1]), np.array([1, 2])
    est, se = elbo_from_probs(p, q, labeled, y, unlabeled, 500, rng)
    assert est <= enumerated_log_likelihood(p, labeled, y, unlabeled) + 3 * se


def test_estimate_elbo_on_models(data):
    x, labels = data
    gene, cell, _, _ = run_em(quick(em_iters=1), x, labels, SMALL, CELL_SMALL)
    est, se = estimate_elbo(gene, cell, x, labels, 50, rng=np.random.default_rng(0))
    assert np.isfinite(est) and se >= 0
