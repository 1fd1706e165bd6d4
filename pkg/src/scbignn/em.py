"""Alternating training of the gene-level (q) and cell-level (p) models.

After supervised pretraining of q, each EM iteration runs an M-step (build
the kNN graph from q's cell representations, fit p on ground-truth labels
plus q's pseudo-labels) followed by an E-step (fit q on ground-truth labels
plus p's pseudo-labels). The model not being trained is never touched.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cell_model import CellGraph, CellModel, CellModelConfig, build_knn_graph, row_normalized
from .checkpoint import save_cell_model, save_gene_model
from .data import LabelSet, stratified_holdout
from .gene_model import GeneModel, GeneModelConfig, gene_loss_and_grad, gene_predict
from .numerics import OptimizerState, log_softmax_rows, param_checksum, sgd_step, softmax_rows

log = logging.getLogger(__name__)

PSEUDO_MODES = ("soft", "argmax", "sample")


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, msg, model=None):
        super().__init__(msg)
        self.model = model


@dataclass
class TrainConfig:
    batch_labeled: int = 256
    batch_unlabeled: int = 256
    pretrain_epochs: int = 30
    epochs: int = 30
    gene_steps_per_epoch: int | None = None
    min_steps_per_epoch: int = 10
    cell_steps_per_epoch: int = 10
    lr_gene: float = 1e-3
    lr_cell: float = 1e-3
    optimizer: str = "adam"
    pseudo_label: str = "soft"
    beta: float = 1.0
    em_iters: int = 3
    k: int = 5
    metric: str = "cosine"
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr_gene <= 0 or self.lr_cell <= 0:
            raise ValueError("learning rates must be positive")
        if self.pseudo_label not in PSEUDO_MODES:
            raise ValueError(f"pseudo_label must be one of {PSEUDO_MODES}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.em_iters < 0 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("iteration and epoch counts must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class EmProblem:
    """Data plus the fixed index splits used throughout one run."""

    x: sp.csr_matrix
    labels: LabelSet
    train: np.ndarray
    val: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray
    x_dense: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, x, labels: LabelSet, val_fraction: float, rng: np.random.Generator) -> "EmProblem":
        x = sp.csr_matrix(x)
        x.sort_indices()
        lab = labels.labeled
        val = stratified_holdout(labels.y, lab, val_fraction, rng) if val_fraction > 0 else np.empty(0, np.int64)
        train = np.setdiff1d(lab, val)
        unlabeled = np.setdiff1d(np.arange(x.shape[0]), train)
        test = np.empty(0, dtype=np.int64)
        if labels.truth is not None:
            test = labels.unlabeled[labels.truth[labels.unlabeled] >= 0]
        return cls(x, labels, train, val, unlabeled, test, x.toarray().astype(np.float32))

    @property
    def n_cells(self) -> int:
        return self.x.shape[0]

    @property
    def truth(self) -> np.ndarray:
        return self.labels.truth if self.labels.truth is not None else self.labels.y

    def one_hot(self, idx) -> np.ndarray:
        out = np.zeros((len(idx), self.labels.n_classes))
        out[np.arange(len(idx)), self.labels.y[idx]] = 1.0
        return out


@dataclass
class EmState:
    max_iterations: int = 3
    beta: float = 1.0
    iteration: int = 0
    q_pseudo: np.ndarray | None = None
    p_pseudo: np.ndarray | None = None
    unlabeled: np.ndarray | None = None
    loss_history: dict = field(default_factory=dict)
    accuracy_history: list = field(default_factory=list)
    label_change: list = field(default_factory=list)
    cell_trained: bool = False
    graph: CellGraph | None = field(default=None, repr=False)
    h: np.ndarray | None = field(default=None, repr=False)
    timings: dict = field(default_factory=dict)
    # optimizer moments persist across phases so a warm model is not kicked by a cold Adam start
    gene_opt: OptimizerState | None = field(default=None, repr=False)
    cell_opt: OptimizerState | None = field(default=None, repr=False)

    def record(self, phase: str, model: str, val: float | None, test: float | None):
        self.accuracy_history.append(
            {"phase": phase, "iteration": self.iteration, "model": model, "val": val, "test": test})

    def curve(self, model: str, key: str = "test") -> list:
        return [e[key] for e in self.accuracy_history if e["model"] == model]

    def summary(self) -> dict:
        return {
            "iterations": self.iteration,
            "max_iterations": self.max_iterations,
            "beta": self.beta,
            "cell_trained": self.cell_trained,
            "loss_history": self.loss_history,
            "accuracy_history": self.accuracy_history,
            "label_change": self.label_change,
            "timings": self.timings,
        }


def accuracy_of(logits: np.ndarray, truth: np.ndarray, idx: np.ndarray) -> float | None:
    if len(idx) == 0:
        return None
    return float(np.mean(np.argmax(logits[idx], axis=1) == truth[idx]))


def _val_score(logits, problem: EmProblem):
    """(accuracy, -loss) on the validation cells; higher is better."""
    if problem.val.size == 0:
        return (0.0, 0.0)
    lp = log_softmax_rows(logits[problem.val].astype(np.float64))
    loss = -lp[np.arange(problem.val.size), problem.labels.y[problem.val]].mean()
    acc = float(np.mean(np.argmax(lp, axis=1) == problem.labels.y[problem.val]))
    return (acc, -float(loss))


def pseudo_targets(dist: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Turn a frozen model's distributions into training targets."""
    if mode == "soft":
        return dist
    n, c = dist.shape
    out = np.zeros_like(dist)
    if mode == "argmax":
        out[np.arange(n), np.argmax(dist, axis=1)] = 1.0
    elif mode == "sample":
        u = rng.random((n, 1))
        picks = (np.cumsum(dist, axis=1) < u).sum(axis=1)
        out[np.arange(n), np.minimum(picks, c - 1)] = 1.0
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    return out


class _Cycler:
    """Endless shuffled pass over an index array, one batch at a time."""

    def __init__(self, idx: np.ndarray, rng: np.random.Generator):
        self.idx = np.asarray(idx)
        self.rng = rng
        self.order = rng.permutation(self.idx)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        n = min(n, self.idx.size)
        if self.pos + n > self.order.size:
            self.order = self.rng.permutation(self.idx)
            self.pos = 0
        out = self.order[self.pos:self.pos + n]
        self.pos += n
        return out


# ------------------------------------------------------------------------ models


def make_gene_model(problem: EmProblem, rng, **overrides) -> GeneModel:
    kw = dict(overrides)
    if kw.get("readout") == "learned" and kw.get("alpha_init") is None:
        kw["alpha_init"] = 1.0 / float(np.mean(np.diff(problem.x.indptr)))
    cfg = GeneModelConfig(n_genes=problem.x.shape[1], n_classes=problem.labels.n_classes, **kw)
    return GeneModel.init(cfg, rng)


def make_cell_model(problem: EmProblem, gene: GeneModel, rng, **overrides) -> CellModel:
    cfg = CellModelConfig(n_genes=problem.x.shape[1], h_width=gene.config.out_width,
                          n_classes=problem.labels.n_classes, **overrides)
    return CellModel.init(cfg, rng)


# ---------------------------------------------------------------------- training


def _gene_epoch_steps(config: TrainConfig, n_lab: int, n_unlab: int, with_unlabeled: bool) -> int:
    if config.gene_steps_per_epoch is not None:
        return config.gene_steps_per_epoch
    steps = -(-n_lab // config.batch_labeled)
    if with_unlabeled:
        steps = max(steps, -(-n_unlab // config.batch_unlabeled))
    return max(steps, config.min_steps_per_epoch, 1)


def _optimizer(state: EmState | None, attr: str, lr: float, mode: str) -> OptimizerState:
    opt = getattr(state, attr) if state is not None else None
    if opt is None:
        opt = OptimizerState(lr=lr, mode=mode)
        if state is not None:
            setattr(state, attr, opt)
    return opt


def _fit_gene(config: TrainConfig, problem: EmProblem, model: GeneModel, epochs: int,
              unlabeled_targets: np.ndarray | None, rng: np.random.Generator, losses: list,
              opt: OptimizerState | None = None) -> GeneModel:
    """Shared loop for pretraining (no unlabeled targets) and the E-step."""
    if epochs == 0:
        return model
    opt = opt or OptimizerState(lr=config.lr_gene, mode=config.optimizer)
    lab = _Cycler(problem.train, rng) if problem.train.size else None
    use_u = unlabeled_targets is not None and problem.unlabeled.size > 0
    unl = _Cycler(np.arange(problem.unlabeled.size), rng) if use_u else None
    steps = _gene_epoch_steps(config, problem.train.size, problem.unlabeled.size, use_u)
    best_score, best, stale = None, model.copy(), 0
    beta = config.beta if use_u else 1.0
    for epoch in range(epochs):
        for _ in range(steps):
            rows, targets, weights = [], [], []
            if lab is not None:
                b = lab.take(config.batch_labeled)
                rows.append(b)
                targets.append(problem.one_hot(b))
                weights.append(np.full(b.size, beta))
            if unl is not None:
                pos = unl.take(config.batch_unlabeled)
                rows.append(problem.unlabeled[pos])
                targets.append(pseudo_targets(unlabeled_targets[pos], config.pseudo_label, rng))
                weights.append(np.ones(pos.size))
            rows = np.concatenate(rows)
            weights = np.concatenate(weights) / rows.size
            loss, grads = gene_loss_and_grad(model, problem.x, rows, np.concatenate(targets), weights)
            if not np.isfinite(loss):
                raise TrainingDivergence("gene model loss is not finite", best)
            sgd_step(opt, model.params, grads)
            losses.append(loss)
        _, logits = gene_predict(model, problem.x, problem.val) if problem.val.size else (None, None)
        score = _val_score(_scatter(logits, problem.val, problem), problem) if logits is not None else (epoch, 0.0)
        if best_score is None or score > best_score:
            best_score, best, stale = score, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best


def _scatter(rows_logits, idx, problem: EmProblem):
    full = np.zeros((problem.n_cells, rows_logits.shape[1]), dtype=rows_logits.dtype)
    full[idx] = rows_logits
    return full


def pretrain_gene_model(config: TrainConfig, problem: EmProblem, model: GeneModel,
                        rng: np.random.Generator, state: EmState | None = None) -> GeneModel:
    """Supervised fit of q on the labeled training cells."""
    if problem.train.size == 0:
        raise ValueError("pretraining needs labeled cells")
    missing = set(range(problem.labels.n_classes)) - set(problem.labels.y[problem.train].tolist())
    if missing:
        log.warning("classes %s have no labeled training cells", sorted(missing))
    losses: list = []
    opt = _optimizer(state, "gene_opt", config.lr_gene, config.optimizer)
    model = _fit_gene(config, problem, model, config.pretrain_epochs, None, rng, losses, opt)
    if state is not None:
        state.loss_history["pretrain"] = losses
    return model


def e_step(config: TrainConfig, state: EmState, gene: GeneModel, problem: EmProblem,
           rng: np.random.Generator) -> GeneModel:
    """Fit q against labels and p's pseudo-labels (``state.p_pseudo``). p is not an argument."""
    if problem.unlabeled.size == 0:
        log.warning("no unlabeled cells: E-step reduces to supervised training")
    losses: list = []
    targets = state.p_pseudo if problem.unlabeled.size else None
    opt = _optimizer(state, "gene_opt", config.lr_gene, config.optimizer)
    model = _fit_gene(config, problem, gene.copy(), config.epochs, targets, rng, losses, opt)
    state.loss_history[f"iter{state.iteration}_estep"] = losses
    return model


def cell_inputs(gene: GeneModel, problem: EmProblem, config: TrainConfig):
    """h and q for every cell from the frozen gene model, plus the kNN graph on h."""
    h, q_logits = gene_predict(gene, problem.x)
    graph = build_knn_graph(h, config.k, config.metric)
    return h, q_logits, graph


def m_step(config: TrainConfig, state: EmState, gene: GeneModel, cell: CellModel, problem: EmProblem,
           rng: np.random.Generator):
    """Rebuild the graph from the frozen q, then fit p. Returns (cell model, graph, p logits)."""
    h, q_logits, graph = cell_inputs(gene, problem, config)
    state.h = h
    state.q_pseudo = softmax_rows(q_logits[problem.unlabeled].astype(np.float64))
    r = row_normalized(graph, cell.dtype)
    model = cell.copy()
    opt = _optimizer(state, "cell_opt", config.lr_cell, config.optimizer)
    n_total = problem.train.size + problem.unlabeled.size
    losses: list = []
    best_score, best, stale = None, model.copy(), 0
    for epoch in range(config.epochs):
        for _ in range(config.cell_steps_per_epoch):
            rows = np.concatenate([problem.train, problem.unlabeled])
            targets = np.concatenate([problem.one_hot(problem.train),
                                      pseudo_targets(state.q_pseudo, config.pseudo_label, rng)])
            weights = np.full(rows.size, 1.0 / n_total)
            loss, grads = model.loss_and_grad(r, problem.x_dense, h, rows, targets, weights)
            if not np.isfinite(loss):
                raise TrainingDivergence("cell model loss is not finite", best)
            sgd_step(opt, model.params, grads)
            losses.append(loss)
        logits = model.forward(r, problem.x_dense, h).logits
        score = _val_score(logits, problem) if problem.val.size else (epoch, 0.0)
        if best_score is None or score > best_score:
            best_score, best, stale = score, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    p_logits = best.forward(r, problem.x_dense, h).logits
    state.p_pseudo = softmax_rows(p_logits[problem.unlabeled].astype(np.float64))
    state.graph = graph
    state.loss_history[f"iter{state.iteration}_mstep"] = losses
    return best, graph, p_logits


def run_em(config: TrainConfig, x, labels: LabelSet, gene_options: dict | None = None,
           cell_options: dict | None = None, checkpoint_dir=None, gene_digest: str | None = None,
           checkpoint_meta: dict | None = None):
    """Pretrain q, then up to ``em_iters`` rounds of M-step / E-step.

    Checkpoints (when ``checkpoint_dir`` is set) carry ``checkpoint_meta`` in
    their JSON block. Returns ``(gene_model, cell_model_or_None, state, problem)``.
    """
    rng = np.random.default_rng(config.seed)
    init_rng, split_rng, train_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3))
    problem = EmProblem.build(x, labels, config.val_fraction, split_rng)
    gene = make_gene_model(problem, init_rng, **(gene_options or {}))
    cell = make_cell_model(problem, gene, init_rng, **(cell_options or {}))
    state = EmState(max_iterations=config.em_iters, beta=config.beta, unlabeled=problem.unlabeled)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    meta = {"iteration": 0, **(checkpoint_meta or {})}
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    gene = pretrain_gene_model(config, problem, gene, train_rng, state)
    state.timings["pretrain"] = time.perf_counter() - t0
    _, q_logits = gene_predict(gene, problem.x)
    state.record("pretrain", "q", _val_score(q_logits, problem)[0] if problem.val.size else None,
                 accuracy_of(q_logits, problem.truth, problem.test))
    state.q_pseudo = softmax_rows(q_logits[problem.unlabeled].astype(np.float64))
    if ckpt is not None:
        save_gene_model(gene, ckpt / "pretrain.ckpt", gene_digest, meta)

    previous = None
    gene_source = "pretrain.ckpt"
    for it in range(1, config.em_iters + 1):
        state.iteration = it
        meta["iteration"] = it
        t0 = time.perf_counter()
        cell, graph, p_logits = m_step(config, state, gene, cell, problem, train_rng)
        state.cell_trained = True
        state.timings[f"iter{it}_mstep"] = time.perf_counter() - t0
        state.record("mstep", "p", _val_score(p_logits, problem)[0] if problem.val.size else None,
                     accuracy_of(p_logits, problem.truth, problem.test))
        if ckpt is not None:
            # p is only valid on the h it was fit on; name the gene model that produced it
            source = {"gene_source": gene_source, "gene_checksum": param_checksum(gene.params)}
            save_cell_model(cell, ckpt / f"iter{it}_mstep.ckpt", gene_digest, {**meta, **source})
        gene_source = f"iter{it}_estep.ckpt"
        t0 = time.perf_counter()
        gene = e_step(config, state, gene, problem, train_rng)
        state.timings[f"iter{it}_estep"] = time.perf_counter() - t0
        _, q_logits = gene_predict(gene, problem.x)
        state.record("estep", "q", _val_score(q_logits, problem)[0] if problem.val.size else None,
                     accuracy_of(q_logits, problem.truth, problem.test))
        state.q_pseudo = softmax_rows(q_logits[problem.unlabeled].astype(np.float64))
        if ckpt is not None:
            save_gene_model(gene, ckpt / f"iter{it}_estep.ckpt", gene_digest, meta)
        current = np.argmax(p_logits[problem.unlabeled], axis=1)
        if previous is not None:
            state.label_change.append(float(np.mean(current != previous)))
        previous = current
    return gene, (cell if state.cell_trained else None), state, problem


def final_predictions(gene: GeneModel, cell: CellModel | None, problem: EmProblem, config: TrainConfig,
                      state: EmState | None = None):
    """q logits, p logits (None if p untrained), the graph used for p, and the final h.

    With ``state``, p is scored on the h and graph of its last M-step, the
    inputs it was fit on. Without it, both come from the final gene model.
    """
    h, q_logits, graph = cell_inputs(gene, problem, config)
    if cell is None:
        return q_logits, None, graph, h
    p_h = h
    if state is not None and state.h is not None and state.graph is not None:
        p_h, graph = state.h, state.graph
    p_logits = cell.forward(graph, problem.x_dense, p_h).logits
    return q_logits, p_logits, graph, h


# -------------------------------------------------------------------------- ELBO


def elbo_from_probs(p: np.ndarray, q: np.ndarray, labeled: np.ndarray, y: np.ndarray,
                    unlabeled: np.ndarray, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo ELBO with independent cells. Returns (estimate, standard error)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    logp = np.log(np.maximum(p, 1e-300))
    logq = np.log(np.maximum(q, 1e-300))
    base = float(logp[labeled, y[labeled]].sum()) if len(labeled) else 0.0
    if len(unlabeled) == 0:
        return base, 0.0
    qu = q[unlabeled]
    cum = np.cumsum(qu, axis=1)
    draws = np.empty(n_samples)
    for s in range(n_samples):
        u = rng.random((len(unlabeled), 1))
        pick = np.minimum((cum < u).sum(axis=1), q.shape[1] - 1)
        draws[s] = (logp[unlabeled, pick] - logq[unlabeled, pick]).sum()
    se = float(draws.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return base + float(draws.mean()), se


def estimate_elbo(gene: GeneModel, cell: CellModel, x, labels: LabelSet, n_samples: int,
                  k: int = 5, metric: str = "cosine", rng: np.random.Generator | None = None):
    """ELBO estimate for the given models on ``labels`` (labeled = observed)."""
    rng = rng or np.random.default_rng(0)
    x = sp.csr_matrix(x)
    h, q_logits = gene_predict(gene, x)
    graph = build_knn_graph(h, k, metric)
    p_logits = cell.forward(graph, x, h).logits
    p = softmax_rows(p_logits.astype(np.float64))
    q = softmax_rows(q_logits.astype(np.float64))
    return elbo_from_probs(p, q, labels.labeled, labels.y, labels.unlabeled, n_samples, rng)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
