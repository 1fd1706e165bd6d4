"""Post-hoc analyses: gene importance from attention, graph homophily, accuracy, cross-validation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell_model import CellGraph
from .data import LabelSet, ExpressionMatrix, drop_zero_genes, normalize, select_top_variance, split_folds
from .em import TrainConfig, final_predictions, run_em
from .gene_model import GeneModel, iter_attention

log = logging.getLogger(__name__)


@dataclass
class GeneImportanceReport:
    aggregated: np.ndarray
    scores: np.ndarray
    ranking: np.ndarray
    gene_ids: list[str] | None = None
    top_n: int = 50

    @property
    def ranked_ids(self) -> list:
        if self.gene_ids is None:
            return self.ranking.tolist()
        return [self.gene_ids[j] for j in self.ranking]

    @property
    def top(self) -> list:
        return self.ranked_ids[: self.top_n]

    def write_csv(self, path, n: int | None = None):
        n = self.top_n if n is None else n
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "gene_id", "score"])
            for r, j in enumerate(self.ranking[:n], start=1):
                gid = self.gene_ids[j] if self.gene_ids is not None else int(j)
                w.writerow([r, gid, repr(float(self.scores[j]))])


@dataclass
class HomophilyReport:
    intra: int
    total: int

    @property
    def ratio(self) -> float:
        return self.intra / self.total


class AttentionAccumulator:
    """Running sum and observation count per (gene i, gene j) pair."""

    def __init__(self, n_genes: int):
        self.total = np.zeros((n_genes, n_genes))
        self.count = np.zeros((n_genes, n_genes))

    def add(self, genes, matrix):
        g = np.asarray(genes)
        ix = np.ix_(g, g)
        self.total[ix] += matrix
        self.count[ix] += 1.0

    def mean(self) -> np.ndarray:
        return np.divide(self.total, self.count, out=np.zeros_like(self.total), where=self.count > 0)


def aggregate_attention(captures, n_genes: int) -> np.ndarray:
    """Mean attention per gene pair over every (cell, layer, head) where both genes are expressed.

    ``captures`` yields ``(gene_indices, maps)`` where ``maps`` is a
    T_i x T_i matrix or a nested list of them (layers x heads).
    """
    acc = AttentionAccumulator(n_genes)
    seen = False
    for genes, maps in captures:
        for m in _flatten(maps):
            acc.add(genes, m)
            seen = True
    if not seen:
        raise ValueError("no attention matrices captured")
    return acc.mean()


def _flatten(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        yield maps
        return
    for m in maps:
        yield from _flatten(m)


def model_attention(model: GeneModel, x, rows=None) -> np.ndarray:
    return aggregate_attention(iter_attention(model, x, rows), model.config.n_genes)


def gene_importance(agg: np.ndarray, gene_ids=None, top_n: int = 50) -> GeneImportanceReport:
    """s_j = sum_i A_ij; ranked descending with ties to the lower gene index."""
    agg = np.asarray(agg)
    if agg.ndim != 2 or agg.shape[0] != agg.shape[1]:
        raise ValueError("aggregated attention must be square")
    scores = agg.sum(axis=0)
    ranking = np.lexsort((np.arange(scores.size), -scores))
    return GeneImportanceReport(agg, scores, ranking, list(gene_ids) if gene_ids is not None else None, top_n)


def homophily(graph: CellGraph, labels) -> HomophilyReport:
    """Share of undirected edges joining two cells of the same class."""
    y = labels.truth if isinstance(labels, LabelSet) and labels.truth is not None else (
        labels.y if isinstance(labels, LabelSet) else np.asarray(labels))
    if y.shape[0] != graph.n:
        raise ValueError("one label per graph node required")
    pairs = graph.edges()
    if graph.symmetric is False:
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if len(pairs) == 0:
        raise ValueError("graph has no edges")
    if np.any(y[pairs] < 0):
        raise ValueError("homophily needs a label for every node on an edge")
    intra = int(np.sum(y[pairs[:, 0]] == y[pairs[:, 1]]))
    return HomophilyReport(intra, len(pairs))


def accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truth.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == truth))


# ----------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold: int
    q_accuracy: float
    p_accuracy: float | None
    n_test: int
    top_genes: list
    history: list = field(default_factory=list)
    skipped: int = 0


@dataclass
class CrossValReport:
    folds: list[FoldResult]

    def _values(self, attr):
        vals = [getattr(f, attr) for f in self.folds if getattr(f, attr) is not None]
        return np.asarray(vals, dtype=float)

    @property
    def q_mean(self) -> float:
        return float(self._values("q_accuracy").mean())

    @property
    def p_mean(self) -> float | None:
        v = self._values("p_accuracy")
        return float(v.mean()) if v.size else None

    def to_dict(self) -> dict:
        q, p = self._values("q_accuracy"), self._values("p_accuracy")
        return {
            "folds": [
                {"fold": f.fold, "q_accuracy": f.q_accuracy, "p_accuracy": f.p_accuracy,
                 "n_test": f.n_test, "skipped": f.skipped, "top_genes": f.top_genes, "history": f.history}
                for f in self.folds
            ],
            "mean": {"q_accuracy": float(q.mean()), "p_accuracy": float(p.mean()) if p.size else None},
            "std": {"q_accuracy": float(q.std()), "p_accuracy": float(p.std()) if p.size else None},
        }

    def write(self, out_dir, run_id: str = "crossval"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{run_id}_report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out / f"{run_id}_folds.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "q_accuracy", "p_accuracy", "n_test"])
            for f in self.folds:
                w.writerow([f.fold, f.q_accuracy, "" if f.p_accuracy is None else f.p_accuracy, f.n_test])
        for f in self.folds:
            with open(out / f"{run_id}_fold{f.fold}_top_genes.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["rank", "gene_id"])
                for r, g in enumerate(f.top_genes, start=1):
                    w.writerow([r, g])


def crossval(config: TrainConfig, mat: ExpressionMatrix, labels: LabelSet, k_folds: int = 5,
             T: int = 1000, s: float = 1e6, gene_options: dict | None = None,
             cell_options: dict | None = None, top_n: int = 50, folds=None) -> CrossValReport:
    """Each fold's cells are hidden (unlabeled) and scored; genes are re-selected on the other folds."""
    mat = drop_zero_genes(mat)
    values = normalize(mat, s)
    assign = split_folds(labels, k_folds, config.seed) if folds is None else np.asarray(folds)
    results = []
    for fold in range(k_folds):
        test = np.flatnonzero(assign == fold)
        train = np.flatnonzero((assign != fold) & (assign >= 0))
        pm = select_top_variance(values, T, mat.gene_ids, mat.cell_ids, s, rows=train, drop_uncovered=False)
        # cells expressing none of this fold's genes are left out of the fold's run
        covered = np.flatnonzero(np.diff(pm.values.indptr) > 0)
        skipped = int(pm.n_cells - covered.size)
        if skipped:
            log.warning("fold %d: %d cells express none of the kept genes and are skipped", fold, skipped)
        x = pm.values[covered]
        position = np.full(pm.n_cells, -1)
        position[covered] = np.arange(covered.size)
        test_local = position[test][position[test] >= 0]
        fold_labels = labels.hide(test).subset(covered)
        gene, cell, state, problem = run_em(config, x, fold_labels, gene_options, cell_options)
        q_logits, p_logits, _, _ = final_predictions(gene, cell, problem, config, state)
        truth = labels.y[covered][test_local]
        q_acc = accuracy(np.argmax(q_logits[test_local], axis=1), truth)
        p_acc = accuracy(np.argmax(p_logits[test_local], axis=1), truth) if p_logits is not None else None
        top = []
        if gene.config.n_layers:
            report = gene_importance(model_attention(gene, x), pm.kept_gene_ids, top_n)
            top = report.top
        log.info("fold %d: q=%.4f p=%s", fold, q_acc, p_acc)
        results.append(FoldResult(fold, q_acc, p_acc, int(test_local.size), top, state.accuracy_history,
                                  int(test.size - test_local.size)))
    return CrossValReport(results)
