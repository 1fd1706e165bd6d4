"""Synthetic count matrices with known cell types (Gaussian clusters in a latent space)."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .data import ExpressionMatrix, LabelSet, stratified_holdout


def make_counts(n_cells: int = 600, n_genes: int = 150, n_classes: int = 3, latent_dim: int = 8,
                separation: float = 5.0, spread: float = 1.0, loading: float = 0.6,
                library_size: float = 150.0, informative_fraction: float = 0.3, seed: int = 0):
    """Counts ~ Poisson(library * softmax(base + loadings @ z)), z ~ N(mu_class, spread^2 I).

    Class means are orthogonal with norm ``separation``, so every pair of
    classes sits at the same latent distance.

    Only ``informative_fraction`` of the genes load on the latent space; the
    rest carry pure sampling noise. Returns ``(ExpressionMatrix, class codes)``.
    """
    rng = np.random.default_rng(seed)
    if n_classes > latent_dim:
        raise ValueError("latent_dim must be at least n_classes")
    basis, _ = np.linalg.qr(rng.normal(size=(latent_dim, n_classes)))
    means = separation * basis.T
    y = np.arange(n_cells) % n_classes
    y = rng.permutation(y)
    z = means[y] + spread * rng.normal(size=(n_cells, latent_dim))
    base = rng.normal(0.0, 1.0, size=n_genes)
    loads = loading * rng.normal(size=(n_genes, latent_dim)) * (rng.random((n_genes, latent_dim)) < 0.3)
    n_info = int(round(informative_fraction * n_genes))
    loads[rng.permutation(n_genes)[n_info:]] = 0.0
    logits = base[None, :] + z @ loads.T
    logits -= logits.max(axis=1, keepdims=True)
    rates = np.exp(logits)
    rates /= rates.sum(axis=1, keepdims=True)
    lib = library_size * rng.lognormal(0.0, 0.3, size=(n_cells, 1))
    counts = rng.poisson(lib * rates)
    empty = counts.sum(axis=1) == 0
    counts[empty, rng.integers(0, n_genes, size=int(empty.sum()))] = 1
    mat = ExpressionMatrix(sp.csr_matrix(counts.astype(np.float64)),
                           [f"g{j}" for j in range(n_genes)], [f"c{i}" for i in range(n_cells)])
    return mat, y


def semi_supervised_labels(y: np.ndarray, labeled_fraction: float, seed: int = 0,
                           n_classes: int | None = None) -> LabelSet:
    """Keep a stratified ``labeled_fraction`` of labels; the rest become unlabeled (truth retained)."""
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    n_classes = n_classes or int(y.max()) + 1
    keep = stratified_holdout(y, np.arange(y.size), labeled_fraction, rng)
    full = LabelSet([f"type{c}" for c in range(n_classes)], y)
    hidden = np.setdiff1d(np.arange(y.size), keep)
    return full.hide(hidden)
