"""Cell-level model: kNN graph over cell representations and mean-aggregation layers.

The classifier reads the concatenation of every layer's output (including the
input features), jumping-knowledge style.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .numerics import MlpParams, NumericsError, glorot_uniform, mlp_backward, mlp_forward, softmax_rows, weighted_cross_entropy


@dataclass
class CellGraph:
    """Adjacency as CSR neighbor lists (sorted per row)."""

    indptr: np.ndarray
    indices: np.ndarray
    k: int
    symmetric: bool = True
    self_loops: bool = False

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def edges(self) -> np.ndarray:
        """Undirected edge list (i < j), or directed pairs when not symmetric."""
        rows = np.repeat(np.arange(self.n), self.degrees())
        pairs = np.stack([rows, self.indices], axis=1)
        if self.symmetric:
            pairs = pairs[pairs[:, 0] < pairs[:, 1]]
        return pairs

    @classmethod
    def from_edges(cls, n: int, edges, symmetric: bool = True, k: int = 0) -> "CellGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        rows, cols = edges[:, 0], edges[:, 1]
        if symmetric:
            rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
        a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        a.sum_duplicates()
        a.sort_indices()
        loops = bool(np.any(rows == cols))
        return cls(a.indptr.astype(np.int64), a.indices.astype(np.int64), k, symmetric, loops)

    def write_edges(self, path, cell_ids=None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id_a", "cell_id_b"])
            for i, j in self.edges():
                w.writerow([cell_ids[i], cell_ids[j]] if cell_ids is not None else [i, j])


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str = "cosine") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
        bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
        return 1.0 - an @ bn.T
    if metric == "euclidean":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def knn_indices(reps, k: int, metric: str = "cosine", chunk: int = 1024) -> np.ndarray:
    """Exact k nearest other cells per row; ties go to the lower cell index."""
    reps = np.asarray(reps)
    if sp.issparse(reps):
        reps = reps.toarray()
    n = reps.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (got k={k}, N={n})")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d = pairwise_distances(reps[lo:hi], reps, metric)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def build_knn_graph(reps, k: int, metric: str = "cosine", symmetric: bool = True) -> CellGraph:
    """kNN graph, symmetrised by union unless ``symmetric`` is False."""
    reps = reps.toarray() if sp.issparse(reps) else np.asarray(reps)
    nbr = knn_indices(reps, k, metric)
    n = reps.shape[0]
    rows = np.repeat(np.arange(n), k)
    g = CellGraph.from_edges(n, np.stack([rows, nbr.ravel()], axis=1), symmetric=symmetric, k=k)
    return g


def row_normalized(graph: CellGraph, dtype=np.float64) -> sp.csr_matrix:
    """D^-1 A, with a unit self entry for nodes of degree zero."""
    a = graph.adjacency().astype(dtype)
    deg = np.asarray(a.sum(axis=1)).ravel()
    lonely = np.flatnonzero(deg == 0)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    r = sp.diags(inv.astype(dtype)) @ a
    if lonely.size:
        r = r + sp.csr_matrix((np.ones(lonely.size, dtype=dtype), (lonely, lonely)), shape=a.shape)
    r = sp.csr_matrix(r, dtype=dtype)
    r.sort_indices()
    return r


@dataclass
class CellModelConfig:
    n_genes: int
    h_width: int
    n_classes: int
    n_layers: int = 3
    width: int = 32
    hidden: int = 32
    input_width: int = 32
    dtype: str = "float32"

    @property
    def z_width(self) -> int:
        return self.h_width + self.input_width

    @property
    def jk_width(self) -> int:
        return self.z_width + self.n_layers * self.width


@dataclass
class CellForward:
    logits: np.ndarray
    layers: list
    cache: dict | None = None

    @property
    def probs(self) -> np.ndarray:
        return softmax_rows(self.logits)


class CellModel:
    def __init__(self, config: CellModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: CellModelConfig, rng: np.random.Generator) -> "CellModel":
        c = config
        dt = np.dtype(c.dtype)
        p: dict[str, np.ndarray] = {}
        p.update(MlpParams.init(rng, [c.n_genes, c.hidden, c.input_width], dt).named("input_mlp"))
        f_in = c.z_width
        for l in range(c.n_layers):
            p[f"layer{l}.W"] = glorot_uniform(rng, f_in, c.width, dt)
            p.update(MlpParams.init(rng, [c.width, c.hidden, c.width], dt).named(f"layer{l}.mlp"))
            f_in = c.width
        p.update(MlpParams.init(rng, [c.jk_width, c.hidden, c.n_classes], dt).named("classifier"))
        return cls(config, p)

    def mlp(self, prefix: str) -> MlpParams:
        ws, bs = [], []
        i = 0
        while f"{prefix}.{i}.weight" in self.params:
            ws.append(self.params[f"{prefix}.{i}.weight"])
            bs.append(self.params[f"{prefix}.{i}.bias"])
            i += 1
        return MlpParams(ws, bs)

    @property
    def dtype(self):
        return self.params["classifier.0.weight"].dtype

    def copy(self) -> "CellModel":
        return CellModel(CellModelConfig(**asdict(self.config)), {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "CellModel":
        cfg = CellModelConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        return CellModel(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def aggregate(self, layer: int, r: sp.csr_matrix, z: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """Z' = MLP(D^-1 A Z W)."""
        w = self.params[f"layer{layer}.W"]
        if z.shape[1] != w.shape[0] or r.shape[1] != z.shape[0]:
            raise NumericsError(f"aggregate: Z {z.shape}, W {w.shape}, operator {r.shape} do not align")
        rz = np.asarray(r @ z)
        y = rz @ w
        out, mc = mlp_forward(self.mlp(f"layer{layer}.mlp"), y, return_cache=True)
        if cache is not None:
            cache[f"layer{layer}"] = (rz, mc)
        return out

    def forward(self, graph: CellGraph | sp.csr_matrix, x, h, keep_cache: bool = False) -> CellForward:
        """Logits for every node. ``graph`` may be a prebuilt D^-1 A operator."""
        dt = self.dtype
        r = graph if sp.issparse(graph) else row_normalized(graph, dt)
        r = r.astype(dt, copy=False)
        x = x.toarray() if sp.issparse(x) else np.asarray(x)
        x = x.astype(dt, copy=False)
        h = np.asarray(h, dtype=dt)
        if not (r.shape[0] == x.shape[0] == h.shape[0]):
            raise NumericsError(f"graph has {r.shape[0]} nodes but inputs have {x.shape[0]} / {h.shape[0]} rows")
        cache = {} if keep_cache else None
        xe, mc = mlp_forward(self.mlp("input_mlp"), x, return_cache=True)
        z = np.concatenate([h, xe], axis=1)
        layers = [z]
        for l in range(self.config.n_layers):
            z = self.aggregate(l, r, z, cache)
            layers.append(z)
        jk = np.concatenate(layers, axis=1)
        logits, cc = mlp_forward(self.mlp("classifier"), jk, return_cache=True)
        if cache is not None:
            cache.update(input_mlp=mc, classifier=cc, r=r)
        return CellForward(logits, layers, cache)

    def backward(self, fwd: CellForward, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for theta only; h is treated as data and gets no gradient."""
        c = self.config
        cache = fwd.cache
        if cache is None:
            raise ValueError("forward must be run with keep_cache=True before backward")
        grads: dict[str, np.ndarray] = {}
        g_jk = mlp_backward(self.mlp("classifier"), cache["classifier"], grad_logits, "classifier", grads)
        widths = [z.shape[1] for z in fwd.layers]
        splits = np.cumsum(widths)[:-1]
        g_layers = np.split(g_jk, splits, axis=1)
        r = cache["r"]
        g = g_layers[-1]
        for l in range(c.n_layers - 1, -1, -1):
            rz, mc = cache[f"layer{l}"]
            g_y = mlp_backward(self.mlp(f"layer{l}.mlp"), mc, g, f"layer{l}.mlp", grads)
            grads[f"layer{l}.W"] = rz.T @ g_y
            g = np.asarray(r.T @ (g_y @ self.params[f"layer{l}.W"].T)) + g_layers[l]
        g_xe = g[:, c.h_width:]
        mlp_backward(self.mlp("input_mlp"), cache["input_mlp"], g_xe, "input_mlp", grads, need_input_grad=False)
        return grads

    def loss_and_grad(self, graph, x, h, rows, targets, weights):
        fwd = self.forward(graph, x, h, keep_cache=True)
        loss, g_rows = weighted_cross_entropy(fwd.logits[rows].astype(np.float64), targets, weights)
        g_logits = np.zeros_like(fwd.logits)
        np.add.at(g_logits, rows, g_rows.astype(self.dtype))
        grads = self.backward(fwd, g_logits)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise FloatingPointError("non-finite gradient in cell model backward pass")
        return loss, grads


def aggregate_layer(model: CellModel, layer: int, graph: CellGraph, z: np.ndarray) -> np.ndarray:
    return model.aggregate(layer, row_normalized(graph, model.dtype), np.asarray(z, dtype=model.dtype))
