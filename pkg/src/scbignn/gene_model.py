"""Gene-level model: per-cell self-attention over expressed genes.

Cells in a batch are padded to the longest expressed-gene list; a boolean
mask keeps padded positions out of every softmax and out of the read-out, so
each cell only ever attends over its own T_i genes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .numerics import (
    MlpParams,
    NumericsError,
    glorot_uniform,
    mlp_backward,
    mlp_forward,
    softmax_rows,
    weighted_cross_entropy,
)


@dataclass
class GeneModelConfig:
    n_genes: int
    n_classes: int
    d_g: int = 32
    n_layers: int = 2
    n_heads: int = 1
    width: int = 32
    hidden: int = 32
    readout: str = "mean"
    scaled: bool = True
    dtype: str = "float32"
    alpha_init: float | None = None

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.width % self.n_heads:
            raise ValueError(f"layer width {self.width} not divisible by {self.n_heads} heads")
        if self.readout not in ("mean", "learned"):
            raise ValueError(f"unknown read-out {self.readout!r}")

    @property
    def head_width(self) -> int:
        return self.width // self.n_heads

    @property
    def out_width(self) -> int:
        return self.width if self.n_layers else self.d_g


@dataclass
class CellBatch:
    """Padded expressed-gene lists for a batch of cells."""

    genes: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    rows: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def cell(self, b: int):
        n = int(self.mask[b].sum())
        return self.genes[b, :n], self.values[b, :n]


def batch_from_lists(cells, dtype=np.float64, cell_ids=None) -> CellBatch:
    """Build a batch from ``[(gene_indices, values), ...]``."""
    if not len(cells):
        raise ValueError("empty batch")
    longest = 0
    for b, (g, v) in enumerate(cells):
        g = np.asarray(g)
        if g.size == 0:
            who = cell_ids[b] if cell_ids is not None else b
            raise ValueError(f"cell {who} has no expressed genes")
        if g.size != np.asarray(v).size:
            raise ValueError("gene and value lists differ in length")
        if np.any(np.diff(g) <= 0):
            raise ValueError("gene indices must be strictly increasing")
        longest = max(longest, g.size)
    n = len(cells)
    genes = np.zeros((n, longest), dtype=np.int64)
    values = np.zeros((n, longest), dtype=dtype)
    mask = np.zeros((n, longest), dtype=bool)
    for b, (g, v) in enumerate(cells):
        k = len(g)
        genes[b, :k] = g
        values[b, :k] = v
        mask[b, :k] = True
    return CellBatch(genes, values, mask)


def batch_from_csr(x: sp.csr_matrix, rows, dtype=np.float64, cell_ids=None) -> CellBatch:
    rows = np.asarray(rows, dtype=np.int64)
    cells = []
    for r in rows:
        lo, hi = x.indptr[r], x.indptr[r + 1]
        cells.append((x.indices[lo:hi], x.data[lo:hi]))
    try:
        batch = batch_from_lists(cells, dtype)
    except ValueError as exc:
        if cell_ids is not None and "no expressed genes" in str(exc):
            bad = next(r for r, (g, _) in zip(rows, cells) if len(g) == 0)
            raise ValueError(f"cell {cell_ids[bad]} has no expressed genes") from None
        raise
    batch.rows = rows
    return batch


@dataclass
class GeneForward:
    h: np.ndarray
    logits: np.ndarray
    attention: list | None = None
    cache: dict | None = field(default=None, repr=False)

    @property
    def probs(self) -> np.ndarray:
        return softmax_rows(self.logits)


class GeneModel:
    """Holds the flat parameter dict and runs forward / backward passes."""

    def __init__(self, config: GeneModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: GeneModelConfig, rng: np.random.Generator) -> "GeneModel":
        dt = np.dtype(config.dtype)
        c = config
        p: dict[str, np.ndarray] = {"gene_embedding": glorot_uniform(rng, c.n_genes, c.d_g, dt)}
        p.update(MlpParams.init(rng, [1, c.hidden, c.d_g], dt).named("count_mlp"))
        f_in = c.d_g
        for l in range(c.n_layers):
            for h in range(c.n_heads):
                pre = f"layer{l}.head{h}"
                p[f"{pre}.W"] = glorot_uniform(rng, f_in, c.head_width, dt)
                p.update(MlpParams.init(rng, [c.head_width, c.hidden, c.head_width], dt).named(f"{pre}.mlp"))
            f_in = c.width
        if c.readout == "learned":
            a0 = c.alpha_init if c.alpha_init is not None else 1.0 / c.n_genes
            p["alpha"] = np.full(c.n_genes, a0, dtype=dt)
        p.update(MlpParams.init(rng, [c.out_width, c.hidden, c.n_classes], dt).named("classifier"))
        return cls(config, p)

    # -- parameter views ---------------------------------------------------
    def mlp(self, prefix: str) -> MlpParams:
        ws, bs = [], []
        i = 0
        while f"{prefix}.{i}.weight" in self.params:
            ws.append(self.params[f"{prefix}.{i}.weight"])
            bs.append(self.params[f"{prefix}.{i}.bias"])
            i += 1
        return MlpParams(ws, bs)

    def copy(self) -> "GeneModel":
        return GeneModel(GeneModelConfig(**asdict(self.config)), {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "GeneModel":
        cfg = GeneModelConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        return GeneModel(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["gene_embedding"].dtype

    # -- forward -----------------------------------------------------------
    def embed(self, batch: CellBatch, cache: dict | None = None) -> np.ndarray:
        dt = self.dtype
        vals = batch.values.astype(dt, copy=False)[..., None]
        count_emb, mc = mlp_forward(self.mlp("count_mlp"), vals, return_cache=True)
        e = (self.params["gene_embedding"][batch.genes] + count_emb) * batch.mask[..., None]
        if cache is not None:
            cache["count_mlp"] = mc
        return e

    def attention_head(self, layer: int, head: int, f: np.ndarray, mask: np.ndarray,
                       pair_mask: np.ndarray | None = None, cache: dict | None = None):
        """One head: S = softmax(c * (F W)(F W)^T), output MLP(S F W)."""
        pre = f"layer{layer}.head{head}"
        w = self.params[f"{pre}.W"]
        if f.shape[-1] != w.shape[0]:
            raise NumericsError(f"attention input width {f.shape[-1]} != {w.shape[0]}")
        proj = f @ w
        scale = float(1.0 / np.sqrt(w.shape[1])) if self.config.scaled else 1.0
        logits = scale * (proj @ np.swapaxes(proj, -1, -2))
        keys = mask[:, None, :]
        if pair_mask is not None:
            eye = np.eye(mask.shape[1], dtype=bool)[None]
            keys = keys & (pair_mask | eye | ~mask[:, :, None])
        s = softmax_rows(logits, keys)
        agg = s @ proj
        out, mc = mlp_forward(self.mlp(f"{pre}.mlp"), agg, return_cache=True)
        if cache is not None:
            cache[pre] = (f, proj, s, mc, scale)
        return out, s

    def forward(self, batch: CellBatch, capture: bool = False, keep_cache: bool = False,
                pair_mask: np.ndarray | None = None) -> GeneForward:
        c = self.config
        cache = {} if keep_cache else None
        f = self.embed(batch, cache)
        mask = batch.mask
        attention = [] if capture else None
        for l in range(c.n_layers):
            outs, maps = [], []
            for h in range(c.n_heads):
                out, s = self.attention_head(l, h, f, mask, pair_mask, cache)
                outs.append(out)
                maps.append(s)
            f = np.concatenate(outs, axis=-1) * mask[..., None]
            if capture:
                attention.append(maps)
        weights = self.readout_weights(batch)
        hvec = np.einsum("bt,btf->bf", weights, f)
        logits, mc = mlp_forward(self.mlp("classifier"), hvec, return_cache=True)
        if cache is not None:
            cache.update(classifier=mc, final=f, readout=weights)
        return GeneForward(hvec, logits, attention, cache)

    def readout_weights(self, batch: CellBatch) -> np.ndarray:
        dt = self.dtype
        if self.config.readout == "learned":
            return self.params["alpha"][batch.genes] * batch.mask
        lengths = batch.mask.sum(axis=1, keepdims=True)
        return (batch.mask / lengths).astype(dt)

    # -- backward ----------------------------------------------------------
    def backward(self, batch: CellBatch, fwd: GeneForward, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        c = self.config
        cache = fwd.cache
        if cache is None:
            raise ValueError("forward must be run with keep_cache=True before backward")
        grads: dict[str, np.ndarray] = {}
        gh = mlp_backward(self.mlp("classifier"), cache["classifier"], grad_logits, "classifier", grads)
        f = cache["final"]
        gf = cache["readout"][..., None] * gh[:, None, :]
        if c.readout == "learned":
            contrib = np.einsum("btf,bf->bt", f, gh) * batch.mask
            ga = np.zeros_like(self.params["alpha"])
            np.add.at(ga, batch.genes.ravel(), contrib.ravel())
            grads["alpha"] = ga
        mask3 = batch.mask[..., None]
        for l in range(c.n_layers - 1, -1, -1):
            gf = gf * mask3
            g_in = None
            hw = c.head_width
            for h in range(c.n_heads):
                pre = f"layer{l}.head{h}"
                f_in, proj, s, mc, scale = cache[pre]
                g_out = gf[..., h * hw:(h + 1) * hw]
                g_agg = mlp_backward(self.mlp(f"{pre}.mlp"), mc, g_out, f"{pre}.mlp", grads)
                g_s = g_agg @ np.swapaxes(proj, -1, -2)
                g_proj = np.swapaxes(s, -1, -2) @ g_agg
                g_logit = s * (g_s - (g_s * s).sum(axis=-1, keepdims=True))
                g_proj += scale * ((g_logit + np.swapaxes(g_logit, -1, -2)) @ proj)
                w = self.params[f"{pre}.W"]
                grads[f"{pre}.W"] = np.einsum("btf,btd->fd", f_in, g_proj)
                contrib = g_proj @ w.T
                g_in = contrib if g_in is None else g_in + contrib
            gf = g_in
        ge = gf * mask3
        gemb = np.zeros_like(self.params["gene_embedding"])
        np.add.at(gemb, batch.genes.ravel(), ge.reshape(-1, ge.shape[-1]))
        grads["gene_embedding"] = gemb
        mlp_backward(self.mlp("count_mlp"), cache["count_mlp"], ge, "count_mlp", grads, need_input_grad=False)
        return grads

    def loss_and_grad(self, batch: CellBatch, targets: np.ndarray, weights: np.ndarray):
        """Weighted cross-entropy sum and its gradient for one (chunk of a) batch."""
        fwd = self.forward(batch, keep_cache=True)
        loss, g_logits = weighted_cross_entropy(fwd.logits.astype(np.float64), targets, weights)
        grads = self.backward(batch, fwd, g_logits.astype(self.dtype))
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise FloatingPointError("non-finite gradient in gene model backward pass")
        return loss, grads


def iter_chunks(x: sp.csr_matrix, rows: np.ndarray, budget: int = 100_000):
    """Yield position arrays into ``rows``, grouping cells of similar length.

    A chunk is closed once (cells x longest^2) would exceed ``budget``.
    """
    rows = np.asarray(rows)
    lengths = np.diff(x.indptr)[rows]
    order = np.argsort(lengths, kind="stable")
    start = 0
    while start < order.size:
        end = start + 1
        while end < order.size and (end - start + 1) * int(lengths[order[end]]) ** 2 <= budget:
            end += 1
        yield order[start:end]
        start = end


def gene_loss_and_grad(model: GeneModel, x: sp.csr_matrix, rows, targets, weights, budget=100_000):
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for pos in iter_chunks(x, rows, budget):
        batch = batch_from_csr(x, np.asarray(rows)[pos], model.dtype)
        loss, g = model.loss_and_grad(batch, targets[pos], weights[pos])
        total += loss
        for k, v in g.items():
            if k in grads:
                grads[k] += v
            else:
                grads[k] = v
    return total, grads


def gene_predict(model: GeneModel, x: sp.csr_matrix, rows=None, budget=100_000):
    """Cell representations h and class logits for ``rows`` (default: all cells)."""
    rows = np.arange(x.shape[0]) if rows is None else np.asarray(rows)
    h = np.zeros((rows.size, model.config.out_width), dtype=model.dtype)
    logits = np.zeros((rows.size, model.config.n_classes), dtype=model.dtype)
    for pos in iter_chunks(x, rows, budget):
        fwd = model.forward(batch_from_csr(x, rows[pos], model.dtype))
        h[pos] = fwd.h
        logits[pos] = fwd.logits
    return h, logits


def iter_attention(model: GeneModel, x: sp.csr_matrix, rows=None, budget=100_000):
    """Yield ``(gene_indices, [per layer [per head T_i x T_i]])`` for each cell."""
    rows = np.arange(x.shape[0]) if rows is None else np.asarray(rows)
    for pos in iter_chunks(x, rows, budget):
        batch = batch_from_csr(x, rows[pos], model.dtype)
        fwd = model.forward(batch, capture=True)
        for b in range(len(pos)):
            n = int(batch.mask[b].sum())
            maps = [[s[b, :n, :n] for s in layer] for layer in fwd.attention]
            yield batch.genes[b, :n], maps


# Single-cell conveniences (unpadded), mostly for analysis and tests.


def embed_cell(model: GeneModel, genes, values) -> np.ndarray:
    """E_i: gene embedding of each expressed gene plus count-MLP(value)."""
    batch = batch_from_lists([(genes, values)], model.dtype)
    return model.embed(batch)[0]


def attention_layer(model: GeneModel, layer: int, f: np.ndarray, pair_mask: np.ndarray | None = None):
    """Multi-head layer on one cell's T_i x f features. Returns (output, [attention per head])."""
    f = np.asarray(f, dtype=model.dtype)[None]
    mask = np.ones(f.shape[:2], dtype=bool)
    pm = None if pair_mask is None else np.asarray(pair_mask, dtype=bool)[None]
    outs, maps = [], []
    for h in range(model.config.n_heads):
        out, s = model.attention_head(layer, h, f, mask, pm)
        outs.append(out[0])
        maps.append(s[0])
    return np.concatenate(outs, axis=-1), maps


def read_out(model: GeneModel, reps: np.ndarray, genes) -> np.ndarray:
    """h_i as the alpha-weighted (or mean) sum of one cell's gene representations."""
    reps = np.asarray(reps)
    genes = np.asarray(genes)
    if reps.shape[0] != genes.size:
        raise ValueError("one representation row per expressed gene required")
    if model.config.readout == "learned":
        return model.params["alpha"][genes] @ reps
    return reps.mean(axis=0)
