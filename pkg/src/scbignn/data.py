"""Expression matrix I/O, normalisation, variable-gene selection and fold splitting."""
from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_SCALE = 1e6
ARTIFACT_MAGIC = b"SCBG1"
ARTIFACT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; message carries ``path:line``."""

    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


class ValidationError(ValueError):
    pass


@dataclass
class ExpressionMatrix:
    """Raw cells x genes counts, stored as CSR."""

    counts: sp.csr_matrix
    gene_ids: list[str]
    cell_ids: list[str]

    def __post_init__(self):
        self.counts = sp.csr_matrix(self.counts)
        self.counts.sort_indices()
        n, m = self.counts.shape
        if len(self.cell_ids) != n or len(self.gene_ids) != m:
            raise ValidationError(
                f"matrix is {n}x{m} but got {len(self.cell_ids)} cell ids and {len(self.gene_ids)} gene ids")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise ValidationError("negative count in expression matrix")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def entries(self):
        coo = self.counts.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))


@dataclass
class ProcessedMatrix:
    """Normalised matrix restricted to the kept genes (CSR, float64)."""

    values: sp.csr_matrix
    kept_gene_ids: list[str]
    cell_ids: list[str]
    scale: float
    dropped_cells: int = 0

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes_kept(self) -> int:
        return self.values.shape[1]


@dataclass
class LabelSet:
    """Class names plus one integer code per cell; -1 marks unlabeled cells."""

    classes: list[str]
    y: np.ndarray
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.size and self.y.max() >= len(self.classes):
            raise ValidationError("label index out of range for class list")
        if np.any(self.y < -1):
            raise ValidationError("label codes must be >= -1")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.y >= 0)

    @property
    def unlabeled(self) -> np.ndarray:
        return np.flatnonzero(self.y < 0)

    def subset(self, idx) -> "LabelSet":
        idx = np.asarray(idx, dtype=np.int64)
        truth = self.truth[idx] if self.truth is not None else None
        return LabelSet(list(self.classes), self.y[idx], truth)

    def hide(self, idx) -> "LabelSet":
        """Copy with labels of ``idx`` hidden; the original codes are kept as ``truth``."""
        y = self.y.copy()
        y[np.asarray(idx, dtype=np.int64)] = -1
        truth = self.truth if self.truth is not None else self.y.copy()
        return LabelSet(list(self.classes), y, truth)


# ------------------------------------------------------------------------- loading


def _detect_format(path: Path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("%%MatrixMarket"):
        return "mtx"
    return "csv"


def load_matrix(path, format: str | None = None, gene_ids=None, cell_ids=None,
                drop_empty_cells: bool = True) -> ExpressionMatrix:
    """Load Matrix Market coordinate or dense CSV counts (rows are cells).

    For Matrix Market input, identifiers may be passed as lists or as paths
    to one-id-per-line files; otherwise ``cell{i}`` / ``gene{j}`` are used.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    fmt = format or _detect_format(path)
    if fmt == "mtx":
        counts = _read_mtx(path)
        gene_ids = _resolve_ids(gene_ids, counts.shape[1], "gene")
        cell_ids = _resolve_ids(cell_ids, counts.shape[0], "cell")
    elif fmt == "csv":
        counts, gene_ids, cell_ids = _read_dense_csv(path)
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")
    mat = ExpressionMatrix(counts, list(gene_ids), list(cell_ids))
    if drop_empty_cells:
        mat, dropped = drop_empty_rows(mat)
        if dropped:
            log.info("dropped %d all-zero cells from %s", dropped, path)
    return mat


def _resolve_ids(ids, n: int, kind: str) -> list[str]:
    if ids is None:
        return [f"{kind}{i}" for i in range(n)]
    if isinstance(ids, (str, Path)):
        ids = [ln.strip() for ln in Path(ids).read_text().splitlines() if ln.strip()]
    ids = list(ids)
    if len(ids) != n:
        raise ValidationError(f"expected {n} {kind} ids, got {len(ids)}")
    return ids


def _read_mtx(path: Path) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    shape = None
    nnz = 0
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError(path, 1, "empty file")
        parts = header.split()
        if len(parts) != 5 or parts[0] != "%%MatrixMarket":
            raise ParseError(path, 1, "missing %%MatrixMarket banner")
        obj, layout, field_, symm = (p.lower() for p in parts[1:])
        if obj != "matrix" or layout != "coordinate" or symm != "general":
            raise ParseError(path, 1, f"unsupported Matrix Market variant: {' '.join(parts[1:])}")
        if field_ not in ("integer", "real"):
            raise ParseError(path, 1, f"unsupported field type {field_!r}")
        for lineno, line in enumerate(fh, start=2):
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            tok = s.split()
            if shape is None:
                if len(tok) != 3:
                    raise ParseError(path, lineno, "size line must hold rows, cols, nnz")
                try:
                    n, m, nnz = (int(t) for t in tok)
                except ValueError:
                    raise ParseError(path, lineno, f"bad size line {s!r}") from None
                shape = (n, m)
                continue
            if len(tok) != 3:
                raise ParseError(path, lineno, f"expected 'row col value', got {s!r}")
            try:
                i, j = int(tok[0]), int(tok[1])
                v = int(tok[2]) if field_ == "integer" else float(tok[2])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric entry {s!r}") from None
            if not (1 <= i <= shape[0] and 1 <= j <= shape[1]):
                raise ParseError(path, lineno, f"index ({i}, {j}) outside {shape[0]}x{shape[1]}")
            if v < 0:
                raise ParseError(path, lineno, f"negative count {v}")
            rows.append(i - 1)
            cols.append(j - 1)
            vals.append(v)
    if shape is None:
        raise ParseError(path, None, "no size line found")
    if len(vals) != nnz:
        raise ParseError(path, None, f"header promises {nnz} entries, found {len(vals)}")
    coo = sp.coo_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape)
    csr = coo.tocsr()
    if csr.nnz != len(vals):
        raise ParseError(path, None, "duplicate (cell, gene) entries")
    return csr


def _read_dense_csv(path: Path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if len(header) < 2:
            raise ParseError(path, 1, "header needs a cell-id column and at least one gene id")
        gene_ids = [g.strip() for g in header[1:]]
        cell_ids, blocks = [], []
        for row in reader:
            lineno = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                vals = np.asarray(row[1:], dtype=np.float64)
            except ValueError:
                bad = next(k for k, t in enumerate(row[1:]) if not _is_number(t))
                raise ParseError(path, lineno, f"column {bad + 2}: non-numeric value {row[bad + 1]!r}") from None
            if np.any(vals < 0):
                bad = int(np.flatnonzero(vals < 0)[0])
                raise ParseError(path, lineno, f"column {bad + 2}: negative count {vals[bad]:g}")
            cell_ids.append(row[0].strip())
            blocks.append(sp.csr_matrix(vals[None, :]))
    if not cell_ids:
        raise ParseError(path, 2, "no cell rows")
    counts = sp.vstack(blocks, format="csr")
    return counts, gene_ids, cell_ids


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def write_matrix(mat: ExpressionMatrix, path, format: str = "mtx"):
    path = Path(path)
    if format == "mtx":
        coo = mat.counts.tocoo()
        order = np.lexsort((coo.col, coo.row))
        integer = np.all(coo.data == np.round(coo.data))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"%%MatrixMarket matrix coordinate {'integer' if integer else 'real'} general\n")
            fh.write(f"{mat.n_cells} {mat.n_genes} {coo.nnz}\n")
            for k in order:
                v = coo.data[k]
                fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {int(v) if integer else repr(float(v))}\n")
    elif format == "csv":
        dense = mat.counts.toarray()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", *mat.gene_ids])
            for cid, row in zip(mat.cell_ids, dense):
                w.writerow([cid, *(_fmt_count(v) for v in row)])
    else:
        raise ValueError(f"unknown matrix format {format!r}")


def _fmt_count(v: float) -> str:
    return str(int(v)) if v == int(v) else repr(float(v))


def drop_empty_rows(mat: ExpressionMatrix):
    keep = np.flatnonzero(mat.counts.getnnz(axis=1) > 0)
    dropped = mat.n_cells - keep.size
    if not dropped:
        return mat, 0
    return ExpressionMatrix(mat.counts[keep], mat.gene_ids, [mat.cell_ids[i] for i in keep]), dropped


def drop_zero_genes(mat: ExpressionMatrix) -> ExpressionMatrix:
    keep = np.flatnonzero(mat.counts.getnnz(axis=0) > 0)
    return ExpressionMatrix(mat.counts[:, keep], [mat.gene_ids[j] for j in keep], mat.cell_ids)


def load_labels(path, cell_ids: list[str], classes: list[str] | None = None) -> LabelSet:
    """Read a two-column ``cell_id,class`` CSV with a header row.

    Cells missing from the file (or with an empty class) are unlabeled. Ids in
    the file that do not occur in ``cell_ids`` are an error.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    index = {c: i for i, c in enumerate(cell_ids)}
    y = np.full(len(cell_ids), -1, dtype=np.int64)
    names: dict[str, int] = {c: i for i, c in enumerate(classes)} if classes else {}
    fixed = classes is not None
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) is None:
            raise ParseError(path, 1, "empty label file")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(path, reader.line_num, f"expected 2 fields, got {len(row)}")
            rows.append((reader.line_num, row[0].strip(), row[1].strip()))
    if not fixed:
        for name in sorted({r[2] for r in rows if r[2]}):
            names[name] = len(names)
    for lineno, cid, cls in rows:
        if cid not in index:
            raise ValidationError(f"{path}:{lineno}: cell id {cid!r} not present in matrix")
        if cid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate cell id {cid!r}")
        seen.add(cid)
        if not cls:
            continue
        if cls not in names:
            raise ValidationError(f"{path}:{lineno}: unknown class {cls!r}")
        y[index[cid]] = names[cls]
    ordered = sorted(names, key=names.get)
    return LabelSet(ordered, y)


def write_labels(path, cell_ids, labels: LabelSet, use_truth: bool = False):
    codes = labels.truth if use_truth and labels.truth is not None else labels.y
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "label"])
        for cid, c in zip(cell_ids, codes):
            w.writerow([cid, labels.classes[c] if c >= 0 else ""])


# ------------------------------------------------------------------- preprocessing


def normalize(x: ExpressionMatrix | sp.spmatrix, s: float = DEFAULT_SCALE) -> sp.csr_matrix:
    """log(1 + s * X_ij / sum_m X_im) on the stored (nonzero) entries."""
    if s <= 0:
        raise ValidationError("scaling value s must be positive")
    counts = x.counts if isinstance(x, ExpressionMatrix) else sp.csr_matrix(x)
    counts = sp.csr_matrix(counts, dtype=np.float64, copy=True)
    counts.eliminate_zeros()
    totals = np.asarray(counts.sum(axis=1)).ravel()
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        who = x.cell_ids[empty[0]] if isinstance(x, ExpressionMatrix) else str(empty[0])
        raise ValidationError(f"cell {who} has no nonzero counts; filter it before normalising")
    row_of = np.repeat(np.arange(counts.shape[0]), np.diff(counts.indptr))
    counts.data = np.log1p(s * counts.data / totals[row_of])
    return counts


def gene_variances(values: sp.csr_matrix, rows=None) -> np.ndarray:
    """Population variance per column, optionally over a subset of rows."""
    v = values if rows is None else values[np.asarray(rows)]
    n = v.shape[0]
    mean = np.asarray(v.sum(axis=0)).ravel() / n
    sq = np.asarray(v.multiply(v).sum(axis=0)).ravel() / n
    return np.maximum(sq - mean * mean, 0.0)


def rank_genes_by_variance(var: np.ndarray, T: int) -> np.ndarray:
    """Indices of the top-T positive-variance genes, descending variance, ties by index."""
    if T < 1:
        raise ValidationError("T must be at least 1")
    candidates = np.flatnonzero(var > 0)
    if T > candidates.size:
        warnings.warn(f"requested T={T} but only {candidates.size} genes have nonzero variance; keeping all",
                      stacklevel=3)
    order = np.lexsort((candidates, -var[candidates]))
    return candidates[order[:T]]


def select_top_variance(values: sp.csr_matrix, T: int, gene_ids: list[str], cell_ids: list[str],
                        scale: float = DEFAULT_SCALE, rows=None, dropped_cells: int = 0,
                        drop_uncovered: bool = True) -> ProcessedMatrix:
    """Keep the T most variable genes (variance of normalised values over ``rows``).

    Cells that express none of the kept genes cannot be fed to the gene-level
    model; with ``drop_uncovered`` they are removed and added to the dropped count.
    """
    keep = rank_genes_by_variance(gene_variances(values, rows), T)
    sub = sp.csr_matrix(values[:, keep])
    sub.sort_indices()
    cell_ids = list(cell_ids)
    covered = np.diff(sub.indptr) > 0
    if drop_uncovered and not covered.all():
        n_bad = int((~covered).sum())
        log.warning("dropping %d cells that express none of the %d kept genes", n_bad, len(keep))
        sub = sub[covered]
        cell_ids = [c for c, ok in zip(cell_ids, covered) if ok]
        dropped_cells += n_bad
    return ProcessedMatrix(sub, [gene_ids[j] for j in keep], cell_ids, float(scale), dropped_cells)


def preprocess(mat: ExpressionMatrix, T: int = 1000, s: float = DEFAULT_SCALE, dropped_cells: int = 0) -> ProcessedMatrix:
    mat = drop_zero_genes(mat)
    values = normalize(mat, s)
    return select_top_variance(values, T, mat.gene_ids, mat.cell_ids, s, dropped_cells=dropped_cells)


# ------------------------------------------------------------------------- folds


def split_folds(labels: LabelSet | np.ndarray, k_folds: int, seed: int = 0) -> np.ndarray:
    """Stratified fold index per cell (labeled cells only; -1 for unlabeled).

    Classes are dealt round-robin after a seeded shuffle, continuing the
    rotation across classes so total fold sizes stay balanced too.
    """
    if k_folds < 2:
        raise ValidationError("k_folds must be at least 2")
    y = labels.y if isinstance(labels, LabelSet) else np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.full(y.shape[0], -1, dtype=np.int64)
    offset = 0
    for c in np.unique(y[y >= 0]):
        members = np.flatnonzero(y == c)
        if members.size < k_folds:
            warnings.warn(f"class {c} has {members.size} members, fewer than {k_folds} folds", stacklevel=2)
        members = rng.permutation(members)
        folds[members] = (offset + np.arange(members.size)) % k_folds
        offset = (offset + members.size) % k_folds
    return folds


def stratified_holdout(y: np.ndarray, idx: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Pick about ``fraction`` of ``idx`` per class (at least one per class when possible)."""
    out = []
    for c in np.unique(y[idx]):
        members = rng.permutation(idx[y[idx] == c])
        n = int(round(fraction * members.size))
        if fraction > 0 and n == 0 and members.size > 1:
            n = 1
        out.append(members[:n])
    return np.sort(np.concatenate(out)) if out else np.empty(0, dtype=np.int64)


# ------------------------------------------------------------------------ artifact


def write_artifact(pm: ProcessedMatrix, path):
    """Binary processed matrix: magic, (T, N, s) header, id block, CSR arrays.

    Layout after the 5-byte magic: uint32 version, uint32 T, uint32 N,
    float64 s, uint32 dropped, then length-prefixed UTF-8 id blocks and
    int64 indptr / int32 indices / float64 data arrays.
    """
    v = pm.values
    with open(path, "wb") as fh:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<IIIdI", ARTIFACT_VERSION, pm.n_genes_kept, pm.n_cells, pm.scale, pm.dropped_cells))
        _write_ids(fh, pm.kept_gene_ids)
        _write_ids(fh, pm.cell_ids)
        fh.write(struct.pack("<Q", v.nnz))
        fh.write(v.indptr.astype("<i8").tobytes())
        fh.write(v.indices.astype("<i4").tobytes())
        fh.write(v.data.astype("<f8").tobytes())


def read_artifact(path) -> ProcessedMatrix:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    buf = path.read_bytes()
    if not buf.startswith(ARTIFACT_MAGIC):
        raise ParseError(path, None, "not a processed-matrix artifact (bad magic)")
    pos = len(ARTIFACT_MAGIC)
    try:
        version, T, N, s, dropped = struct.unpack_from("<IIIdI", buf, pos)
        pos += struct.calcsize("<IIIdI")
        if version != ARTIFACT_VERSION:
            raise ParseError(path, None, f"unsupported artifact version {version}")
        genes, pos = _read_ids(buf, pos)
        cells, pos = _read_ids(buf, pos)
        (nnz,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        indptr = np.frombuffer(buf, "<i8", N + 1, pos).astype(np.int64)
        pos += 8 * (N + 1)
        indices = np.frombuffer(buf, "<i4", nnz, pos).astype(np.int32)
        pos += 4 * nnz
        data = np.frombuffer(buf, "<f8", nnz, pos).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ParseError(path, None, f"truncated artifact ({exc})") from None
    if len(genes) != T or len(cells) != N:
        raise ParseError(path, None, "artifact header disagrees with id blocks")
    values = sp.csr_matrix((data, indices, indptr), shape=(N, T))
    return ProcessedMatrix(values, genes, cells, s, dropped)


def _write_ids(fh, ids):
    blob = "\n".join(ids).encode("utf-8")
    fh.write(struct.pack("<IQ", len(ids), len(blob)))
    fh.write(blob)


def _read_ids(buf, pos):
    n, size = struct.unpack_from("<IQ", buf, pos)
    pos += struct.calcsize("<IQ")
    blob = buf[pos:pos + size]
    if len(blob) != size:
        raise ValueError("id block truncated")
    ids = blob.decode("utf-8").split("\n") if n else []
    if len(ids) != n:
        raise ValueError("id block count mismatch")
    return ids, pos + size


def gene_ids_digest(gene_ids) -> str:
    import hashlib

    return hashlib.sha256("\n".join(gene_ids).encode("utf-8")).hexdigest()
