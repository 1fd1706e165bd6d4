"""Versioned binary checkpoints for both models.

Layout: magic (``SCBG-G1`` or ``SCBG-C1``), uint32 format version, a packed
shape header, uint32-prefixed JSON metadata (config and gene-id digest), a
uint32 block count, then per block: uint16 name length, UTF-8 name, uint8
dtype code, uint8 ndim, uint32 dims, raw little-endian bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cell_model import CellModel, CellModelConfig
from .gene_model import GeneModel, GeneModelConfig

GENE_MAGIC = b"SCBG-G1"
CELL_MAGIC = b"SCBG-C1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v.name: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _write(path, magic: bytes, shape_fields: tuple[int, ...], meta: dict, params: dict):
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack(f"<{len(shape_fields)}I", *shape_fields))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name])
            code = _CODES.get(arr.dtype.newbyteorder("<").name)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def _read(path, magic: bytes, n_shape: int):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    buf = path.read_bytes()
    if not buf.startswith(magic):
        raise CheckpointError(f"{path}: expected magic {magic.decode()}")
    pos = len(magic)
    try:
        (version,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        shape_fields = struct.unpack_from(f"<{n_shape}I", buf, pos)
        pos += 4 * n_shape
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dt, n, pos).reshape(shape)
            pos += n * dt.itemsize
            params[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return shape_fields, meta, params


def save_gene_model(model: GeneModel, path, gene_digest: str | None = None, extra: dict | None = None):
    c = model.config
    meta = {"config": asdict(c), "gene_digest": gene_digest, **(extra or {})}
    _write(path, GENE_MAGIC, (c.n_genes, c.d_g, c.n_layers, c.n_heads, c.n_classes), meta, model.params)


def load_gene_model(path) -> tuple[GeneModel, dict]:
    fields, meta, params = _read(path, GENE_MAGIC, 5)
    cfg = GeneModelConfig(**meta["config"])
    if fields != (cfg.n_genes, cfg.d_g, cfg.n_layers, cfg.n_heads, cfg.n_classes):
        raise CheckpointError(f"{path}: header shape fields disagree with stored config")
    return GeneModel(cfg, params), meta


def save_cell_model(model: CellModel, path, gene_digest: str | None = None, extra: dict | None = None):
    c = model.config
    meta = {"config": asdict(c), "gene_digest": gene_digest, **(extra or {})}
    _write(path, CELL_MAGIC, (c.n_genes, c.h_width, c.n_layers, 1, c.n_classes), meta, model.params)


def load_cell_model(path) -> tuple[CellModel, dict]:
    fields, meta, params = _read(path, CELL_MAGIC, 5)
    cfg = CellModelConfig(**meta["config"])
    if fields != (cfg.n_genes, cfg.h_width, cfg.n_layers, 1, cfg.n_classes):
        raise CheckpointError(f"{path}: header shape fields disagree with stored config")
    return CellModel(cfg, params), meta
