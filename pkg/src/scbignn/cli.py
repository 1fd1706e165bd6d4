"""Command-line entry point: ``scbignn <command> [options]``.

Exit codes: 0 success, 2 unreadable or malformed input, 3 invalid
configuration or data, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .analysis import crossval, gene_importance, homophily, model_attention
from .cell_model import build_knn_graph
from .checkpoint import CheckpointError, load_cell_model, load_gene_model, save_gene_model
from .data import (
    ParseError,
    ValidationError,
    drop_empty_rows,
    gene_ids_digest,
    load_labels,
    load_matrix,
    preprocess,
    read_artifact,
    stratified_holdout,
    write_artifact,
)
from .em import TrainConfig, TrainingDivergence, final_predictions, run_em
from .gene_model import GeneModel, gene_predict
from .numerics import NumericsError, param_checksum, softmax_rows

log = logging.getLogger("scbignn")

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3, 4

PRESETS = {
    "default": {},
    "baronmouse": {"n_layers": 1, "n_heads": 4, "readout": "learned"},
    "baronhuman": {"n_layers": 2, "n_heads": 1, "readout": "learned"},
    "amb": {"n_layers": 2, "n_heads": 1, "readout": "learned"},
    "zheng68k": {"n_layers": 2, "n_heads": 1, "readout": "mean"},
    "zhengsorted": {"n_layers": 2, "n_heads": 1, "readout": "mean"},
}

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
GENE_KEYS = {"d_g", "n_layers", "n_heads", "width", "hidden", "readout", "scaled"}
CELL_KEYS = {"n_layers", "width", "hidden", "input_width"}
RUN_KEYS = {"matrix", "format", "labels", "artifact", "out", "run_id", "T", "s", "preset", "threads",
            "test_fraction", "k_folds", "top_n", "gene", "cell", "gene_checkpoint", "cell_checkpoint", "model"}
RUN_DEFAULTS = {"T": 1000, "s": 1e6, "preset": "default", "test_fraction": 0.0, "k_folds": 5, "top_n": 50,
                "run_id": "run", "model": "q"}


class UsageError(ValueError):
    """Bad configuration; maps to the validation exit code."""


# ------------------------------------------------------------------------ config


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - RUN_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    for key, allowed in (("gene", GENE_KEYS), ("cell", CELL_KEYS)):
        extra = set(cfg.get(key, {})) - allowed
        if extra:
            raise UsageError(f"{path}: unknown {key} keys {sorted(extra)}")
    return cfg


def effective_config(args) -> dict:
    """Defaults, then the JSON config file, then any flag given on the command line."""
    cfg = dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        if key in ("gene_layers", "gene_heads", "readout"):
            name = {"gene_layers": "n_layers", "gene_heads": "n_heads", "readout": "readout"}[key]
            cfg.setdefault("gene", {})
            cfg["gene"] = {**cfg["gene"], name: value}
            continue
        cfg[key] = value
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
    cfg["gene"] = {**PRESETS[cfg["preset"]], **cfg.get("gene", {})}
    cfg["cell"] = dict(cfg.get("cell", {}))
    if not 0 <= cfg["test_fraction"] < 1:
        raise UsageError("test_fraction must lie in [0, 1)")
    if cfg["T"] < 1 or cfg["s"] <= 0:
        raise UsageError("T must be >= 1 and s > 0")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# ---------------------------------------------------------------------- commands


def cmd_preprocess(cfg: dict) -> int:
    _require(cfg, "matrix", "out")
    mat = load_matrix(cfg["matrix"], cfg.get("format"), drop_empty_cells=False)
    mat, dropped = drop_empty_rows(mat)
    pm = preprocess(mat, cfg["T"], cfg["s"], dropped_cells=dropped)
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_artifact(pm, cfg["out"])
    print(f"kept genes: {pm.n_genes_kept}")
    print(f"dropped cells: {pm.dropped_cells}")
    return EXIT_OK


def _load_training_inputs(cfg: dict):
    _require(cfg, "artifact", "labels", "out")
    pm = read_artifact(cfg["artifact"])
    labels = load_labels(cfg["labels"], pm.cell_ids)
    if cfg["test_fraction"] > 0:
        rng = np.random.default_rng(cfg.get("seed", 0))
        held = stratified_holdout(labels.y, labels.labeled, cfg["test_fraction"], rng)
        labels = labels.hide(held)
    return pm, labels


def _manifest(cfg, tc: TrainConfig, state, pm, labels, gene, cell, problem) -> dict:
    q_logits, p_logits, _, _ = final_predictions(gene, cell, problem, tc, state)
    test = problem.test

    def acc(logits):
        if logits is None or test.size == 0:
            return None
        return float(np.mean(np.argmax(logits[test], axis=1) == problem.truth[test]))

    summary = state.summary()
    timings = summary.pop("timings")
    return {
        "run_id": cfg["run_id"],
        "config": {k: v for k, v in cfg.items() if k not in ("threads",)},
        "train_config": asdict(tc),
        "seed": tc.seed,
        "gene_digest": gene_ids_digest(pm.kept_gene_ids),
        "classes": labels.classes,
        "n_cells": pm.n_cells,
        "n_test": int(test.size),
        "p_trained": cell is not None,
        "accuracy": {"q_test": acc(q_logits), "p_test": acc(p_logits)},
        "history": summary,
        "timings": timings,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }


def _train(cfg: dict, em_iters: int | None) -> int:
    pm, labels = _load_training_inputs(cfg)
    tc = train_config({**cfg, **({"em_iters": em_iters} if em_iters is not None else {})})
    run_dir = Path(cfg["out"]) / cfg["run_id"]
    digest = gene_ids_digest(pm.kept_gene_ids)
    try:
        # class names and graph settings travel with the checkpoints for predict / analyze
        extra = {"classes": labels.classes, "k": tc.k, "metric": tc.metric}
        gene, cell, state, problem = run_em(tc, pm.values, labels, cfg["gene"], cfg["cell"], run_dir, digest, extra)
    except TrainingDivergence as exc:
        if isinstance(exc.model, GeneModel):
            run_dir.mkdir(parents=True, exist_ok=True)
            save_gene_model(exc.model, run_dir / "diverged_last_finite.ckpt", digest)
        raise
    manifest = _manifest(cfg, tc, state, pm, labels, gene, cell, problem)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    acc = manifest["accuracy"]
    print(f"run: {run_dir}")
    print(f"q test accuracy: {acc['q_test']}")
    print(f"p test accuracy: {acc['p_test']}" if cell is not None else "p: untrained (em_iters=0)")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    return _train(cfg, em_iters=0)


def cmd_train_em(cfg: dict) -> int:
    return _train(cfg, em_iters=None)


def _check_provenance(meta: dict, pm, path):
    digest = gene_ids_digest(pm.kept_gene_ids)
    if meta.get("gene_digest") and meta["gene_digest"] != digest:
        raise ValidationError(f"{path}: checkpoint was trained on a different gene set than the artifact")


def _models_for(cfg: dict, pm, need_cell: bool):
    _require(cfg, "gene_checkpoint")
    gene, gmeta = load_gene_model(cfg["gene_checkpoint"])
    _check_provenance(gmeta, pm, cfg["gene_checkpoint"])
    cell = cmeta = None
    if need_cell:
        _require(cfg, "cell_checkpoint")
        cell, cmeta = load_cell_model(cfg["cell_checkpoint"])
        _check_provenance(cmeta, pm, cfg["cell_checkpoint"])
    if gene.config.n_genes != pm.n_genes_kept:
        raise ValidationError(f"checkpoint expects {gene.config.n_genes} genes, artifact has {pm.n_genes_kept}")
    return gene, gmeta, cell, cmeta


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "artifact", "out")
    if cfg["model"] not in ("q", "p"):
        raise UsageError("--model must be q or p")
    pm = read_artifact(cfg["artifact"])
    gene, gmeta, cell, cmeta = _models_for(cfg, pm, cfg["model"] == "p")
    h, logits = gene_predict(gene, pm.values)
    meta = gmeta
    if cell is not None:
        meta = cmeta
        if cmeta.get("gene_checksum") and cmeta["gene_checksum"] != param_checksum(gene.params):
            log.warning("cell model was fit on representations from %s; %s differs",
                        cmeta.get("gene_source", "another gene checkpoint"), cfg["gene_checkpoint"])
        graph = build_knn_graph(h, cmeta.get("k", cfg.get("k", 5)), cmeta.get("metric", cfg.get("metric", "cosine")))
        logits = cell.forward(graph, pm.values, h).logits
    probs = softmax_rows(logits.astype(np.float64))
    classes = meta.get("classes") or [str(c) for c in range(probs.shape[1])]
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "predicted"] + [f"prob_{c}" for c in classes])
        for cid, row in zip(pm.cell_ids, probs):
            w.writerow([cid, classes[int(np.argmax(row))]] + [repr(float(v)) for v in row])
    print(f"wrote {len(pm.cell_ids)} predictions to {cfg['out']}")
    return EXIT_OK


def cmd_crossval(cfg: dict) -> int:
    _require(cfg, "matrix", "labels", "out")
    if cfg["k_folds"] < 2:
        raise UsageError("k_folds must be >= 2")
    mat = load_matrix(cfg["matrix"], cfg.get("format"))
    labels = load_labels(cfg["labels"], mat.cell_ids)
    tc = train_config(cfg)
    report = crossval(tc, mat, labels, cfg["k_folds"], cfg["T"], cfg["s"], cfg["gene"], cfg["cell"], cfg["top_n"])
    report.write(cfg["out"], cfg["run_id"])
    print(f"q mean accuracy: {report.q_mean:.4f}")
    print(f"p mean accuracy: {report.p_mean}")
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    _require(cfg, "artifact", "out")
    pm = read_artifact(cfg["artifact"])
    gene, gmeta, _, _ = _models_for(cfg, pm, False)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rid = cfg["run_id"]
    tc = train_config(cfg)
    k = cfg.get("k", gmeta.get("k", tc.k))
    metric = cfg.get("metric", gmeta.get("metric", tc.metric))
    report = {"run_id": rid, "k": k, "metric": metric}
    if gene.config.n_layers:
        imp = gene_importance(model_attention(gene, pm.values), pm.kept_gene_ids, cfg["top_n"])
        imp.write_csv(out / f"{rid}_top_genes.csv")
        report["top_genes"] = imp.top
    h, _ = gene_predict(gene, pm.values)
    graph = build_knn_graph(h, k, metric)
    graph.write_edges(out / f"{rid}_edges.csv", pm.cell_ids)
    if cfg.get("labels"):
        labels = load_labels(cfg["labels"], pm.cell_ids, gmeta.get("classes"))
        if np.any(labels.y < 0):
            raise ValidationError("homophily needs a label for every cell")
        raw = build_knn_graph(pm.values.toarray(), k, metric)
        report["homophily_trained"] = homophily(graph, labels.y).ratio
        report["homophily_raw"] = homophily(raw, labels.y).ratio
    (out / f"{rid}_analysis.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    for key in ("homophily_trained", "homophily_raw"):
        if key in report:
            print(f"{key}: {report[key]:.4f}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train-em": cmd_train_em,
    "predict": cmd_predict,
    "crossval": cmd_crossval,
    "analyze": cmd_analyze,
}


# ----------------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scbignn", description="Two-level graph models for cell-type classification.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--out")
        sp.add_argument("--run-id", dest="run_id")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker cap (fallback: SCBIGNN_THREADS)")
        if train:
            sp.add_argument("--preset", choices=sorted(PRESETS))
            sp.add_argument("--gene-layers", dest="gene_layers", type=int)
            sp.add_argument("--gene-heads", dest="gene_heads", type=int)
            sp.add_argument("--readout", choices=["mean", "learned"])
            sp.add_argument("--k", type=int)
            sp.add_argument("--metric", choices=["cosine", "euclidean"])
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
            sp.add_argument("--lr-gene", dest="lr_gene", type=float)
            sp.add_argument("--lr-cell", dest="lr_cell", type=float)
            sp.add_argument("--optimizer", choices=["adam", "sgd"])
            sp.add_argument("--pseudo-label", dest="pseudo_label", choices=["soft", "argmax", "sample"])
            sp.add_argument("--beta", type=float)
            sp.add_argument("--patience", type=int)

    sp = sub.add_parser("preprocess", help="normalize counts and keep the top-T variable genes")
    common(sp)
    sp.add_argument("--matrix")
    sp.add_argument("--format", choices=["mtx", "csv"])
    sp.add_argument("--T", type=int)
    sp.add_argument("--s", type=float)

    for name in ("pretrain", "train-em"):
        sp = sub.add_parser(name, help="supervised pretraining of q" if name == "pretrain" else "full EM training")
        common(sp, train=True)
        sp.add_argument("--artifact")
        sp.add_argument("--labels")
        sp.add_argument("--test-fraction", dest="test_fraction", type=float,
                        help="hide this share of labeled cells and report accuracy on them")
        if name == "train-em":
            sp.add_argument("--em-iters", dest="em_iters", type=int)

    sp = sub.add_parser("predict", help="per-cell class probabilities from q or p")
    common(sp)
    sp.add_argument("--artifact")
    sp.add_argument("--gene-checkpoint", dest="gene_checkpoint")
    sp.add_argument("--cell-checkpoint", dest="cell_checkpoint")
    sp.add_argument("--model", choices=["q", "p"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--metric", choices=["cosine", "euclidean"])

    sp = sub.add_parser("crossval", help="k-fold cross-validation of the full pipeline")
    common(sp, train=True)
    sp.add_argument("--matrix")
    sp.add_argument("--format", choices=["mtx", "csv"])
    sp.add_argument("--labels")
    sp.add_argument("--k-folds", dest="k_folds", type=int)
    sp.add_argument("--T", type=int)
    sp.add_argument("--s", type=float)
    sp.add_argument("--em-iters", dest="em_iters", type=int)
    sp.add_argument("--top-n", dest="top_n", type=int)

    sp = sub.add_parser("analyze", help="gene importance, graph export and homophily")
    common(sp)
    sp.add_argument("--artifact")
    sp.add_argument("--gene-checkpoint", dest="gene_checkpoint")
    sp.add_argument("--labels")
    sp.add_argument("--k", type=int)
    sp.add_argument("--metric", choices=["cosine", "euclidean"])
    sp.add_argument("--top-n", dest="top_n", type=int)
    return p


def _threads(cfg: dict) -> int | None:
    if cfg.get("threads"):
        return int(cfg["threads"])
    env = os.environ.get("SCBIGNN_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SCBIGNN_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        n = _threads(cfg)
        if n is not None and n < 1:
            raise UsageError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            return COMMANDS[args.command](cfg)
    except (FileNotFoundError, ParseError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, CheckpointError, UsageError, NumericsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
