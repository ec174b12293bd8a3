"""Command-line surface: gen-synth, train, index, query, eval.

Every command resolves its configuration from defaults, then an optional
JSON config file (``--config``), then explicit flags (flags win), and
echoes the resolved values into the output directory so runs are
reproducible from their artifacts alone. Exit codes: 0 success, 2 usage or
configuration error, 3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor, no_grad
from .dataio import DataRepo, Manifest, SynthConfig, gen_synthetic, load_manifest, read_tensor
from .errors import (
    DegenerateVectorError,
    DivergedTrainingError,
    EvaluationError,
    XModalError,
)
from .heads import QueryHead, embed_query
from .pairs import PairGenConfig, gen_multi_pairs, gen_single_sketch_pairs
from .pairs import gen_single_text_pairs, split_dataset
from .retrieval import (
    EvalQuery,
    build_index,
    evaluate,
    load_index,
    rank_multi,
    rank_single,
    relevant_ids,
    save_index,
)
from .trainer import Checkpoint, ModelDims, TrainConfig, init_params, load_checkpoint
from .trainer import save_checkpoint, train


class UsageError(ValueError):
    pass


def _threads() -> int:
    raw = os.environ.get("XMODAL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"XMODAL_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"XMODAL_THREADS must be >= 1, got {n}")
    return n


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, "threads": _threads(), **resolved}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# gen-synth

_GEN_DEFAULTS = {
    "seed": 0,
    "classes": 10,
    "images_per_class": 50,
    "grid_h": 7,
    "grid_w": 7,
    "channels": 512,
    "object_cells": 10,
    "sigma_image": 0.1,
    "sigma_text": 0.05,
    "sigma_sketch": 0.2,
    "multi": False,
    "text_dim": 1000,
    "sketch_dim": 4096,
    "sketches_per_class": 5,
}


def cmd_gen_synth(args: argparse.Namespace) -> int:
    _require(args, "out")
    cfg_map = _resolve(args, _GEN_DEFAULTS)
    cfg = SynthConfig(
        seed=cfg_map["seed"],
        num_classes=cfg_map["classes"],
        images_per_class=cfg_map["images_per_class"],
        grid_h=cfg_map["grid_h"],
        grid_w=cfg_map["grid_w"],
        channels=cfg_map["channels"],
        object_cells=cfg_map["object_cells"],
        noise_sigma_image=cfg_map["sigma_image"],
        noise_sigma_text=cfg_map["sigma_text"],
        noise_sigma_sketch=cfg_map["sigma_sketch"],
        multi=cfg_map["multi"],
        text_dim=cfg_map["text_dim"],
        sketch_dim=cfg_map["sketch_dim"],
        sketches_per_class=cfg_map["sketches_per_class"],
    )
    cfg.validate()
    out = Path(args.out)
    manifest_path = gen_synthetic(cfg, out)
    _echo_config(out, "gen-synth", cfg_map)
    print(manifest_path)
    return 0


# ---------------------------------------------------------------------------
# train

_TRAIN_DEFAULTS = {
    "seed": 0,
    "epochs": 20,
    "lr": 1e-3,
    "batch_size": 32,
    "margin": 0.0,
    "n_max": 2,
    "n_m": 5,
    "train_fraction": 0.8,
    "hidden_dim": 512,
    "attn_dim": 256,
    "embed_dim": 512,
    "query_hidden": 1024,
}


def _load_manifest_arg(path_str: str) -> Manifest:
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def _make_pairs(manifest: Manifest, train_items, modality: str, multi: bool,
                pg: PairGenConfig):
    if multi:
        return gen_multi_pairs(train_items, modality, pg, manifest)
    if modality == "sketch":
        return gen_single_sketch_pairs(train_items, pg)
    return gen_single_text_pairs(train_items, pg)


def _query_dim(manifest: Manifest, repo: DataRepo, modality: str) -> int:
    table = manifest.query_features.get(modality, {})
    if not table:
        raise UsageError(f"manifest has no {modality!r} query features")
    first = sorted(table)[0]
    return repo.query(modality, first).size


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "manifest", "modality", "out")
    cfg_map = _resolve(args, _TRAIN_DEFAULTS)
    manifest = _load_manifest_arg(args.manifest)
    repo = DataRepo(manifest)
    multi = bool(args.multi)
    pg = PairGenConfig(seed=cfg_map["seed"], n_m=cfg_map["n_m"],
                       train_fraction=cfg_map["train_fraction"])
    train_items, test_items = split_dataset(manifest.items, pg)
    pairs = _make_pairs(manifest, train_items, args.modality, multi, pg)

    dims = ModelDims(
        channels=manifest.channels,
        query_dim=_query_dim(manifest, repo, args.modality),
        hidden_dim=cfg_map["hidden_dim"],
        attn_dim=cfg_map["attn_dim"],
        embed_dim=cfg_map["embed_dim"],
        query_hidden=cfg_map["query_hidden"],
    )
    tc = TrainConfig(lr=cfg_map["lr"], epochs=cfg_map["epochs"],
                     batch_size=cfg_map["batch_size"], margin=cfg_map["margin"],
                     seed=cfg_map["seed"], n_max=cfg_map["n_max"])
    store = init_params(dims, cfg_map["seed"])
    store, curve = train(pairs, store, tc, repo)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cp = Checkpoint(store=store, dims=dims, config=tc, modality=args.modality,
                    epoch=tc.epochs, loss_history=curve)
    save_checkpoint(cp, out / "checkpoint.xmn")
    lines = ["epoch,mean_loss"]
    lines += [f"{i},{loss!r}" for i, loss in enumerate(curve, start=1)]
    (out / "loss_curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    split_doc = {"train": sorted(it.id for it in train_items),
                 "test": sorted(it.id for it in test_items)}
    (out / "split.json").write_text(json.dumps(split_doc, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    _echo_config(out, "train", {**cfg_map, "manifest": str(args.manifest),
                                "modality": args.modality, "multi": multi})
    print(out / "checkpoint.xmn")
    return 0


# ---------------------------------------------------------------------------
# index

def _subset_items(manifest: Manifest, split_path, subset: str):
    if split_path is None:
        if subset != "all":
            raise UsageError("--subset needs --split")
        return list(manifest.items)
    doc = json.loads(Path(split_path).read_text(encoding="utf-8"))
    if subset == "all":
        wanted = set(doc["train"]) | set(doc["test"])
    else:
        wanted = set(doc[subset])
    return [it for it in manifest.items if it.id in wanted]


def cmd_index(args: argparse.Namespace) -> int:
    _require(args, "manifest", "checkpoint", "out")
    manifest = _load_manifest_arg(args.manifest)
    repo = DataRepo(manifest)
    cp = load_checkpoint(args.checkpoint)
    n_max = args.n_max if args.n_max is not None else cp.config.n_max
    items = _subset_items(manifest, args.split, args.subset or "all")
    if not items:
        raise UsageError("no items selected for indexing")
    index = build_index(items, cp.store, repo, n_max=n_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_index(index, out / "index.xmn")
    _echo_config(out, "index", {
        "manifest": str(args.manifest), "checkpoint": str(args.checkpoint),
        "split": str(args.split) if args.split else None,
        "subset": args.subset or "all", "n_max": n_max,
    })
    print(out / "index.xmn")
    return 0


# ---------------------------------------------------------------------------
# query

def _load_query_vectors(paths, embedded: bool, cp: Checkpoint):
    vectors = []
    for path in paths:
        arr = read_tensor(path).reshape(-1)
        if embedded:
            norm = float(np.linalg.norm(arr))
            if norm < np.finfo(np.float64).tiny:
                raise DegenerateVectorError(f"query file {path} holds a zero vector")
            vectors.append(arr / norm)
        else:
            head = QueryHead(cp.store)
            with no_grad():
                vectors.append(embed_query(Tensor(arr), head).data)
    return vectors


def cmd_query(args: argparse.Namespace) -> int:
    _require(args, "index", "checkpoint", "query_file")
    index = load_index(args.index)
    cp = load_checkpoint(args.checkpoint)
    if len(args.query_file) > index.n_max:
        raise UsageError(
            f"{len(args.query_file)} query files exceed the index's n_max={index.n_max}")
    vectors = _load_query_vectors(args.query_file, bool(args.embedded), cp)
    if len(vectors) == 1:
        ranked = rank_single(vectors[0], index)
    else:
        ranked = rank_multi(vectors, index)
    top_k = args.top_k if args.top_k is not None else 10
    for item_id, dist in ranked[:top_k]:
        print(f"{item_id} {dist:.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _protocol_queries(manifest: Manifest, repo: DataRepo, cp: Checkpoint,
                      index, multi: bool) -> list[EvalQuery]:
    """Evaluation queries for the standard protocol.

    Single object: text gets one query per class, sketch one query per
    pool entry. Multi object: text pairs both class labels; sketch pairs
    pool entries of the two classes by draw position.
    """
    head = QueryHead(cp.store)
    modality = cp.modality

    def embed(key: str) -> np.ndarray:
        with no_grad():
            return embed_query(Tensor(repo.query(modality, key)), head).data

    queries: list[EvalQuery] = []
    if not multi:
        if modality == "text":
            for label in manifest.classes:
                rel = relevant_ids(index, [label])
                if label in manifest.query_features.get("text", {}):
                    queries.append(EvalQuery(label, [embed(label)], rel))
        else:
            pools = manifest.sketch_pools()
            for label in sorted(pools):
                rel = relevant_ids(index, [label])
                for key in pools[label]:
                    queries.append(EvalQuery(key, [embed(key)], rel))
    else:
        combos = sorted({tuple(sorted(e.class_labels)) for e in index.entries})
        pools = manifest.sketch_pools() if modality == "sketch" else {}
        for pair in combos:
            if len(pair) != 2:
                continue
            rel = relevant_ids(index, pair)
            if modality == "text":
                queries.append(EvalQuery("+".join(pair),
                                         [embed(pair[0]), embed(pair[1])], rel))
            else:
                pool_a, pool_b = pools.get(pair[0], []), pools.get(pair[1], [])
                for j in range(min(len(pool_a), len(pool_b))):
                    queries.append(EvalQuery(f"{'+'.join(pair)}#{j}",
                                             [embed(pool_a[j]), embed(pool_b[j])], rel))
    return queries


def _embedded_queries(queries_dir, index) -> list[EvalQuery]:
    """One query per *.xmt file; the stem names the relevant label set as
    ``label`` or ``labelA+labelB`` with an optional ``__suffix``."""
    files = sorted(Path(queries_dir).glob("*.xmt"))
    if not files:
        raise UsageError(f"no .xmt query files in {queries_dir}")
    queries = []
    for path in files:
        labels = path.stem.split("__", 1)[0].split("+")
        arr = read_tensor(path)
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        embs = []
        for row in rows:
            norm = float(np.linalg.norm(row))
            if norm < np.finfo(np.float64).tiny:
                raise DegenerateVectorError(f"query file {path} holds a zero vector")
            embs.append(row / norm)
        queries.append(EvalQuery(path.stem, embs, relevant_ids(index, labels)))
    return queries


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "index", "out")
    index = load_index(args.index)
    if args.queries_dir is not None:
        if not args.embedded:
            raise UsageError("--queries-dir requires --embedded")
        queries = _embedded_queries(args.queries_dir, index)
        meta = {"index": str(args.index), "queries_dir": str(args.queries_dir),
                "embedded": True}
    else:
        _require(args, "checkpoint", "manifest")
        manifest = _load_manifest_arg(args.manifest)
        repo = DataRepo(manifest)
        cp = load_checkpoint(args.checkpoint)
        if args.multi is None:
            multi = all(len(e.class_labels) == 2 for e in index.entries)
        else:
            multi = bool(args.multi)
        queries = _protocol_queries(manifest, repo, cp, index, multi)
        meta = {"index": str(args.index), "checkpoint": str(args.checkpoint),
                "manifest": str(args.manifest), "multi": multi, "embedded": False}
    if not queries:
        raise UsageError("evaluation produced no queries")
    report = evaluate(queries, index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    _echo_config(out, "eval", meta)
    print(f"mAP {report.map:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmodal")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON file supplying flag defaults")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-synth", help="materialize a synthetic dataset")
    common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--images-per-class", type=int, dest="images_per_class")
    p.add_argument("--grid-h", type=int, dest="grid_h")
    p.add_argument("--grid-w", type=int, dest="grid_w")
    p.add_argument("--channels", type=int)
    p.add_argument("--object-cells", type=int, dest="object_cells")
    p.add_argument("--sigma-image", type=float, dest="sigma_image")
    p.add_argument("--sigma-text", type=float, dest="sigma_text")
    p.add_argument("--sigma-sketch", type=float, dest="sigma_sketch")
    p.add_argument("--multi", action="store_true", default=None)
    p.add_argument("--text-dim", type=int, dest="text_dim")
    p.add_argument("--sketch-dim", type=int, dest="sketch_dim")
    p.add_argument("--sketches-per-class", type=int, dest="sketches_per_class")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one modality on a dataset")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--modality", choices=("text", "sketch"))
    p.add_argument("--multi", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--margin", type=float)
    p.add_argument("--n-max", type=int, dest="n_max")
    p.add_argument("--n-m", type=int, dest="n_m")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--attn-dim", type=int, dest="attn_dim")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--query-hidden", type=int, dest="query_hidden")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="embed items into a retrieval index")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--split", help="split.json written by train")
    p.add_argument("--subset", choices=("train", "test", "all"))
    p.add_argument("--n-max", type=int, dest="n_max")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank the index for ad-hoc queries")
    common(p)
    p.add_argument("--index")
    p.add_argument("--checkpoint")
    p.add_argument("--query-file", action="append", dest="query_file",
                   help="raw query feature file; repeat for multi-object")
    p.add_argument("--embedded", action="store_true", default=None,
                   help="query files already hold embedding-space vectors")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mAP evaluation of an index")
    common(p)
    p.add_argument("--index")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--multi", action="store_true", default=None)
    p.add_argument("--queries-dir", dest="queries_dir",
                   help="directory of embedded query files (needs --embedded)")
    p.add_argument("--embedded", action="store_true", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DivergedTrainingError, EvaluationError, DegenerateVectorError,
            ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (UsageError, FileNotFoundError, ValueError, XModalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
