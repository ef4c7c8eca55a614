"""Command line: ``astcomplete {preprocess,train,eval,complete}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import PAD, NodeLabel, flatten, iter_ast_file, list_ast_files, parse_ast_json
from .errors import (ConfigError, DivergenceError, DomainError, EmptyCorpusError, ParseError,
                     ShapeError, StructureError)
from .evaluation import Baseline, build_report
from .model import ModelConfig, load_checkpoint
from .shards import MANIFEST_FILE, SHARD_FILE, build_shard, load_shard, write_shard
from .training import TrainConfig, predict_shard, train, trained_tasks
from .vocab import (DEFAULT_VALUE_VOCAB_SIZE, Vocab, build_type_vocab, build_value_vocab, count_types,
                    count_values, unk_rate)

log = logging.getLogger("astcomplete")

CONFIG_DIR_ENV = "ASTCOMPLETE_CONFIG_DIR"
RUN_MANIFEST = "run_manifest.json"
TYPE_VOCAB_FILE = "type_vocab.json"
VALUE_VOCAB_FILE = "value_vocab.json"
ABLATIONS = {"no-mtl": "use_mtl", "no-path": "use_path", "no-recurrence": "use_recurrence"}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprints(paths) -> dict:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full) and name != RUN_MANIFEST:
                    out[full] = file_sha256(full)
        elif os.path.isfile(p):
            out[p] = file_sha256(p)
    return out


def write_run_manifest(run_dir, subcommand: str, *, argv: Sequence[str], inputs: Sequence[str],
                       outputs: Sequence[str], config_paths: Sequence[str] = (), seed=None,
                       started_at: str, extra: Optional[dict] = None) -> dict:
    """Record what a subcommand read and wrote, with content hashes of both."""
    manifest = {
        "subcommand": subcommand,
        "argv": list(argv),
        "config_paths": list(config_paths),
        "inputs": list(inputs),
        "outputs": list(outputs),
        "seed": seed,
        "started_at": started_at,
        "finished_at": _now(),
        "input_fingerprints": _fingerprints(inputs),
        "output_fingerprints": _fingerprints(outputs),
    }
    manifest.update(extra or {})
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, RUN_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


# -- preprocess ---------------------------------------------------------------

def cmd_preprocess(args) -> int:
    started = _now()
    if not os.path.exists(args.input_dir):
        raise FileNotFoundError(f"input {args.input_dir} does not exist")
    files = list_ast_files(args.input_dir)
    if not files:
        raise EmptyCorpusError(f"no .json/.jsonl files under {args.input_dir}")
    trees, errors, per_file = [], [], {}
    for path in files:
        ok = bad = 0
        for res in iter_ast_file(path):
            if res.error is None:
                trees.append(res.tree)
                ok += 1
            else:
                errors.append(f"{res.path}:{res.line_no}: {res.error}")
                bad += 1
        per_file[path] = {"trees": ok, "errors": bad}
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if errors and args.strict:
        print(f"{len(errors)} malformed line(s); aborting (--strict)", file=sys.stderr)
        return EXIT_DATA
    if not trees:
        raise EmptyCorpusError("no parseable trees in the input")

    flat = [flatten(t) for t in trees]
    if args.vocab_from:
        type_vocab = Vocab.load(os.path.join(args.vocab_from, TYPE_VOCAB_FILE))
        value_vocab = Vocab.load(os.path.join(args.vocab_from, VALUE_VOCAB_FILE))
    else:
        corpus_fp = hashlib.sha256("".join(file_sha256(f) for f in files).encode()).hexdigest()[:16]
        type_vocab = build_type_vocab(counts=count_types(flat), corpus_fingerprint=corpus_fp)
        value_vocab = build_value_vocab(counts=count_values(flat), k=args.k, corpus_fingerprint=corpus_fp)
    unseen_types = Counter(l.type for prog in flat for l in prog if l.type not in type_vocab)
    if unseen_types:
        log.warning("%d node(s) have types outside the type vocabulary; encoded as UNK",
                    sum(unseen_types.values()))
    shard = build_shard(trees, type_vocab, value_vocab, args.m)
    node_counts = [len(p) for p in flat]
    stats = {
        "files": per_file,
        "malformed_lines": len(errors),
        "total_nodes": sum(node_counts),
        "avg_nodes": sum(node_counts) / len(node_counts),
        "max_nodes": max(node_counts),
        "type_vocab_size": type_vocab.size,
        "value_vocab_size": value_vocab.size,
        "k": value_vocab.k,
        "value_unk_rate": unk_rate(value_vocab, (l.value for prog in flat for l in prog)),
        "unseen_type_nodes": sum(unseen_types.values()),
    }
    os.makedirs(args.out, exist_ok=True)
    write_shard(args.out, shard, manifest_extra={"stats": stats})
    type_vocab.save(os.path.join(args.out, TYPE_VOCAB_FILE))
    value_vocab.save(os.path.join(args.out, VALUE_VOCAB_FILE))
    outputs = [os.path.join(args.out, n) for n in (SHARD_FILE, MANIFEST_FILE, TYPE_VOCAB_FILE, VALUE_VOCAB_FILE)]
    write_run_manifest(args.out, "preprocess", argv=args.argv, inputs=files, outputs=outputs,
                       config_paths=[args.vocab_from] if args.vocab_from else [], started_at=started,
                       extra={"k": args.k, "m": args.m})
    print(json.dumps({"programs": len(shard), **{k: v for k, v in stats.items() if k != "files"}}, indent=1))
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _resolve_config(path: Optional[str]) -> Optional[str]:
    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if path is None:
        if config_dir and os.path.isfile(os.path.join(config_dir, "train.json")):
            return os.path.join(config_dir, "train.json")
        return None
    if os.path.isfile(path):
        return path
    if config_dir and os.path.isfile(os.path.join(config_dir, path)):
        return os.path.join(config_dir, path)
    raise FileNotFoundError(f"config {path} not found (also looked in ${CONFIG_DIR_ENV})")


def load_run_config(path: Optional[str], type_vocab_size: int, value_vocab_size: int,
                    m: int) -> tuple[ModelConfig, TrainConfig]:
    """``{"model": {...}, "train": {...}}``; ``model.preset`` may be "mini" or "full"."""
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    unknown = set(data) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    model_section = dict(data.get("model", {}))
    preset = model_section.pop("preset", "full")
    model_section.setdefault("path_len", m)
    if preset == "mini":
        mc = ModelConfig.mini(type_vocab_size, value_vocab_size, **model_section)
    elif preset == "full":
        mc = ModelConfig.from_dict({"type_vocab_size": type_vocab_size,
                                    "value_vocab_size": value_vocab_size, **model_section})
    else:
        raise ConfigError(f"unknown model preset {preset!r}")
    return mc, TrainConfig.from_dict(data.get("train", {}))


def _load_shard_with_vocabs(shard_dir):
    if not os.path.isdir(shard_dir) or not os.path.exists(os.path.join(shard_dir, MANIFEST_FILE)):
        raise FileNotFoundError(f"shard directory {shard_dir} not found")
    shard = load_shard(shard_dir)
    type_vocab = Vocab.load(os.path.join(shard_dir, TYPE_VOCAB_FILE))
    value_vocab = Vocab.load(os.path.join(shard_dir, VALUE_VOCAB_FILE))
    shard.check_vocab(type_vocab, value_vocab)
    return shard, type_vocab, value_vocab


def cmd_train(args) -> int:
    started = _now()
    shard, type_vocab, value_vocab = _load_shard_with_vocabs(args.shard)
    valid = None
    if args.valid:
        valid, _, _ = _load_shard_with_vocabs(args.valid)
        valid.check_vocab(type_vocab, value_vocab)
    config_path = _resolve_config(args.config)
    mc, tc = load_run_config(config_path, type_vocab.size, value_vocab.size, shard.m)
    if args.alpha is not None:
        mc = replace(mc, alpha=tuple(args.alpha))
    overrides = {ABLATIONS[a]: False for a in args.ablate or ()}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
        mc = replace(mc, seed=args.seed)
    tc = replace(tc, **overrides)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = train(mc, tc, shard, valid, args.out, type_vocab=type_vocab, value_vocab=value_vocab)
    outputs = [p for p in (result.final_checkpoint, result.best_checkpoint,
                           os.path.join(args.out, "metrics.jsonl")) if p]
    inputs = [os.path.join(args.shard, n) for n in (SHARD_FILE, TYPE_VOCAB_FILE, VALUE_VOCAB_FILE)]
    if args.valid:
        inputs.append(os.path.join(args.valid, SHARD_FILE))
    write_run_manifest(args.out, "train", argv=args.argv, inputs=inputs, outputs=outputs,
                       config_paths=[config_path] if config_path else [], seed=tc.seed, started_at=started,
                       extra={"model_config": mc.to_dict(), "train_config": tc.to_dict(),
                              "vocab_fingerprints": {"type": type_vocab.fingerprint,
                                                     "value": value_vocab.fingerprint}})
    print(json.dumps(result.history[-1]))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _parse_baseline(text: str) -> Baseline:
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ConfigError(f"baseline must be NAME:TASK:ACC[:UB], got {text!r}")
    try:
        nums = [float(x) for x in parts[2:]]
    except ValueError:
        raise ConfigError(f"baseline accuracies must be numbers: {text!r}") from None
    return Baseline(parts[0], parts[1], *nums)


def _score(checkpoint_path, shard, batch_size):
    ckpt = load_checkpoint(checkpoint_path)
    shard.check_vocab(ckpt.type_vocab, ckpt.value_vocab)
    if shard.m != ckpt.model.config.path_len:
        raise ConfigError(f"shard m={shard.m} != checkpoint path_len={ckpt.model.config.path_len}")
    use_recurrence = (ckpt.train_config or {}).get("use_recurrence", True)
    tasks = trained_tasks(ckpt.model.config.alpha)
    sp = predict_shard(ckpt.model, shard, batch_size=batch_size, use_recurrence=use_recurrence, tasks=tasks)
    return ckpt, sp


def evaluate_checkpoint(checkpoint_path, shard, *, baselines=(), difficult=False, types=None,
                        compare_checkpoint=None, batch_size=16):
    """Library entry point behind ``astcomplete eval``."""
    ckpt, sp = _score(checkpoint_path, shard, batch_size)
    tasks = list(sp.predictions)
    predictions = {t: sp.flat(t)[0] for t in tasks}
    targets = {"type": np.concatenate([p.types for p in shard.programs]),
               "value": np.concatenate([p.values for p in shard.programs])}
    compare = None
    if compare_checkpoint is not None:
        _, other = _score(compare_checkpoint, shard, batch_size)
        task = "type" if "type" in sp.predictions and "type" in other.predictions else None
        if task is None:
            raise ConfigError("significance comparison needs two models trained on the type task")
        compare = (sp.per_program_accuracy(task), other.per_program_accuracy(task))
    return build_report(
        predictions, targets, ckpt.type_vocab.tokens, ckpt.value_vocab.unk_id, baselines=baselines,
        difficult=difficult, types=types, compare=compare, loss=sp.loss,
        fingerprint={"type_vocab": ckpt.type_vocab.fingerprint, "value_vocab": ckpt.value_vocab.fingerprint,
                     "shard": shard.manifest.get("shard_sha256")},
    )


def cmd_eval(args) -> int:
    started = _now()
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    if not os.path.isdir(args.shard):
        raise FileNotFoundError(f"shard directory {args.shard} not found")
    shard = load_shard(args.shard)
    baselines = [_parse_baseline(b) for b in args.baseline or ()]
    types = args.types.split(",") if args.types else None
    report = evaluate_checkpoint(args.checkpoint, shard, baselines=baselines, difficult=args.difficult_types,
                                 types=types, compare_checkpoint=args.compare_checkpoint,
                                 batch_size=args.batch_size)
    text = report.to_json()
    outputs = []
    if args.report:
        os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(args.report)
    if args.per_type_csv:
        with open(args.per_type_csv, "w", encoding="utf-8") as fh:
            fh.write(report.per_type_csv())
        outputs.append(args.per_type_csv)
    print(text)
    if args.report:
        inputs = [args.checkpoint, os.path.join(args.shard, SHARD_FILE)]
        if args.compare_checkpoint:
            inputs.append(args.compare_checkpoint)
        write_run_manifest(os.path.dirname(os.path.abspath(args.report)), "eval", argv=args.argv,
                           inputs=inputs, outputs=outputs, started_at=started)
    return EXIT_OK


# -- complete -----------------------------------------------------------------

@torch.no_grad()
def rank_completions(model, type_vocab: Vocab, value_vocab: Vocab, context: Sequence[NodeLabel],
                     path: Sequence[str], top_k: int = 5) -> list[tuple[str, str, float]]:
    """Top ``top_k`` (type, value, probability) guesses for the node after ``context``.

    ``path`` lists the ancestor types of the node being predicted, parent
    first. Joint probabilities are products of the two heads; ties are
    broken by vocabulary order so the ranking is deterministic.
    """
    cfg = model.config
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    if len(path) > cfg.path_len:
        raise ShapeError(f"path has {len(path)} entries, the model uses at most {cfg.path_len}")
    if set(trained_tasks(cfg.alpha)) != {"type", "value"}:
        raise ConfigError("completion needs a model trained on both tasks")
    model.eval()
    if context:
        types = torch.tensor([type_vocab.encode(l.type) for l in context])[None]
        values = torch.tensor([value_vocab.encode(l.value) for l in context])[None]
        memory = None
        for s in range(0, types.shape[1], cfg.segment_len):
            hidden, memory = model.encode(types[:, s:s + cfg.segment_len], values[:, s:s + cfg.segment_len], memory)
        h = hidden[:, -1]
    else:
        h = model.initial_hidden[None]
    path_ids = torch.tensor([type_vocab.encode_many(list(path) + [PAD] * (cfg.path_len - len(path)))])
    logits = model.predict(h, model.path_vectors(path_ids))
    p_type = torch.softmax(logits["type"][0].double(), -1).numpy()
    p_value = torch.softmax(logits["value"][0].double(), -1).numpy()
    joint = np.outer(p_type, p_value).ravel()
    k = min(top_k, joint.size)
    cand = np.argpartition(-joint, k - 1)[:k] if k < joint.size else np.arange(joint.size)
    cand = cand[np.lexsort((cand, -joint[cand]))][:k]
    n_values = len(p_value)
    return [(type_vocab.decode(int(i) // n_values), value_vocab.decode(int(i) % n_values), float(joint[i]))
            for i in cand]


def _read_query(ast_text: str, path_text: Optional[str], type_vocab: Vocab):
    if ast_text.strip() == "[]":
        context = []
    else:
        context = flatten(parse_ast_json(ast_text))
    path = []
    if path_text:
        try:
            path = json.loads(path_text) if isinstance(path_text, str) else path_text
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed path JSON: {exc.msg}") from None
        if not isinstance(path, list) or not all(isinstance(p, str) for p in path):
            raise ParseError("path must be a JSON array of type names")
    unseen = sorted({l.type for l in context if l.type not in type_vocab} | {p for p in path if p not in type_vocab})
    if unseen:
        log.warning("types not in the vocabulary, encoded as UNK: %s", ", ".join(unseen))
    return context, path


def _arg_text(value: str) -> str:
    if value.startswith("@"):
        with open(value[1:], encoding="utf-8") as fh:
            return fh.read()
    return value


def cmd_complete(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.repl:
        for line in sys.stdin:
            if not line.strip():
                continue
            try:
                req = json.loads(line)
                ast = req.get("ast", [])
                ast_text = ast if isinstance(ast, str) else json.dumps(ast)
                context, path = _read_query(ast_text, req.get("path"), ckpt.type_vocab)
                ranked = rank_completions(ckpt.model, ckpt.type_vocab, ckpt.value_vocab, context, path,
                                          req.get("top_k", args.top_k))
                out = {"suggestions": [{"type": t, "value": v, "probability": p} for t, v, p in ranked]}
            except (json.JSONDecodeError, AttributeError):
                out = {"error": "each line must be a JSON object with 'ast' and optional 'path'"}
            except (ParseError, StructureError, ShapeError, ConfigError) as exc:
                out = {"error": str(exc)}
            print(json.dumps(out), flush=True)
        return EXIT_OK
    if args.ast is None:
        raise UsageError("--ast is required unless --repl is given")
    context, path = _read_query(_arg_text(args.ast), _arg_text(args.path) if args.path else None,
                                ckpt.type_vocab)
    for t, v, p in rank_completions(ckpt.model, ckpt.type_vocab, ckpt.value_vocab, context, path, args.top_k):
        print(f"{t}\t{v}\t{p:.6f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="astcomplete", description="Next-node completion over serialized ASTs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="parse, flatten and encode a corpus into a shard")
    p.add_argument("input_dir")
    p.add_argument("--out", required=True, help="output directory for shard and vocabularies")
    p.add_argument("--k", type=int, default=DEFAULT_VALUE_VOCAB_SIZE, help="value vocabulary size")
    p.add_argument("--m", type=int, default=5, help="path-to-root length")
    p.add_argument("--vocab-from", help="reuse the vocabularies of an existing shard directory")
    p.add_argument("--strict", action="store_true", help="fail on any malformed line")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a shard")
    p.add_argument("--shard", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help=f'JSON with "model" and "train" sections (also looked up in ${CONFIG_DIR_ENV})')
    p.add_argument("--alpha", type=float, nargs=2, metavar=("TYPE", "VALUE"), help="loss weights")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a shard")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shard", required=True)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--baseline", action="append", metavar="NAME:TASK:ACC[:UB]")
    p.add_argument("--difficult-types", action="store_true")
    p.add_argument("--types", help="comma-separated type names for the per-type table")
    p.add_argument("--per-type-csv")
    p.add_argument("--compare-checkpoint", help="second model for the rank-sum test and Cliff's delta")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("complete", help="rank next-node suggestions for a partial AST")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ast", help="partial AST as JSON (or @file)")
    p.add_argument("--path", help="ancestor types of the next node, parent first, as JSON (or @file)")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--repl", action="store_true", help='read {"ast": ..., "path": ...} lines from stdin')
    p.set_defaults(func=cmd_complete)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        return args.func(args)
    except UsageError as exc:
        print(f"astcomplete: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError) as exc:
        print(f"astcomplete: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, StructureError, EmptyCorpusError, ShapeError, DomainError, KeyError) as exc:
        print(f"astcomplete: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"astcomplete: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
