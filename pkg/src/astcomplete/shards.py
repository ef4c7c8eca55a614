"""Encoded query shards.

A shard directory holds ``shard.jsonl`` (one encoded program per line: type
ids, value ids and the path ids of every position) and ``manifest.json``
with node counts, per-file offsets and the vocabulary fingerprints the ids
refer to.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .corpus import AstTree, flatten_with_paths
from .errors import ConfigError
from .vocab import Vocab

SHARD_FORMAT = 1
SHARD_FILE = "shard.jsonl"
MANIFEST_FILE = "manifest.json"


class EncodedProgram(NamedTuple):
    types: np.ndarray   # (n,)
    values: np.ndarray  # (n,)
    paths: np.ndarray   # (n, m)

    def __len__(self):
        return len(self.types)


def encode_tree(tree: AstTree, type_vocab: Vocab, value_vocab: Vocab, m: int) -> EncodedProgram:
    labels, paths = flatten_with_paths(tree, m)
    types = np.array(type_vocab.encode_many(l.type for l in labels), dtype=np.int64)
    values = np.array(value_vocab.encode_many(l.value for l in labels), dtype=np.int64)
    path_ids = np.array([type_vocab.encode_many(p.ids) for p in paths], dtype=np.int64).reshape(len(labels), m)
    return EncodedProgram(types, values, path_ids)


@dataclass
class Shard:
    programs: list[EncodedProgram]
    m: int
    type_fingerprint: str
    value_fingerprint: str
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.programs)

    @property
    def total_nodes(self) -> int:
        return sum(len(p) for p in self.programs)

    def check_vocab(self, type_vocab: Optional[Vocab] = None, value_vocab: Optional[Vocab] = None,
                    *, type_fingerprint=None, value_fingerprint=None) -> None:
        tf = type_vocab.fingerprint if type_vocab is not None else type_fingerprint
        vf = value_vocab.fingerprint if value_vocab is not None else value_fingerprint
        if tf is not None and tf != self.type_fingerprint:
            raise ConfigError(f"shard type vocabulary {self.type_fingerprint} != expected {tf}")
        if vf is not None and vf != self.value_fingerprint:
            raise ConfigError(f"shard value vocabulary {self.value_fingerprint} != expected {vf}")


def build_shard(trees: Iterable[AstTree], type_vocab: Vocab, value_vocab: Vocab, m: int) -> Shard:
    programs = [encode_tree(t, type_vocab, value_vocab, m) for t in trees]
    return Shard(programs, m, type_vocab.fingerprint, value_vocab.fingerprint)


def write_shard(out_dir, shard: Shard, manifest_extra: Optional[dict] = None) -> dict:
    """Write ``shard`` under ``out_dir`` and return the manifest written."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    digest = hashlib.sha256()
    with open(os.path.join(out_dir, SHARD_FILE), "w", encoding="utf-8") as fh:
        for p in shard.programs:
            line = json.dumps(
                {"types": p.types.tolist(), "values": p.values.tolist(), "paths": p.paths.tolist()},
                separators=(",", ":"),
            )
            digest.update(line.encode("utf-8"))
            fh.write(line + "\n")
    total = shard.total_nodes
    manifest = {
        "format": SHARD_FORMAT,
        "m": shard.m,
        "programs": len(shard),
        "total_nodes": total,
        "avg_nodes": total / len(shard) if len(shard) else 0.0,
        "type_vocab_fingerprint": shard.type_fingerprint,
        "value_vocab_fingerprint": shard.value_fingerprint,
        "shard_sha256": digest.hexdigest(),
    }
    manifest.update(manifest_extra or {})
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    shard.manifest = manifest
    return manifest


def load_shard(shard_dir) -> Shard:
    shard_dir = os.fspath(shard_dir)
    manifest_path = os.path.join(shard_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no {MANIFEST_FILE} in {shard_dir}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != SHARD_FORMAT:
        raise ConfigError(f"unsupported shard format {manifest.get('format')!r}")
    m = manifest["m"]
    programs = []
    with open(os.path.join(shard_dir, SHARD_FILE), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            programs.append(EncodedProgram(
                np.asarray(d["types"], dtype=np.int64),
                np.asarray(d["values"], dtype=np.int64),
                np.asarray(d["paths"], dtype=np.int64).reshape(len(d["types"]), m),
            ))
    if len(programs) != manifest["programs"]:
        raise ConfigError(f"manifest lists {manifest['programs']} programs, shard has {len(programs)}")
    return Shard(programs, m, manifest["type_vocab_fingerprint"], manifest["value_vocab_fingerprint"], manifest)
