"""Type and value vocabularies with PAD / UNK / EMPTY sentinels."""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .corpus import EMPTY, PAD, UNK, NodeLabel
from .errors import ConfigError, EmptyCorpusError

SPECIALS = (PAD, UNK, EMPTY)
DEFAULT_VALUE_VOCAB_SIZE = 50_000
VOCAB_FORMAT = 1


@dataclass(frozen=True)
class Vocab:
    """Immutable bidirectional token/id map.

    Ids 0, 1, 2 are always PAD, UNK and EMPTY.
    """

    tokens: tuple[str, ...]
    k: Optional[int] = None
    corpus_fingerprint: Optional[str] = None
    id_of: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise ConfigError("vocabulary must start with PAD, UNK, EMPTY")
        id_of = {t: i for i, t in enumerate(tokens)}
        if len(id_of) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "id_of", id_of)

    @property
    def token_of(self) -> tuple[str, ...]:
        return self.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def empty_id(self) -> int:
        return 2

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": 0, "UNK": 1, "EMPTY": 2}

    def encode(self, token: str) -> int:
        return self.id_of.get(token, 1)

    def decode(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"id {idx} out of range for vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode_many(self, tokens: Iterable[str]) -> list[int]:
        get = self.id_of.get
        return [get(t, 1) for t in tokens]

    @property
    def fingerprint(self) -> str:
        payload = json.dumps({"tokens": list(self.tokens), "k": self.k}, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": VOCAB_FORMAT,
                "tokens": list(self.tokens),
                "specials": self.specials,
                "k": self.k,
                "corpus_fingerprint": self.corpus_fingerprint,
                "fingerprint": self.fingerprint,
            },
            indent=1,
            ensure_ascii=False,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        data = json.loads(text)
        vocab = cls(tuple(data["tokens"]), data.get("k"), data.get("corpus_fingerprint"))
        stored = data.get("fingerprint")
        if stored is not None and stored != vocab.fingerprint:
            raise ConfigError("vocabulary file fingerprint does not match its contents")
        return vocab

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(os.fspath(path), encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def count_types(corpus: Iterable[Sequence[NodeLabel]]) -> Counter:
    counts: Counter = Counter()
    for program in corpus:
        counts.update(lbl.type for lbl in program)
    return counts


def count_values(corpus: Iterable[Sequence[NodeLabel]]) -> Counter:
    counts: Counter = Counter()
    for program in corpus:
        counts.update(lbl.value for lbl in program)
    return counts


def build_type_vocab(corpus=None, *, counts: Optional[Counter] = None, corpus_fingerprint=None) -> Vocab:
    """Every distinct type, sorted, after the specials."""
    if counts is None:
        counts = count_types(corpus or ())
    types = sorted(t for t in counts if t not in SPECIALS)
    if not types:
        raise EmptyCorpusError("cannot build a type vocabulary from an empty corpus")
    return Vocab(SPECIALS + tuple(types), None, corpus_fingerprint)


def top_k_values(counts: Mapping[str, int], k: int) -> list[str]:
    """The ``k`` most frequent values; ties go to the lexicographically smaller."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [v for v, _ in ranked[:k]]


def build_value_vocab(corpus=None, k: int = DEFAULT_VALUE_VOCAB_SIZE, *, counts: Optional[Counter] = None,
                      corpus_fingerprint=None) -> Vocab:
    """Top-``k`` values by frequency.

    EMPTY competes for a slot like any other value; it keeps its reserved id
    either way. PAD and UNK never count against ``k``.
    """
    if k < 1:
        raise ConfigError("value vocabulary size k must be >= 1")
    if counts is None:
        counts = count_values(corpus or ())
    counts = {v: c for v, c in counts.items() if v not in (PAD, UNK)}
    kept = [v for v in top_k_values(counts, k) if v != EMPTY]
    return Vocab(SPECIALS + tuple(kept), k, corpus_fingerprint)


def unk_rate(vocab: Vocab, values: Iterable[str]) -> float:
    """Fraction of ``values`` that fall outside ``vocab``."""
    total = unk = 0
    for v in values:
        total += 1
        if vocab.encode(v) == vocab.unk_id:
            unk += 1
    return unk / total if total else 0.0
