"""Segment-recurrent self-attention encoder, path2root encoder and task heads.

Shapes are batch-first throughout: ``(batch, time, features)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

TASKS = ("type", "value")
CHECKPOINT_FORMAT = 1


def check_alpha(alpha: Sequence[float]) -> tuple[float, float]:
    """Validate task loss weights: nonnegative, summing to one."""
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) != len(TASKS):
        raise ConfigError(f"expected {len(TASKS)} loss weights, got {len(alpha)}")
    if any(not math.isfinite(a) or a < 0 for a in alpha):
        raise ConfigError(f"loss weights must be nonnegative, got {alpha}")
    if abs(sum(alpha) - 1.0) > 1e-9:
        raise ConfigError(f"loss weights must sum to 1, got {alpha} (sum {sum(alpha)})")
    return alpha


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-scale reference values; use :meth:`mini` for
    desk-scale runs. ``d_model`` (the node vector and hidden width) is
    ``d_type + d_value``. ``path_dim`` is the concatenated bidirectional
    path vector, so each direction has ``path_dim // 2`` units.
    """

    type_vocab_size: int
    value_vocab_size: int
    d_type: int = 300
    d_value: int = 1200
    n_layers: int = 6
    n_heads: int = 6
    d_head: int = 64
    d_ff: int = 1024
    segment_len: int = 50
    mem_len: int = 256
    path_len: int = 5
    path_dim: int = 300
    alpha: tuple[float, float] = (0.5, 0.5)
    dropout: float = 0.1
    dropatt: float = 0.0
    use_path: bool = True
    init: str = "uniform_fan_in"
    seed: int = 0

    def __post_init__(self):
        self.alpha = tuple(self.alpha)
        self.validate()

    @property
    def d_model(self) -> int:
        return self.d_type + self.d_value

    def validate(self) -> None:
        for name in ("type_vocab_size", "value_vocab_size", "d_type", "d_value", "n_layers",
                     "n_heads", "d_head", "d_ff", "segment_len", "path_len", "path_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mem_len < 0:
            raise ConfigError("mem_len must be >= 0")
        if self.path_dim % 2:
            raise ConfigError(f"path_dim must be even, got {self.path_dim}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.dropatt < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.init != "uniform_fan_in":
            raise ConfigError(f"unknown init scheme {self.init!r}")
        check_alpha(self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def mini(cls, type_vocab_size: int, value_vocab_size: int, **overrides) -> "ModelConfig":
        """A configuration that trains in seconds on one CPU."""
        base = dict(d_type=16, d_value=48, n_layers=2, n_heads=2, d_head=16, d_ff=128,
                    segment_len=16, mem_len=64, path_len=8, path_dim=32, dropout=0.0)
        base.update(overrides)
        return cls(type_vocab_size, value_vocab_size, **base)


@dataclass
class MemoryState:
    """Cached per-layer encoder inputs from earlier segments.

    ``layers[n]`` holds the inputs of layer ``n`` for the last ``length``
    positions, shape ``(batch, length, d_model)``. ``valid`` marks which
    cached positions may be attended to; rows are invalidated on program
    boundaries instead of being physically dropped.
    """

    layers: list[Tensor]
    valid: Tensor
    segments: int = 0

    @classmethod
    def empty(cls, batch_size: int, n_layers: int, d_model: int, *, dtype=torch.float32, device=None):
        z = torch.zeros(batch_size, 0, d_model, dtype=dtype, device=device)
        return cls([z] * n_layers, torch.zeros(batch_size, 0, dtype=torch.bool, device=device), 0)

    @property
    def length(self) -> int:
        return self.valid.shape[1]

    @property
    def batch_size(self) -> int:
        return self.valid.shape[0]

    def reset(self, rows: Tensor) -> "MemoryState":
        """Forget everything cached for rows where ``rows`` is true."""
        if not bool(rows.any()) or self.length == 0:
            return self
        keep = ~rows.to(self.valid.device)
        return MemoryState(
            [layer * keep[:, None, None].to(layer.dtype) for layer in self.layers],
            self.valid & keep[:, None],
            self.segments,
        )


class PredictionDistribution(NamedTuple):
    type_probs: Tensor
    value_probs: Tensor


def sinusoid_table(n_positions: int, dim: int, *, dtype=torch.float32, device=None) -> Tensor:
    """Sinusoidal embeddings for offsets ``0 .. n_positions-1``."""
    half = (dim + 1) // 2
    inv_freq = 1.0 / (10000 ** (torch.arange(0, half, dtype=torch.float64, device=device) / half))
    pos = torch.arange(n_positions, dtype=torch.float64, device=device)
    angles = pos[:, None] * inv_freq[None, :]
    table = torch.cat([angles.sin(), angles.cos()], dim=-1)[:, :dim]
    return table.to(dtype)


class RelativeMultiHeadAttention(nn.Module):
    """Multi-head attention with content and relative-offset score terms.

    Score for query ``i`` and key ``j`` is
    ``(q_i + u) . k_j + (q_i + v) . W_r R[offset(i, j)]`` with learned global
    biases ``u`` and ``v`` and sinusoidal ``R``, so it depends on the
    query-key distance only and stays consistent when cached states are
    reused with a shifted absolute position.
    """

    def __init__(self, d_model: int, n_heads: int, d_head: int, dropatt: float = 0.0):
        super().__init__()
        self.n_heads, self.d_head = n_heads, d_head
        inner = n_heads * d_head
        self.q_proj = nn.Linear(d_model, inner, bias=False)
        self.kv_proj = nn.Linear(d_model, 2 * inner, bias=False)
        self.r_proj = nn.Linear(d_model, inner, bias=False)
        self.out_proj = nn.Linear(inner, d_model, bias=False)
        self.content_bias = nn.Parameter(torch.zeros(n_heads, d_head))
        self.position_bias = nn.Parameter(torch.zeros(n_heads, d_head))
        self.dropatt = nn.Dropout(dropatt)
        self.scale = 1.0 / math.sqrt(d_head)

    def forward(self, h: Tensor, mem: Optional[Tensor], rel_emb: Tensor, mask: Tensor) -> Tensor:
        # h: (B, T, D); mem: (B, P, D); rel_emb: (K, D) with K = P + T;
        # mask: (B, T, K), true where attention is allowed.
        bsz, qlen, _ = h.shape
        cat = h if mem is None or mem.shape[1] == 0 else torch.cat([mem, h], dim=1)
        klen = cat.shape[1]
        mlen = klen - qlen
        q = self.q_proj(h).view(bsz, qlen, self.n_heads, self.d_head)
        k, v = self.kv_proj(cat).view(bsz, klen, 2, self.n_heads, self.d_head).unbind(2)
        r = self.r_proj(rel_emb).view(klen, self.n_heads, self.d_head)

        content = torch.einsum("bind,bjnd->bnij", q + self.content_bias, k)
        by_offset = torch.einsum("bind,knd->bnik", q + self.position_bias, r)
        i = torch.arange(qlen, device=h.device)[:, None]
        j = torch.arange(klen, device=h.device)[None, :]
        offset = (mlen + i - j).clamp(min=0)
        position = by_offset.gather(-1, offset.expand(bsz, self.n_heads, qlen, klen))

        score = (content + position) * self.scale
        score = score.masked_fill(~mask[:, None, :, :], float("-inf"))
        prob = self.dropatt(torch.softmax(score, dim=-1))
        out = torch.einsum("bnij,bjnd->bind", prob, v).reshape(bsz, qlen, self.n_heads * self.d_head)
        return self.out_proj(out)


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_head, d_ff, dropout, dropatt):
        super().__init__()
        self.attn = RelativeMultiHeadAttention(d_model, n_heads, d_head, dropatt)
        self.ff = nn.Sequential(
            nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model)
        )
        self.norm_attn = nn.LayerNorm(d_model)
        self.norm_ff = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, mem, rel_emb, mask):
        h = self.norm_attn(h + self.drop(self.attn(h, mem, rel_emb, mask)))
        return self.norm_ff(h + self.drop(self.ff(h)))


class PartialAstEncoder(nn.Module):
    """Stack of relative-attention layers with cached segment memory.

    Each layer's keys and values are computed over the concatenation of the
    cached (detached) inputs of that layer and the current segment.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.d_model = config.d_model
        self.segment_len = config.segment_len
        self.mem_len = config.mem_len
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.d_head, config.d_ff,
                         config.dropout, config.dropatt)
            for _ in range(config.n_layers)
        )
        self.drop = nn.Dropout(config.dropout)
        # Test hook: with False the cache keeps its autograd history.
        self.detach_memory = True

    def empty_memory(self, batch_size: int, like: Tensor) -> MemoryState:
        return MemoryState.empty(batch_size, len(self.layers), self.d_model, dtype=like.dtype, device=like.device)

    def forward(self, x: Tensor, memory: Optional[MemoryState] = None,
                valid: Optional[Tensor] = None) -> tuple[Tensor, MemoryState]:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"expected input (batch, time, {self.d_model}), got {tuple(x.shape)}")
        bsz, qlen, _ = x.shape
        if qlen > self.segment_len:
            raise ShapeError(f"segment of length {qlen} exceeds segment_len={self.segment_len}")
        if memory is None:
            memory = self.empty_memory(bsz, x)
        if memory.batch_size != bsz or len(memory.layers) != len(self.layers):
            raise ShapeError("memory does not match batch size or layer count")
        if valid is None:
            valid = torch.ones(bsz, qlen, dtype=torch.bool, device=x.device)
        mlen = memory.length
        klen = mlen + qlen

        i = torch.arange(qlen, device=x.device)[:, None]
        j = torch.arange(klen, device=x.device)[None, :]
        causal = j <= mlen + i
        key_valid = torch.cat([memory.valid, valid], dim=1)
        # A query always sees itself so padded rows never softmax over nothing.
        mask = (key_valid[:, None, :] & causal[None]) | (j == mlen + i)[None]
        rel_emb = sinusoid_table(klen, self.d_model, dtype=x.dtype, device=x.device)

        h = self.drop(x)
        layer_inputs = []
        for layer, mem in zip(self.layers, memory.layers):
            layer_inputs.append(h)
            h = layer(h, mem, rel_emb, mask)
        h = self.drop(h)
        return h, self._update_memory(memory, layer_inputs, valid)

    def _update_memory(self, memory: MemoryState, layer_inputs: list[Tensor], valid: Tensor) -> MemoryState:
        m = self.mem_len
        if m == 0:
            return MemoryState(
                [hid[:, :0] for hid in layer_inputs], valid[:, :0], memory.segments + 1
            )
        new_layers = []
        for old, hid in zip(memory.layers, layer_inputs):
            hid = hid.detach() if self.detach_memory else hid
            new_layers.append(torch.cat([old, hid], dim=1)[:, -m:])
        new_valid = torch.cat([memory.valid, valid], dim=1)[:, -m:]
        return MemoryState(new_layers, new_valid, memory.segments + 1)


class PathEncoder(nn.Module):
    """Bidirectional LSTM over embedded ancestor types.

    Positions at or beyond a path's true length are skipped: the forward
    state stops updating, and the backward pass starts from the last real
    entry. An all-PAD path encodes to the zero vector.
    """

    def __init__(self, d_in: int, path_dim: int):
        super().__init__()
        half = path_dim // 2
        self.forward_cell = nn.LSTMCell(d_in, half)
        self.backward_cell = nn.LSTMCell(d_in, half)
        self.half = half

    def forward(self, emb: Tensor, lengths: Tensor) -> Tensor:
        n, m, _ = emb.shape
        zeros = emb.new_zeros(n, self.half)
        h_f, c_f = zeros, zeros
        for step in range(m):
            keep = (step < lengths)[:, None]
            h_new, c_new = self.forward_cell(emb[:, step], (h_f, c_f))
            h_f, c_f = torch.where(keep, h_new, h_f), torch.where(keep, c_new, c_f)
        h_b, c_b = zeros, zeros
        for step in reversed(range(m)):
            keep = (step < lengths)[:, None]
            h_new, c_new = self.backward_cell(emb[:, step], (h_b, c_b))
            h_b, c_b = torch.where(keep, h_new, h_b), torch.where(keep, c_new, c_b)
        return torch.cat([h_f, h_b], dim=-1)


class TaskHead(nn.Module):
    """tanh projection of the shared features, then a softmax classifier."""

    def __init__(self, d_in: int, d_model: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(d_in, d_model, bias=False)
        self.classifier = nn.Linear(d_model, vocab_size)

    def forward(self, features: Tensor) -> Tensor:
        return self.classifier(torch.tanh(self.proj(features)))


class CodeCompletionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.type_embedding = nn.Embedding(config.type_vocab_size, config.d_type)
        self.value_embedding = nn.Embedding(config.value_vocab_size, config.d_value)
        self.encoder = PartialAstEncoder(config)
        # Path symbols share the type embedding table.
        self.path_encoder = PathEncoder(config.d_type, config.path_dim) if config.use_path else None
        # Stands in for the encoder output when the context is empty.
        self.initial_hidden = nn.Parameter(torch.zeros(config.d_model))
        d_in = config.d_model + (config.path_dim if config.use_path else 0)
        self.heads = nn.ModuleDict({
            "type_head": TaskHead(d_in, config.d_model, config.type_vocab_size),
            "value_head": TaskHead(d_in, config.d_model, config.value_vocab_size),
        })
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Uniform(+-1/sqrt(fan_in)) for matrices, zeros for biases, unit LayerNorm gains.

        Draws from a private generator seeded with ``config.seed`` so the
        initial weights do not depend on global RNG state.
        """
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if "norm" in name:
                    p.fill_(1.0 if leaf == "weight" else 0.0)
                elif leaf.endswith("bias"):
                    p.zero_()
                elif p.dim() >= 2:
                    fan_in = p.shape[1]
                    bound = 1.0 / math.sqrt(fan_in)
                    nn.init.uniform_(p, -bound, bound, generator=gen)
                else:
                    p.zero_()

    @property
    def pad_type_id(self) -> int:
        return 0

    def embed(self, type_ids: Tensor, value_ids: Tensor) -> Tensor:
        """Node vectors: type embedding concatenated with value embedding."""
        _check_ids(type_ids, self.config.type_vocab_size, "type")
        _check_ids(value_ids, self.config.value_vocab_size, "value")
        return torch.cat([self.type_embedding(type_ids), self.value_embedding(value_ids)], dim=-1)

    def encode(self, type_ids: Tensor, value_ids: Tensor, memory: Optional[MemoryState] = None,
               valid: Optional[Tensor] = None) -> tuple[Tensor, MemoryState]:
        return self.encoder(self.embed(type_ids, value_ids), memory, valid)

    def encode_paths(self, path_ids: Tensor) -> Tensor:
        """``(..., m)`` ancestor type ids -> ``(..., path_dim)`` path vectors."""
        if self.path_encoder is None:
            raise ConfigError("model was built with use_path=False")
        if path_ids.shape[-1] != self.config.path_len:
            raise ShapeError(f"paths must have length {self.config.path_len}, got {path_ids.shape[-1]}")
        _check_ids(path_ids, self.config.type_vocab_size, "path type")
        lead = path_ids.shape[:-1]
        flat = path_ids.reshape(-1, path_ids.shape[-1])
        lengths = (flat != self.pad_type_id).sum(-1)
        out = self.path_encoder(self.type_embedding(flat), lengths)
        return out.reshape(*lead, out.shape[-1])

    def predict(self, hidden: Tensor, path_vec: Optional[Tensor] = None,
                tasks: Sequence[str] = TASKS) -> dict[str, Tensor]:
        """Per-task logits from encoder states and (optionally) path vectors."""
        if hidden.shape[-1] != self.config.d_model:
            raise ShapeError(f"hidden width {hidden.shape[-1]} != d_model {self.config.d_model}")
        if self.config.use_path:
            if path_vec is None:
                raise ShapeError("this model needs a path vector for every prediction")
            if path_vec.shape[-1] != self.config.path_dim or path_vec.shape[:-1] != hidden.shape[:-1]:
                raise ShapeError(f"path vectors {tuple(path_vec.shape)} do not match hidden {tuple(hidden.shape)}")
            features = torch.cat([hidden, path_vec], dim=-1)
        else:
            features = hidden
        return {task: self.heads[f"{task}_head"](features) for task in tasks}

    def predict_heads(self, hidden: Tensor, path_vec: Optional[Tensor] = None) -> PredictionDistribution:
        logits = self.predict(hidden, path_vec)
        return PredictionDistribution(torch.softmax(logits["type"], -1), torch.softmax(logits["value"], -1))

    def path_vectors(self, path_ids: Tensor) -> Optional[Tensor]:
        return self.encode_paths(path_ids) if self.config.use_path else None


def _check_ids(ids: Tensor, size: int, what: str) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
        raise IndexError(f"{what} id out of range [0, {size})")


def mtl_loss(logits: dict[str, Tensor], targets: dict[str, Tensor], alpha: Sequence[float],
             mask: Optional[Tensor] = None) -> Tensor:
    """Weighted sum of per-task mean cross-entropies.

    ``logits[task]`` is ``(..., V_task)`` and ``targets[task]`` the matching
    ``(...)`` ids; ``mask`` selects scored positions. Tasks with weight zero
    are skipped entirely, so their heads receive no gradient at all.
    """
    alpha = check_alpha(alpha)
    total = None
    for task, weight in zip(TASKS, alpha):
        if weight == 0.0:
            continue
        if task not in logits:
            raise ConfigError(f"task {task!r} has weight {weight} but no logits were computed")
        lg, tg = logits[task], targets[task]
        if lg.shape[:-1] != tg.shape:
            raise ShapeError(f"{task} logits {tuple(lg.shape)} do not match targets {tuple(tg.shape)}")
        if mask is not None:
            lg, tg = lg[mask], tg[mask]
        term = weight * F.cross_entropy(lg.reshape(-1, lg.shape[-1]), tg.reshape(-1))
        total = term if total is None else total + term
    return total


class Checkpoint(NamedTuple):
    model: CodeCompletionModel
    type_vocab: object
    value_vocab: object
    train_config: Optional[dict]
    extra: dict


def save_checkpoint(path, model: CodeCompletionModel, type_vocab, value_vocab,
                    train_config: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Write a versioned checkpoint; a partial file is never left behind."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "type_vocab": {"tokens": list(type_vocab.tokens), "k": type_vocab.k},
        "value_vocab": {"tokens": list(value_vocab.tokens), "k": value_vocab.k},
        "fingerprints": {"type": type_vocab.fingerprint, "value": value_vocab.fingerprint},
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path, type_vocab=None, value_vocab=None) -> Checkpoint:
    """Rebuild a model; reject vocabularies that differ from the saved ones."""
    from .vocab import Vocab

    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format')!r}")
    saved_type = Vocab(tuple(payload["type_vocab"]["tokens"]), payload["type_vocab"]["k"])
    saved_value = Vocab(tuple(payload["value_vocab"]["tokens"]), payload["value_vocab"]["k"])
    for what, given, saved in (("type", type_vocab, saved_type), ("value", value_vocab, saved_value)):
        if saved.fingerprint != payload["fingerprints"][what]:
            raise ConfigError(f"checkpoint {what} vocabulary is corrupt")
        if given is not None and given.fingerprint != saved.fingerprint:
            raise ConfigError(
                f"{what} vocabulary fingerprint {given.fingerprint} does not match checkpoint {saved.fingerprint}"
            )
    config = ModelConfig.from_dict(payload["model_config"])
    if config.type_vocab_size != saved_type.size or config.value_vocab_size != saved_value.size:
        raise ConfigError("checkpoint config disagrees with its vocabularies")
    model = CodeCompletionModel(config)
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=False)
    if missing or unexpected:
        raise ConfigError(f"checkpoint parameters mismatch: missing={missing} unexpected={unexpected}")
    model.eval()
    return Checkpoint(model, saved_type, saved_value, payload.get("train_config"), payload.get("extra", {}))
