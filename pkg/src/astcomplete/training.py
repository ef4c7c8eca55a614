"""Segment streaming, optimisation of the weighted multi-task objective, sweeps."""
from __future__ import annotations

import heapq
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DivergenceError
from .evaluation import top1_accuracy
from .model import TASKS, CodeCompletionModel, MemoryState, ModelConfig, check_alpha, mtl_loss, save_checkpoint
from .shards import Shard

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
WEIGHT_GRID = ((1.0, 0.0), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.0, 1.0))


@dataclass
class TrainConfig:
    """Optimiser and schedule settings plus the ablation switches.

    ``use_mtl=False`` trains only ``single_task``; ``use_path=False`` drops
    the path2root encoder; ``use_recurrence=False`` clears the segment
    memory before every segment.
    """

    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    checkpoint_every: int = 0
    use_mtl: bool = True
    single_task: str = "type"
    use_path: bool = True
    use_recurrence: bool = True
    shuffle: bool = True
    seed: int = 0
    deterministic: bool = True
    eval_train: bool = False
    target_train_accuracy: Optional[tuple[float, float]] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.target_train_accuracy is not None:
            self.target_train_accuracy = tuple(self.target_train_accuracy)
        for name in ("epochs", "batch_size", "learning_rate", "adam_eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")
        if self.single_task not in TASKS:
            raise ConfigError(f"single_task must be one of {TASKS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def effective_alpha(model_config: ModelConfig, train_config: TrainConfig) -> tuple[float, float]:
    if train_config.use_mtl:
        return check_alpha(model_config.alpha)
    return tuple(1.0 if t == train_config.single_task else 0.0 for t in TASKS)


def trained_tasks(alpha: Sequence[float]) -> tuple[str, ...]:
    return tuple(t for t, a in zip(TASKS, alpha) if a > 0)


def configure_model(model_config: ModelConfig, train_config: TrainConfig) -> ModelConfig:
    """Apply the architecture-level ablation switches to ``model_config``."""
    return replace(model_config, use_path=model_config.use_path and train_config.use_path,
                   alpha=effective_alpha(model_config, train_config))


@dataclass
class SegmentBatch:
    """One step of ``batch_size`` parallel rows, ``L`` input positions each.

    Input ``(b, t)`` is node ``offset[b] + t`` of program ``program[b]`` and
    its target is the following node. The first node of a program has no
    preceding input; it is scored as a separate *start* query whenever the
    segment opens a program (``start_mask``).
    """

    inputs_type: torch.Tensor      # (B, L)
    inputs_value: torch.Tensor     # (B, L)
    input_mask: torch.Tensor       # (B, L) real input positions
    targets_type: torch.Tensor     # (B, L)
    targets_value: torch.Tensor    # (B, L)
    paths: torch.Tensor            # (B, L, m) paths of the targets
    loss_mask: torch.Tensor        # (B, L) positions whose target exists
    reset_mask: torch.Tensor       # (B,) memory must be cleared before this segment
    start_mask: torch.Tensor       # (B,)
    start_type: torch.Tensor       # (B,)
    start_value: torch.Tensor      # (B,)
    start_paths: torch.Tensor      # (B, m)
    program: torch.Tensor          # (B,) -1 for filler rows
    offset: torch.Tensor           # (B,)

    @property
    def n_queries(self) -> int:
        return int(self.loss_mask.sum()) + int(self.start_mask.sum())


def assign_rows(lengths: Sequence[int], order: Sequence[int], segment_len: int,
                batch_size: int) -> list[list[tuple[int, int]]]:
    """Deal programs to rows, least-loaded first; each row lists (program, segment)."""
    rows: list[list[tuple[int, int]]] = [[] for _ in range(batch_size)]
    heap = [(0, r) for r in range(batch_size)]
    for p in order:
        n_seg = max(1, math.ceil(lengths[p] / segment_len))
        load, r = heapq.heappop(heap)
        rows[r].extend((p, k) for k in range(n_seg))
        heapq.heappush(heap, (load + n_seg, r))
    return rows


def segment_stream(shard: Shard, segment_len: int, batch_size: int, *,
                   order: Optional[Sequence[int]] = None,
                   type_fingerprint: Optional[str] = None,
                   value_fingerprint: Optional[str] = None) -> Iterator[SegmentBatch]:
    """Chunk every program into consecutive segments and batch them row-wise.

    All segments of a program sit consecutively in one row, so memory
    carried from step to step is always from the same program; a program's
    first segment sets ``reset_mask``. Short tails are PAD-filled.
    """
    shard.check_vocab(type_fingerprint=type_fingerprint, value_fingerprint=value_fingerprint)
    if segment_len < 1 or batch_size < 1:
        raise ConfigError("segment_len and batch_size must be positive")
    programs = shard.programs
    order = list(range(len(programs))) if order is None else list(order)
    rows = assign_rows([len(p) for p in programs], order, segment_len, batch_size)
    n_steps = max((len(r) for r in rows), default=0)
    L, B, m = segment_len, batch_size, shard.m

    for step in range(n_steps):
        in_t = np.zeros((B, L), np.int64)
        in_v = np.zeros((B, L), np.int64)
        in_mask = np.zeros((B, L), bool)
        tg_t = np.zeros((B, L), np.int64)
        tg_v = np.zeros((B, L), np.int64)
        paths = np.zeros((B, L, m), np.int64)
        loss_mask = np.zeros((B, L), bool)
        reset = np.ones(B, bool)
        start = np.zeros(B, bool)
        st_t = np.zeros(B, np.int64)
        st_v = np.zeros(B, np.int64)
        st_p = np.zeros((B, m), np.int64)
        prog = np.full(B, -1, np.int64)
        offs = np.zeros(B, np.int64)
        for b, row in enumerate(rows):
            if step >= len(row):
                continue
            p_idx, k = row[step]
            p = programs[p_idx]
            n = len(p)
            lo = k * L
            hi = min(lo + L, n)
            t_real = hi - lo
            prog[b], offs[b] = p_idx, lo
            in_t[b, :t_real] = p.types[lo:hi]
            in_v[b, :t_real] = p.values[lo:hi]
            in_mask[b, :t_real] = True
            t_hi = min(hi + 1, n)
            n_tg = t_hi - (lo + 1)
            if n_tg > 0:
                tg_t[b, :n_tg] = p.types[lo + 1:t_hi]
                tg_v[b, :n_tg] = p.values[lo + 1:t_hi]
                paths[b, :n_tg] = p.paths[lo + 1:t_hi]
                loss_mask[b, :n_tg] = True
            reset[b] = k == 0
            if k == 0:
                start[b] = True
                st_t[b], st_v[b], st_p[b] = p.types[0], p.values[0], p.paths[0]
        t = torch.from_numpy
        yield SegmentBatch(t(in_t), t(in_v), t(in_mask), t(tg_t), t(tg_v), t(paths), t(loss_mask),
                           t(reset), t(start), t(st_t), t(st_v), t(st_p), t(prog), t(offs))


def batch_logits(model: CodeCompletionModel, batch: SegmentBatch, memory: Optional[MemoryState],
                 tasks: Sequence[str], use_recurrence: bool = True):
    """Forward one segment; returns (logits, targets, new_memory).

    Predictions are ordered: regular positions row-major, then start queries.
    """
    if not use_recurrence or memory is None:
        memory = None
    else:
        memory = memory.reset(batch.reset_mask)
    hidden, new_memory = model.encode(batch.inputs_type, batch.inputs_value, memory, batch.input_mask)
    sel = batch.loss_mask
    st = batch.start_mask
    h = hidden[sel]
    paths = batch.paths[sel]
    n_start = int(st.sum())
    if n_start:
        h = torch.cat([h, model.initial_hidden.expand(n_start, -1)], dim=0)
        paths = torch.cat([paths, batch.start_paths[st]], dim=0)
    logits = model.predict(h, model.path_vectors(paths), tasks)
    targets = {
        "type": torch.cat([batch.targets_type[sel], batch.start_type[st]]),
        "value": torch.cat([batch.targets_value[sel], batch.start_value[st]]),
    }
    return logits, targets, (new_memory if use_recurrence else None)


def query_positions(batch: SegmentBatch) -> tuple[np.ndarray, np.ndarray]:
    """(program, position) of every prediction, in :func:`batch_logits` order."""
    sel = batch.loss_mask.numpy()
    b_idx, t_idx = np.nonzero(sel)
    prog = batch.program.numpy()
    offs = batch.offset.numpy()
    st_rows = np.nonzero(batch.start_mask.numpy())[0]
    programs = np.concatenate([prog[b_idx], prog[st_rows]])
    positions = np.concatenate([offs[b_idx] + t_idx + 1, np.zeros(len(st_rows), np.int64)])
    return programs, positions


@dataclass
class ShardPredictions:
    """Top-1 predictions for every query of every program of a shard."""

    predictions: dict[str, list[np.ndarray]]
    targets: dict[str, list[np.ndarray]]
    loss: dict[str, float]
    n_queries: int

    def flat(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.predictions[task]), np.concatenate(self.targets[task])

    def accuracy(self, task: str) -> float:
        pred, tgt = self.flat(task)
        return top1_accuracy(pred, tgt, UNK_ID, task)

    def per_program_accuracy(self, task: str) -> np.ndarray:
        return np.array([top1_accuracy(p, t, UNK_ID, task)
                         for p, t in zip(self.predictions[task], self.targets[task])])


@torch.no_grad()
def predict_shard(model: CodeCompletionModel, shard: Shard, *, batch_size: int = 16,
                  use_recurrence: bool = True, tasks: Sequence[str] = TASKS) -> ShardPredictions:
    model.eval()
    preds = {t: [np.full(len(p), -1, np.int64) for p in shard.programs] for t in tasks}
    targets = {
        "type": [p.types for p in shard.programs],
        "value": [p.values for p in shard.programs],
    }
    loss_sum = {t: 0.0 for t in tasks}
    n = 0
    memory = None
    for batch in segment_stream(shard, model.config.segment_len, batch_size):
        logits, tg, memory = batch_logits(model, batch, memory, tasks, use_recurrence)
        progs, positions = query_positions(batch)
        for task in tasks:
            loss_sum[task] += float(torch.nn.functional.cross_entropy(logits[task], tg[task], reduction="sum"))
            arg = logits[task].argmax(-1).numpy()
            for pr, pos, a in zip(progs, positions, arg):
                preds[task][pr][pos] = a
        n += len(progs)
    return ShardPredictions(
        preds, {t: targets[t] for t in tasks},
        {t: loss_sum[t] / n if n else float("nan") for t in tasks}, n,
    )


def evaluate(model: CodeCompletionModel, shard: Shard, alpha: Sequence[float], *, batch_size: int = 16,
             use_recurrence: bool = True) -> dict:
    tasks = trained_tasks(alpha)
    sp = predict_shard(model, shard, batch_size=batch_size, use_recurrence=use_recurrence, tasks=tasks)
    out = {"loss": sum(a * sp.loss[t] for t, a in zip(TASKS, alpha) if a > 0), "queries": sp.n_queries}
    for task in TASKS:
        out[f"{task}_loss"] = sp.loss.get(task)
        out[f"{task}_accuracy"] = sp.accuracy(task) if task in tasks else None
    return out


@dataclass
class TrainResult:
    model: CodeCompletionModel
    history: list[dict]
    step_losses: list[float] = field(default_factory=list)
    final_checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None


def _seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def train(model_config: ModelConfig, train_config: TrainConfig, train_shard: Shard,
          valid_shard: Optional[Shard] = None, out_dir=None, *, type_vocab=None, value_vocab=None,
          max_steps: Optional[int] = None, on_epoch: Optional[Callable[[dict], None]] = None,
          dtype=torch.float32) -> TrainResult:
    """Optimise the weighted multi-task loss over ``train_shard``.

    Writes ``metrics.jsonl``, ``final.pt`` and ``best.pt`` (lowest validation
    loss, or training loss without a validation shard) under ``out_dir``
    when given; checkpoints need both vocabularies.
    """
    if len(train_shard) == 0:
        raise ConfigError("training shard is empty")
    if valid_shard is not None and (valid_shard.type_fingerprint, valid_shard.value_fingerprint) != (
            train_shard.type_fingerprint, train_shard.value_fingerprint):
        raise ConfigError("validation shard was encoded with different vocabularies")
    if type_vocab is not None or value_vocab is not None:
        train_shard.check_vocab(type_vocab, value_vocab)
    cfg = configure_model(model_config, train_config)
    alpha = cfg.alpha
    if train_shard.m != cfg.path_len:
        raise ConfigError(f"shard path length m={train_shard.m} != model path_len={cfg.path_len}")
    tc = train_config
    _seed_everything(tc.seed, tc.deterministic)
    model = CodeCompletionModel(cfg).to(dtype)
    tasks = TASKS if tc.use_mtl else trained_tasks(alpha)
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.adam_eps)
    rng = np.random.default_rng(tc.seed)
    can_save = out_dir is not None and type_vocab is not None and value_vocab is not None
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    result = TrainResult(model, [])
    best = math.inf
    steps = 0

    def save(name, epoch):
        path = os.path.join(out_dir, name)
        save_checkpoint(path, model, type_vocab, value_vocab, train_config=tc.to_dict(),
                        extra={"epoch": epoch, "alpha": list(alpha)})
        return path

    try:
        for epoch in range(tc.epochs):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(train_shard)) if tc.shuffle else None
            memory = None
            loss_sum, n_sum = 0.0, 0
            for batch in segment_stream(train_shard, cfg.segment_len, tc.batch_size, order=order):
                if max_steps is not None and steps >= max_steps:
                    break
                if batch.n_queries == 0:
                    continue
                logits, targets, memory = batch_logits(model, batch, memory, tasks, tc.use_recurrence)
                loss = mtl_loss(logits, targets, alpha)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss.item()} at epoch {epoch}, step {steps}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
                opt.step()
                steps += 1
                result.step_losses.append(loss.item())
                loss_sum += loss.item() * batch.n_queries
                n_sum += batch.n_queries
            record = {"epoch": epoch, "steps": steps, "train_loss": loss_sum / max(n_sum, 1)}
            if tc.eval_train:
                ev = evaluate(model, train_shard, alpha, batch_size=tc.batch_size, use_recurrence=tc.use_recurrence)
                record.update({f"train_{k}": v for k, v in ev.items() if k.endswith("accuracy")})
            if valid_shard is not None:
                ev = evaluate(model, valid_shard, alpha, batch_size=tc.batch_size, use_recurrence=tc.use_recurrence)
                record.update({f"valid_{k}": v for k, v in ev.items()})
            record["seconds"] = round(time.perf_counter() - t0, 3)
            result.history.append(record)
            log.info("epoch %d %s", epoch, json.dumps(record))
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            score = record.get("valid_loss", record["train_loss"])
            if can_save:
                if score < best:
                    best = score
                    result.best_checkpoint = save("best.pt", epoch)
                if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                    save(f"epoch{epoch + 1:03d}.pt", epoch)
            if _reached(record, tc.target_train_accuracy, alpha):
                break
            if max_steps is not None and steps >= max_steps:
                break
        if can_save:
            result.final_checkpoint = save("final.pt", len(result.history) - 1)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    return result


def _reached(record: dict, target, alpha) -> bool:
    if target is None:
        return False
    for task, a, goal in zip(TASKS, alpha, target):
        if a > 0 and goal is not None:
            acc = record.get(f"train_{task}_accuracy")
            if acc is None or acc < goal:
                return False
    return True


def weight_sweep(model_config: ModelConfig, train_config: TrainConfig, train_shard: Shard,
                 valid_shard: Shard, grid: Sequence[Sequence[float]] = WEIGHT_GRID) -> list[dict]:
    """Train one model per loss weighting; accuracies of untrained tasks are None."""
    rows = []
    for alpha in grid:
        alpha = check_alpha(alpha)
        mc = replace(model_config, alpha=alpha)
        res = train(mc, replace(train_config, use_mtl=True), train_shard, valid_shard)
        ev = evaluate(res.model, valid_shard, alpha, batch_size=train_config.batch_size,
                      use_recurrence=train_config.use_recurrence)
        rows.append({
            "alpha": alpha,
            "type_accuracy": ev["type_accuracy"],
            "value_accuracy": ev["value_accuracy"],
        })
    return rows


def format_sweep(rows: Sequence[dict]) -> str:
    def pct(x):
        return "-" if x is None else f"{100 * x:.1f}%"

    lines = ["alpha_1  alpha_2  type     value"]
    for r in rows:
        a1, a2 = r["alpha"]
        lines.append(f"{a1:<8.1f} {a2:<8.1f} {pct(r['type_accuracy']):<8} {pct(r['value_accuracy'])}")
    return "\n".join(lines)


ABLATIONS = {
    "full": {},
    "-mtl": {"use_mtl": False},
    "-path2root": {"use_path": False},
    "-recurrence": {"use_recurrence": False},
}


def ablation_study(model_config: ModelConfig, train_config: TrainConfig, train_shard: Shard,
                   valid_shard: Shard, seeds: Sequence[int] = (0, 1, 2),
                   variants: Sequence[str] = tuple(ABLATIONS)) -> dict[str, list[float]]:
    """Validation type accuracy of each variant, one entry per seed.

    The same seed drives initialisation and data order in every variant, so
    runs are paired across variants.
    """
    out: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        for name in variants:
            tc = replace(train_config, seed=seed, single_task="type", **ABLATIONS[name])
            res = train(replace(model_config, seed=seed), tc, train_shard)
            ev = evaluate(res.model, valid_shard, effective_alpha(model_config, tc),
                          batch_size=tc.batch_size, use_recurrence=tc.use_recurrence)
            out[name].append(ev["type_accuracy"])
    return out
