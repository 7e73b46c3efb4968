"""Training loop, checkpoint state, and the per-strategy efficiency profiler."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape, tape_report
from .checkpoint import Checkpoint
from .config import STRATEGIES, RunConfig
from .data import Batch, Dataset, Vocab, make_batches
from .errors import ConfigError, NumericError, ValidationError
from .losses import NegativeQueue, total_loss
from .model import Model, build_model
from .optim import AdamState, adamw_step
from .retrieval import evaluate_model

log = logging.getLogger(__name__)


def count_trainable(model: Model) -> int:
    return sum(t.size for t in model.trainable_parameters().values())


@dataclass
class TrainState:
    run: RunConfig
    vocab: Vocab
    model: Model
    adam: AdamState
    q_v: NegativeQueue
    q_s: NegativeQueue
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    best_mr: float = -1.0

    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, t in self.model.named_parameters().items():
            tensors[f"param/{name}"] = t.data.copy()
        for name, arr in self.adam.m.items():
            tensors[f"adam_m/{name}"] = arr.copy()
        for name, arr in self.adam.v.items():
            tensors[f"adam_v/{name}"] = arr.copy()
        pushes = {}
        for tag, q in (("queue_v", self.q_v), ("queue_s", self.q_s)):
            st = q.state()
            pushes[tag] = st["pushes"]
            for key in ("embeddings", "scene_ids", "ages"):
                tensors[f"{tag}/{key}"] = st[key]
        meta = {
            "format": "focusret-train-state",
            "step": self.step,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "adam_step": self.adam.step,
            "best_mr": self.best_mr,
            "queue_pushes": pushes,
            "config": self.run.to_flat(),
            "vocab": self.vocab.token_to_id,
            "rng": {"seed": self.run.train.seed, "epoch": self.epoch, "batch_index": self.batch_index},
        }
        return Checkpoint(tensors, meta)


def new_state(run: RunConfig, vocab: Vocab) -> TrainState:
    tc, lc = run.train, run.loss
    model = build_model(run.model, len(vocab), tc.strategy, tc.seed, vocab.scene_token_ids(), lc)
    cap = tc.batch_size * lc.queue_mult
    return TrainState(run, vocab, model, AdamState(), NegativeQueue(cap), NegativeQueue(cap))


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    meta = ckpt.meta
    run = RunConfig.from_flat(meta["config"])
    vocab = Vocab({k: int(v) for k, v in meta["vocab"].items()})
    state = new_state(run, vocab)
    params = state.model.named_parameters()
    stored = ckpt.group("param")
    missing = set(params) - set(stored)
    if missing:
        raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise ValidationError(f"shape mismatch for {name}: {stored[name].shape} vs {t.shape}")
        t.data = stored[name].copy()
    state.adam = AdamState(
        m={k: v.copy() for k, v in ckpt.group("adam_m").items()},
        v={k: v.copy() for k, v in ckpt.group("adam_v").items()},
        step=int(meta.get("adam_step", 0)),
    )
    for tag, q in (("queue_v", state.q_v), ("queue_s", state.q_s)):
        g = ckpt.group(tag)
        if g:
            q.load_state(g["embeddings"], g["scene_ids"], g["ages"], meta["queue_pushes"][tag])
    state.step = int(meta.get("step", 0))
    state.epoch = int(meta.get("epoch", 0))
    state.batch_index = int(meta.get("batch_index", 0))
    state.best_mr = float(meta.get("best_mr", -1.0))
    return state


@dataclass
class TrainResult:
    log: list[dict[str, Any]]
    best: Optional[Checkpoint]
    last: Checkpoint
    state: TrainState
    val_history: list[tuple[int, float]] = field(default_factory=list)
    scene_prompt_max_grad: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def _scene_prompt_grad(model: Model, vocab: Vocab) -> float:
    g = model.text.token_embed.grad
    if g is None:
        return 0.0
    rows = vocab.scene_token_ids()
    return float(np.abs(g[rows]).max()) if rows else 0.0


def train_step(state: TrainState, batch: Batch) -> dict[str, Any]:
    """Forward, backward, AdamW, queue update. Returns the metrics row.

    Before ``queue_warmup_steps`` the loss sees empty queues, but the batch
    embeddings are still pushed so the queues are full when the term starts.
    """
    model, run = state.model, state.run
    t0 = time.perf_counter()
    if state.step < run.train.queue_warmup_steps:
        q_v, q_s = NegativeQueue(0), NegativeQueue(0)
    else:
        q_v, q_s = state.q_v, state.q_s
    with Tape() as tape:
        v = model.encode_images(batch.images)
        s = model.encode_texts(batch.tokens)
        losses = total_loss(v, s, q_v, q_s, batch.scene_ids, run.loss, model.log_tau)
    loss = losses.total.item()
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {state.step + 1}", state.to_checkpoint())
    tape.backward(losses.total)
    saved = tape.total_saved_bytes
    prompt_grad = _scene_prompt_grad(model, state.vocab)
    try:
        adamw_step(model.trainable_parameters(), state.adam, run.train, model.frozen_rows())
    except NumericError as exc:
        model.zero_grad()
        raise NumericError(str(exc), state.to_checkpoint()) from None
    state.q_v.push(v.detach(), batch.scene_ids)
    state.q_s.push(s.detach(), batch.scene_ids)
    state.step += 1
    dt = time.perf_counter() - t0
    return {
        "step": state.step,
        "loss": loss,
        "L_batch": losses.batch.item(),
        "L_queue": losses.queue.item(),
        "saved_bytes": saved,
        "pairs_per_s": len(batch) / dt if dt > 0 else float("inf"),
        "_prompt_grad": prompt_grad,
    }


def train(
    run: RunConfig,
    dataset: Dataset,
    resume: Optional[Checkpoint] = None,
    metrics_path: Optional[str | Path] = None,
    on_step: Optional[Callable[[TrainState, dict], None]] = None,
    validate: bool = True,
) -> TrainResult:
    """Train on the 80% split, validating mR on the 10% split after each epoch.

    With ``max_steps`` set the run stops after exactly that many steps
    (epochs continue past ``epochs`` if needed); otherwise it runs
    ``epochs`` full epochs. The best-validation state is kept in
    ``result.best``.

    When resuming, everything except the stopping point (``epochs``,
    ``max_steps``, taken from ``run``) comes from the checkpoint.
    """
    if resume is not None:
        state = state_from_checkpoint(resume)
        if state.vocab.token_to_id != dataset.vocab.token_to_id:
            raise ValidationError("dataset vocabulary differs from the checkpoint's")
        flat = {**state.run.to_flat(), "epochs": run.train.epochs, "max_steps": run.train.max_steps}
        state.run = RunConfig.from_flat(flat)
        run = state.run
    else:
        state = new_state(run, dataset.vocab)
    tc = run.train
    if run.model.max_len < 3:
        raise ConfigError("max_len too small")
    train_recs, val_recs, _ = dataset.split()
    if len(train_recs) < tc.batch_size:
        raise ValidationError(
            f"training split has {len(train_recs)} images, fewer than batch_size {tc.batch_size}"
        )
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    rows: list[dict[str, Any]] = []
    history: list[tuple[int, float]] = []
    best: Optional[Checkpoint] = None
    prompt_grad = 0.0

    def done() -> bool:
        if tc.max_steps is not None:
            return state.step >= tc.max_steps
        return state.epoch >= tc.epochs

    def run_validation() -> None:
        nonlocal best
        if not validate or not val_recs:
            return
        mr = evaluate_model(state.model, val_recs, state.vocab, tc.scene_prompt).mr
        history.append((state.step, mr))
        if mr > state.best_mr:
            state.best_mr = mr
            best = state.to_checkpoint()
        log.info("step %d epoch %d val mR %.2f", state.step, state.epoch, mr)

    try:
        while not done():
            batches = make_batches(
                train_recs, tc.batch_size, tc.seed, state.epoch, state.vocab,
                run.model.max_len, tc.scene_prompt,
            )
            while state.batch_index < len(batches) and not done():
                row = train_step(state, batches[state.batch_index])
                state.batch_index += 1
                prompt_grad = max(prompt_grad, row.pop("_prompt_grad"))
                if on_step is not None:
                    on_step(state, row)
                state.model.zero_grad()
                rows.append(row)
                if fh is not None:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
            if state.batch_index >= len(batches):
                state.epoch += 1
                state.batch_index = 0
            run_validation()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(rows, best, state.to_checkpoint(), state, history, prompt_grad)


# -- efficiency profiling ----------------------------------------------------


@dataclass
class EfficiencyReport:
    strategy: str
    trainable_params: int
    saved_activation_bytes: int
    throughput_pairs_per_s: float
    per_module_bytes: dict[str, int]
    by_op: dict[str, int]
    vision_block_entries: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "trainable_params": self.trainable_params,
            "saved_activation_bytes": self.saved_activation_bytes,
            "throughput_pairs_per_s": self.throughput_pairs_per_s,
            "per_module_bytes": self.per_module_bytes,
            "by_op": self.by_op,
            "vision_block_entries": self.vision_block_entries,
        }


def _vision_block_entries(tape: Tape) -> int:
    return sum(1 for e in tape.entries if e.scope.startswith("vision.block"))


def profile_strategies(
    run: RunConfig,
    batch: Batch,
    vocab: Vocab,
    strategies: Sequence[str] = STRATEGIES,
    warmup: int = 5,
    timed: int = 10,
) -> list[EfficiencyReport]:
    """Train each strategy for ``warmup + timed`` steps on the same batch.

    Bytes are the peak per-step tape total; throughput covers the timed
    steps only and is hardware dependent.
    """
    if timed < 1:
        raise ConfigError("need at least one timed step")
    reports = []
    for strategy in strategies:
        srun = run.replace(strategy=strategy)
        state = new_state(srun, vocab)
        peak = -1
        peak_report = None
        vblock = 0
        elapsed = 0.0
        for i in range(warmup + timed):
            t0 = time.perf_counter()
            with Tape() as tape:
                v = state.model.encode_images(batch.images)
                s = state.model.encode_texts(batch.tokens)
                losses = total_loss(v, s, state.q_v, state.q_s, batch.scene_ids, srun.loss, state.model.log_tau)
            tape.backward(losses.total)
            adamw_step(state.model.trainable_parameters(), state.adam, srun.train, state.model.frozen_rows())
            state.q_v.push(v.detach(), batch.scene_ids)
            state.q_s.push(s.detach(), batch.scene_ids)
            state.model.zero_grad()
            if i >= warmup:
                elapsed += time.perf_counter() - t0
            if tape.total_saved_bytes > peak:
                peak = tape.total_saved_bytes
                peak_report = tape_report(tape, scope_depth=2)
                vblock = _vision_block_entries(tape)
        reports.append(
            EfficiencyReport(
                strategy=strategy,
                trainable_params=count_trainable(state.model),
                saved_activation_bytes=peak,
                throughput_pairs_per_s=timed * len(batch) / elapsed if elapsed > 0 else float("inf"),
                per_module_bytes=peak_report.by_scope,
                by_op=peak_report.by_op,
                vision_block_entries=vblock,
            )
        )
    return reports


def check_memory_ordering(reports: Sequence[EfficiencyReport]) -> None:
    """Raise ``AssertionError`` (with the byte breakdown) unless side < lora < full."""
    by = {r.strategy: r for r in reports}
    order = [by[s].saved_activation_bytes for s in STRATEGIES]
    if not (order[0] < order[1] < order[2]):
        detail = json.dumps([r.to_dict() for r in reports], indent=2)
        raise AssertionError(f"saved-activation ordering violated: {order}\n{detail}")
