"""Optimiser, schedules and the pretraining / fine-tuning loops.

The optimiser follows the BertAdam convention: Adam moments without bias
correction, decoupled weight decay (skipped for biases and layer-norm
affines), global-norm gradient clipping before the moment update, and a
linear warmup / linear decay schedule indexed by the number of updates
already taken.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import (
    IGNORE_INDEX, Batch, DataLoader, Example, MaskingConfig, collate, example_record, mlm_eval_records,
    pretraining_records,
)
from .errors import ConfigError, ContractError, DimensionError
from .metrics import confusion, regression_eval, summarize
from .model import LABELS, EncoderModel, ModelConfig, init_model
from .numerics import Tape, Tensor
from .serialization import save_checkpoint
from .tokenizer import Vocabulary


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-5
    warmup_proportion: float = 0.21
    dropout: float = 0.12
    max_seq_len: int = 64
    batch_size: int = 64
    epochs: int = 10
    discrimination_rate: float = 0.87
    grad_accumulation_steps: int = 1
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-6
    max_grad_norm: float = 1.0
    bias_correction: bool = False
    shuffle: bool = True
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        problems = []
        if not 0.0 <= self.warmup_proportion <= 1.0:
            problems.append(f"warmup_proportion must lie in [0, 1] (got {self.warmup_proportion})")
        if not 0.0 < self.discrimination_rate <= 1.0:
            problems.append(f"discrimination_rate must lie in (0, 1] (got {self.discrimination_rate})")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1) (got {self.dropout})")
        for name in ("max_seq_len", "batch_size", "grad_accumulation_steps"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0 (got {self.epochs})")
        if not self.base_lr > 0:
            problems.append(f"base_lr must be positive (got {self.base_lr})")
        if self.weight_decay < 0 or self.adam_eps <= 0 or self.max_grad_norm <= 0:
            problems.append("weight_decay must be >= 0, adam_eps and max_grad_norm > 0")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            problems.append(f"adam_betas must be two values in [0, 1) (got {self.adam_betas})")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# Schedules and parameter groups
# ---------------------------------------------------------------------------


def warmup_steps(total_steps: int, warmup_proportion: float) -> int:
    return int(math.floor(warmup_proportion * total_steps + 0.5))


def lr_schedule(step: int, total_steps: int, warmup_proportion: float, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup steps, then linear decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_proportion)
    if step < warm:
        return base_lr * step / warm
    if step == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


def layer_lrs(base_lr: float, discrimination_rate: float, num_layers: int) -> dict[str, float]:
    """Per-group learning rates, geometric from the task head down to the embeddings."""
    if num_layers < 1:
        raise ContractError(f"num_layers must be >= 1, got {num_layers}")
    rates = {"head": base_lr}
    for layer in reversed(range(num_layers)):
        rates[f"layer.{layer}"] = base_lr * discrimination_rate ** (num_layers - layer)
    rates["embeddings"] = base_lr * discrimination_rate ** (num_layers + 1)
    return rates


def param_group(name: str) -> str:
    if name.startswith("embeddings."):
        return "embeddings"
    if name.startswith("layer."):
        return "layer." + name.split(".")[1]
    return "head"


def uses_weight_decay(name: str) -> bool:
    return not (name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta"))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()},
            {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()},
        )


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        return {k: g * factor for k, g in grads.items()}, total
    return dict(grads), total


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    group_scales: Mapping[str, float] | None = None,
) -> None:
    """One in-place BertAdam update.

    ``group_scales`` multiplies ``lr`` per parameter name (default 1).  Moment
    arithmetic runs in float64; parameters are rounded back to their dtype.
    Parameters whose effective rate is 0 are left bit-identical.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter has {params[k].shape}")
        nx.check_finite(g, f"gradient of {k}")
    grads, _ = clip_grad_norm({k: g.astype(np.float64) for k, g in grads.items()}, cfg.max_grad_norm)
    b1, b2 = cfg.adam_betas
    state.step += 1
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        rate = lr * (1.0 if group_scales is None else group_scales.get(k, 1.0))
        if rate == 0.0:
            continue
        if cfg.bias_correction:
            update = (m / (1 - b1 ** state.step)) / (np.sqrt(v / (1 - b2 ** state.step)) + cfg.adam_eps)
        else:
            update = m / (np.sqrt(v) + cfg.adam_eps)
        p = params[k]
        if cfg.weight_decay and uses_weight_decay(k):
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - rate * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _masked_positions(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = np.argwhere(targets != IGNORE_INDEX)
    return pos, targets[targets != IGNORE_INDEX]


def task_loss(model: EncoderModel, batch: Batch, training: bool, rng=None) -> tuple[Tensor, np.ndarray]:
    """Mean loss for the model's task head plus the raw outputs (logits or scores)."""
    out = model.forward(batch, training=training, rng=rng)
    if model.config.task == "classification":
        if batch.labels is None:
            raise ContractError("classification batch has no labels")
        logits = model.classify(out.pooled, training, rng)
        return nx.cross_entropy(logits, batch.labels), logits.data
    if batch.scores is None:
        raise ContractError("regression batch has no scores")
    preds = model.regress(out.pooled, training, rng)
    target = Tensor(np.asarray(batch.scores, dtype=preds.dtype), dtype=preds.dtype)
    return nx.mse(preds, target), preds.data


def pretraining_loss(model: EncoderModel, batch: Batch, training: bool, rng=None):
    """``(mlm + nsp loss, mlm loss, nsp loss, mlm correct, mlm count, nsp correct)``."""
    out = model.forward(batch, training=training, rng=rng)
    nsp_logits = model.nsp_logits(out.pooled)
    nsp = nx.cross_entropy(nsp_logits, batch.nsp_labels)
    nsp_correct = int((nsp_logits.data.argmax(-1) == batch.nsp_labels).sum())
    pos, tgt = _masked_positions(batch.mlm_targets)
    if len(tgt) == 0:
        return nsp, 0.0, nsp.item(), 0, 0, nsp_correct
    logits = model.mlm_logits(out.sequence, pos)
    mlm = nx.cross_entropy(logits, tgt)
    correct = int((logits.data.argmax(-1) == tgt).sum())
    return nx.add(mlm, nsp), mlm.item(), nsp.item(), correct, len(tgt), nsp_correct


def mlm_loss(model: EncoderModel, records: Sequence[dict]) -> float:
    """Eval-mode masked-LM cross-entropy over all selected positions of ``records`` (one batch)."""
    batch = collate(records)
    pos, tgt = _masked_positions(batch.mlm_targets)
    if len(tgt) == 0:
        raise ContractError("no masked positions to evaluate")
    out = model.forward(batch, training=False)
    return nx.cross_entropy(model.mlm_logits(out.sequence, pos), tgt).item()


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------


class MetricsLog:
    """Appends ``{epoch, split, loss, metric_name, metric_value}`` JSON lines; keeps them in memory too."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, epoch: int, split: str, loss: float, metric_name: str, metric_value: float) -> None:
        rec = {"epoch": epoch, "split": split, "loss": float(loss),
               "metric_name": metric_name, "metric_value": float(metric_value)}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Gradient helpers
# ---------------------------------------------------------------------------


def _gradients(model: EncoderModel, loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    nx.backward(tape, loss, wrt=list(model.params.values()))
    return {k: t.grad for k, t in model.params.items()}


def _accumulate(acc, grads, weight):
    if acc is None:
        return {k: g.astype(np.float64) * weight for k, g in grads.items()}
    for k, g in grads.items():
        acc[k] += g.astype(np.float64) * weight
    return acc


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: EncoderModel
    history: list[dict]


def pretrain(
    model: EncoderModel,
    documents: Sequence[Sequence[str]],
    vocab: Vocabulary,
    masking: MaskingConfig,
    cfg: TrainConfig,
    checkpoint_dir=None,
    log: MetricsLog | None = None,
) -> PretrainResult:
    """Joint masked-LM + next-sentence training on a static set of masked pairs.

    Pairs and masks are drawn once from ``cfg.seed``.  After every epoch the
    model is evaluated (dropout off) on the same pairs; ``history`` rows carry
    ``mlm_loss``, ``nsp_loss``, ``mlm_accuracy`` and ``nsp_accuracy``.
    """
    if not any(documents):
        raise ContractError("pretraining corpus is empty")
    if len(vocab) != model.config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    model = model.copy()
    records = pretraining_records(documents, vocab, masking, cfg.max_seq_len, cfg.seed)
    loader = DataLoader(records, cfg.batch_size, cfg.shuffle, cfg.seed)
    steps_per_epoch = math.ceil(len(loader) / cfg.grad_accumulation_steps)
    total = max(cfg.epochs * steps_per_epoch, 1)
    state = OptimizerState.zeros_like(model.params)
    drop_rng = nx.make_rng(cfg.seed, stream=3)
    history = []

    for epoch in range(1, cfg.epochs + 1):
        acc, n_acc, n_ex = None, 0, 0
        batches = list(loader)
        for i, batch in enumerate(batches):
            with Tape() as tape:
                loss, *_ = pretraining_loss(model, batch, True, drop_rng)
            acc = _accumulate(acc, _gradients(model, loss, tape), len(batch))
            n_acc += 1
            n_ex += len(batch)
            if n_acc == cfg.grad_accumulation_steps or i == len(batches) - 1:
                grads = {k: g / n_ex for k, g in acc.items()}
                lr = lr_schedule(state.step, total, cfg.warmup_proportion, cfg.base_lr)
                adam_step(model.params, grads, state, lr, cfg)
                acc, n_acc, n_ex = None, 0, 0

        row = evaluate_pretraining(model, records, cfg.batch_size)
        row["epoch"] = epoch
        history.append(row)
        if log is not None:
            log.write(epoch, "train", row["mlm_loss"], "mlm_accuracy", row["mlm_accuracy"])
            log.write(epoch, "train", row["nsp_loss"], "nsp_accuracy", row["nsp_accuracy"])
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"pretrain_epoch_{epoch:03d}.ckpt")
    return PretrainResult(model, history)


def evaluate_pretraining(model: EncoderModel, records: Sequence[dict], batch_size: int = 64) -> dict:
    mlm_sum = nsp_sum = 0.0
    correct = count = nsp_correct = 0
    for start in range(0, len(records), batch_size):
        batch = collate(records[start:start + batch_size])
        _, mlm, nsp, c, n, nc = pretraining_loss(model, batch, False)
        mlm_sum += mlm * n
        nsp_sum += nsp * len(batch)
        correct += c
        count += n
        nsp_correct += nc
    return {
        "mlm_loss": mlm_sum / count if count else 0.0,
        "nsp_loss": nsp_sum / len(records),
        "mlm_accuracy": correct / count if count else 0.0,
        "nsp_accuracy": nsp_correct / len(records),
    }


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: EncoderModel
    history: list[dict]
    snapshots: list[EncoderModel]


def _check_task(examples: Sequence[Example], task: str) -> None:
    for ex in examples:
        if task == "classification" and ex.label is None:
            raise ContractError(f"example {ex.guid} has no label but task is classification")
        if task == "regression" and ex.score is None:
            raise ContractError(f"example {ex.guid} has no score but task is regression")


def evaluate(model: EncoderModel, examples: Sequence[Example], vocab: Vocabulary, max_seq_len: int, batch_size: int = 64):
    """Eval-mode loss and metrics over ``examples``.

    Returns ``(mean_loss, report_or_mse, outputs)`` where outputs are logits
    ``[n, 3]`` or scores ``[n]``.
    """
    _check_task(examples, model.config.task)
    records = [example_record(ex, vocab, max_seq_len) for ex in examples]
    outputs, losses, sizes = [], [], []
    for start in range(0, len(records), batch_size):
        batch = collate(records[start:start + batch_size])
        loss, out = task_loss(model, batch, training=False)
        losses.append(loss.item())
        sizes.append(len(batch))
        outputs.append(out)
    outputs = np.concatenate(outputs)
    mean_loss = float(np.dot(losses, sizes) / np.sum(sizes))
    if model.config.task == "classification":
        truth = [ex.label for ex in examples]
        preds = [LABELS[i] for i in outputs.argmax(-1)]
        logp = nx.log_softmax_array(outputs.astype(np.float64))
        per_example = [-logp[i, LABELS.index(t)] for i, t in enumerate(truth)]
        report = summarize(confusion(truth, preds), per_example)
        return mean_loss, report, outputs
    return mean_loss, regression_eval(outputs, [ex.score for ex in examples]), outputs


def _metric(task: str, result) -> tuple[str, float]:
    if task == "classification":
        return "accuracy", result.accuracy
    return "mse", result


def finetune(
    model: EncoderModel,
    examples: Sequence[Example],
    vocab: Vocabulary,
    cfg: TrainConfig,
    task: str | None = None,
    val_examples: Sequence[Example] | None = None,
    log: MetricsLog | None = None,
    snapshot_dir=None,
    keep_snapshots: bool = False,
) -> FinetuneResult:
    """Supervised training of the task head and encoder with discriminative learning rates.

    ``task`` defaults to the model's current head; a different task swaps in
    a freshly initialised head.  ``cfg.dropout`` replaces the model's hidden
    and attention dropout during training only.  Snapshot 0 is the model before any
    update; snapshot ``e`` is the model after epoch ``e``.
    """
    task = task or model.config.task
    _check_task(examples, task)
    if not examples:
        raise ContractError("no training examples")
    original = model
    model = model.with_task(task, cfg.seed).with_config(dropout_prob=cfg.dropout, attention_dropout_prob=cfg.dropout)

    loader = DataLoader([example_record(ex, vocab, cfg.max_seq_len) for ex in examples],
                        cfg.batch_size, cfg.shuffle, cfg.seed)
    steps_per_epoch = math.ceil(len(loader) / cfg.grad_accumulation_steps)
    total = max(cfg.epochs * steps_per_epoch, 1)
    state = OptimizerState.zeros_like(model.params)
    rates = layer_lrs(1.0, cfg.discrimination_rate, model.config.num_layers)
    scales = {k: rates[param_group(k)] for k in model.params}
    drop_rng = nx.make_rng(cfg.seed, stream=4)

    def restore(m: EncoderModel) -> EncoderModel:
        return m.with_config(dropout_prob=original.config.dropout_prob,
                             attention_dropout_prob=original.config.attention_dropout_prob)

    snapshots = []

    def snapshot(epoch: int) -> None:
        snap = restore(model).copy()
        if keep_snapshots:
            snapshots.append(snap)
        if snapshot_dir is not None:
            save_checkpoint(snap, Path(snapshot_dir) / f"epoch_{epoch:03d}.ckpt")

    snapshot(0)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        acc, n_acc, n_ex = None, 0, 0
        running, seen = 0.0, 0
        batches = list(loader)
        for i, batch in enumerate(batches):
            with Tape() as tape:
                loss, _ = task_loss(model, batch, True, drop_rng)
            running += loss.item() * len(batch)
            seen += len(batch)
            acc = _accumulate(acc, _gradients(model, loss, tape), len(batch))
            n_acc += 1
            n_ex += len(batch)
            if n_acc == cfg.grad_accumulation_steps or i == len(batches) - 1:
                grads = {k: g / n_ex for k, g in acc.items()}
                lr = lr_schedule(state.step, total, cfg.warmup_proportion, cfg.base_lr)
                adam_step(model.params, grads, state, lr, cfg, scales)
                acc, n_acc, n_ex = None, 0, 0

        eval_model = restore(model)
        train_loss, train_result, _ = evaluate(eval_model, examples, vocab, cfg.max_seq_len, cfg.batch_size)
        name, value = _metric(task, train_result)
        row = {"epoch": epoch, "train_running_loss": running / seen, "train_loss": train_loss, "train_" + name: value}
        if log is not None:
            log.write(epoch, "train", train_loss, name, value)
        if val_examples:
            val_loss, val_result, _ = evaluate(eval_model, val_examples, vocab, cfg.max_seq_len, cfg.batch_size)
            vname, vvalue = _metric(task, val_result)
            row.update({"val_loss": val_loss, "val_" + vname: vvalue})
            if log is not None:
                log.write(epoch, "val", val_loss, vname, vvalue)
        history.append(row)
        snapshot(epoch)
    return FinetuneResult(restore(model), history, snapshots)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def forgetting_probe(
    snapshots: Sequence[EncoderModel],
    sentences: Sequence[str],
    vocab: Vocabulary,
    masking: MaskingConfig,
    seed: int,
    max_seq_len: int = 64,
) -> list[dict]:
    """Held-out masked-LM loss of each snapshot, all scored on one fixed mask realisation."""
    records = mlm_eval_records(sentences, vocab, masking, max_seq_len, seed)
    return [{"epoch": i, "mlm_loss": mlm_loss(snap, records)} for i, snap in enumerate(snapshots)]


def depth_sweep(
    base_config: ModelConfig,
    depths: Sequence[int],
    examples: Sequence[Example],
    vocab: Vocabulary,
    cfg: TrainConfig,
) -> list[dict]:
    """Train one independently seeded classifier per encoder depth.

    Each row holds the final-epoch train loss and accuracy, which is the
    input for :func:`finsent.metrics.loss_accuracy_correlation`.
    """
    rows = []
    for depth in depths:
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        config = dataclasses.replace(base_config, num_layers=depth, task="classification")
        result = finetune(init_model(config, cfg.seed), examples, vocab, cfg, task="classification")
        last = result.history[-1] if result.history else None
        if last is None:
            loss, report, _ = evaluate(result.model, examples, vocab, cfg.max_seq_len, cfg.batch_size)
            last = {"train_loss": loss, "train_accuracy": report.accuracy}
        rows.append({"depth": depth, "loss": last["train_loss"], "accuracy": last["train_accuracy"]})
    return rows


def write_table(rows: Sequence[dict], tsv_path=None, json_path=None) -> None:
    if not rows:
        return
    cols = list(rows[0])
    if tsv_path is not None:
        lines = ["\t".join(cols)] + ["\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                     for r in rows]
        Path(tsv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if json_path is not None:
        Path(json_path).write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")
