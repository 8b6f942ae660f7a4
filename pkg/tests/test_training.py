import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import toy_data
from finsent import numerics as nx
from finsent.data import IGNORE_INDEX, Example, MaskingConfig, collate, mlm_eval_records
from finsent.errors import ConfigError, ContractError, DimensionError
from finsent.model import ModelConfig, init_model
from finsent.numerics import Tensor
from finsent.serialization import load_checkpoint
from finsent.training import (
    MetricsLog, OptimizerState, TrainConfig, adam_step, clip_grad_norm, depth_sweep, evaluate, finetune,
    forgetting_probe, layer_lrs, lr_schedule, mlm_loss, param_group, pretrain, uses_weight_decay, warmup_steps,
    write_table,
)


def small_config(vocab, **kw):
    base = dict(num_layers=2, num_heads=2, hidden_size=16, intermediate_size=32, vocab_size=len(vocab),
                max_position=16)
    base.update(kw)
    return ModelConfig(**base)


# -- schedule ------------------------------------------------------------------


def test_schedule_examples():
    assert lr_schedule(0, 100, 0.21, 2e-5) == 0.0
    assert lr_schedule(21, 100, 0.21, 2e-5) == 2e-5
    assert lr_schedule(100, 100, 0.21, 2e-5) == 0.0
    assert math.isclose(lr_schedule(60, 100, 0.21, 2e-5), 2e-5 * 40 / 79, rel_tol=1e-12)


def test_schedule_errors():
    with pytest.raises(ContractError):
        lr_schedule(101, 100, 0.21, 1.0)
    with pytest.raises(ContractError):
        lr_schedule(0, 0, 0.21, 1.0)


def test_warmup_rounding():
    assert warmup_steps(100, 0.21) == 21
    assert warmup_steps(10, 0.25) == 3
    assert warmup_steps(10, 0.0) == 0


def test_schedule_without_warmup_or_decay():
    assert lr_schedule(0, 10, 0.0, 1.0) == 1.0
    assert lr_schedule(10, 10, 1.0, 1.0) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 1.0))
def test_schedule_shape(total, prop):
    rates = [lr_schedule(s, total, prop, 1.0) for s in range(total + 1)]
    warm = warmup_steps(total, prop)
    assert max(rates) == 1.0 and rates[warm] == 1.0
    assert all(0.0 <= r <= 1.0 for r in rates)
    if warm > 0:
        assert rates[0] == 0.0
    if warm < total:
        assert rates[-1] == 0.0
    # continuity: consecutive steps never jump by more than one ramp increment
    slope = 1.0 / max(1, min(warm or total, total - warm or total))
    assert all(abs(a - b) <= slope + 1e-12 for a, b in zip(rates, rates[1:]))


# -- discriminative rates ------------------------------------------------------


def test_layer_lrs_examples():
    rates = layer_lrs(2e-5, 0.87, 4)
    assert rates["head"] == 2e-5
    assert math.isclose(rates["layer.3"], 1.74e-5, rel_tol=1e-12)
    order = ["head", "layer.3", "layer.2", "layer.1", "layer.0", "embeddings"]
    for k, name in enumerate(order):
        assert math.isclose(rates[name], 2e-5 * 0.87 ** k, rel_tol=1e-12)
    assert all(v == 1e-3 for v in layer_lrs(1e-3, 1.0, 3).values())
    with pytest.raises(ContractError):
        layer_lrs(1.0, 0.5, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 0.999))
def test_layer_lrs_strictly_decreasing(n, rate):
    rates = layer_lrs(1.0, rate, n)
    seq = [rates["head"]] + [rates[f"layer.{i}"] for i in reversed(range(n))] + [rates["embeddings"]]
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert max(rates, key=rates.get) == "head"


def test_param_groups_and_decay():
    assert param_group("embeddings.word") == "embeddings"
    assert param_group("layer.3.ffn.in.weight") == "layer.3"
    assert param_group("pooler.weight") == param_group("head.bias") == param_group("mlm.decoder.weight") == "head"
    assert uses_weight_decay("layer.0.attn.query.weight")
    assert not uses_weight_decay("layer.0.attn.query.bias")
    assert not uses_weight_decay("embeddings.ln.gamma") and not uses_weight_decay("mlm.ln.beta")


# -- optimiser -----------------------------------------------------------------


def scalar_params(value=0.0, name="w"):
    return {name: Tensor(np.array([value], dtype=np.float64), requires_grad=True)}


def test_adam_scalar_oracle():
    params = scalar_params()
    state = OptimizerState.zeros_like(params)
    cfg = TrainConfig(weight_decay=0.0, max_grad_norm=1e9)
    adam_step(params, {"w": np.array([1.0])}, state, 1.0, cfg)
    expected = 0.1 / (math.sqrt(0.001) + 1e-6)
    assert abs(-params["w"].data[0] - expected) < 1e-6
    assert state.step == 1


def test_adam_bias_correction_flag():
    params = scalar_params()
    state = OptimizerState.zeros_like(params)
    adam_step(params, {"w": np.array([1.0])}, state, 1.0, TrainConfig(weight_decay=0.0, bias_correction=True))
    assert abs(params["w"].data[0] + 1.0 / (1.0 + 1e-6)) < 1e-9


def test_adam_lr_zero_is_bitwise_noop():
    rng = np.random.default_rng(0)
    params = {"a.weight": Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)}
    before = params["a.weight"].data.copy()
    state = OptimizerState.zeros_like(params)
    adam_step(params, {"a.weight": rng.normal(size=(3, 4)).astype(np.float32)}, state, 0.0, TrainConfig())
    assert params["a.weight"].data.tobytes() == before.tobytes()


def test_adam_zero_gradient_only_decays():
    params = {"w": Tensor(np.array([2.0]), requires_grad=True), "b.bias": Tensor(np.array([2.0]), requires_grad=True)}
    state = OptimizerState.zeros_like(params)
    adam_step(params, {"w": np.zeros(1), "b.bias": np.zeros(1)}, state, 0.1, TrainConfig(weight_decay=0.01))
    assert params["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, abs=1e-15)
    assert params["b.bias"].data[0] == 2.0


def test_adam_identical_params_identical_updates():
    params = {"x": Tensor(np.array([0.3, 0.3])), "y": Tensor(np.array([0.3, 0.3]))}
    state = OptimizerState.zeros_like(params)
    g = np.array([0.2, -0.7])
    for _ in range(3):
        adam_step(params, {"x": g, "y": g}, state, 0.01, TrainConfig())
    assert params["x"].data.tobytes() == params["y"].data.tobytes()


def test_adam_group_scales_and_shape_check():
    params = {**scalar_params(name="a"), **scalar_params(name="b")}
    state = OptimizerState.zeros_like(params)
    cfg = TrainConfig(weight_decay=0.0)
    adam_step(params, {"a": np.array([1.0]), "b": np.array([1.0])}, state, 1.0, cfg, {"a": 1.0, "b": 0.5})
    assert params["b"].data[0] == pytest.approx(params["a"].data[0] / 2)
    with pytest.raises(DimensionError):
        adam_step(params, {"a": np.zeros(2)}, state, 1.0, cfg)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same["a"] is grads["a"]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_proportion=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(discrimination_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig().adam_betas == (0.9, 0.999)


# -- fine-tuning ---------------------------------------------------------------


def labeled_subset():
    return toy_data.labeled_examples()[::3]


def test_finetune_history_and_log(tmp_path, toy_vocab):
    log = MetricsLog(tmp_path / "metrics.jsonl")
    cfg = TrainConfig(base_lr=1e-3, epochs=2, batch_size=4, max_seq_len=16)
    val = toy_data.labeled_examples()[1::10]
    result = finetune(init_model(small_config(toy_vocab), 0), labeled_subset(), toy_vocab, cfg,
                      val_examples=val, log=log, snapshot_dir=tmp_path / "snaps")
    assert [r["epoch"] for r in result.history] == [1, 2]
    assert {"train_loss", "train_accuracy", "val_loss", "val_accuracy", "train_running_loss"} <= set(result.history[0])
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 4
    assert set(lines[0]) == {"epoch", "split", "loss", "metric_name", "metric_value"}
    assert {x["split"] for x in lines} == {"train", "val"}
    assert sorted(p.name for p in (tmp_path / "snaps").iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    assert result.model.config.dropout_prob == small_config(toy_vocab).dropout_prob


def test_finetune_zero_epochs_is_identity(toy_vocab):
    model = init_model(small_config(toy_vocab), 0)
    result = finetune(model, labeled_subset(), toy_vocab, TrainConfig(epochs=0, max_seq_len=16))
    assert result.history == []
    for k, t in model.params.items():
        assert result.model.params[k].data.tobytes() == t.data.tobytes()


def test_finetune_task_mismatch(toy_vocab):
    model = init_model(small_config(toy_vocab), 0)
    with pytest.raises(ContractError):
        finetune(model, toy_data.scored_examples(), toy_vocab, TrainConfig(epochs=1), task="classification")
    with pytest.raises(ContractError):
        finetune(model, labeled_subset(), toy_vocab, TrainConfig(epochs=1), task="regression")


def test_finetune_regression_reduces_mse(toy_vocab):
    model = init_model(small_config(toy_vocab, task="regression"), 0)
    cfg = TrainConfig(base_lr=1e-3, epochs=30, batch_size=10, max_seq_len=16, dropout=0.0)
    result = finetune(model, toy_data.scored_examples(), toy_vocab, cfg)
    assert result.history[-1]["train_mse"] < result.history[0]["train_mse"] / 5


def test_finetune_is_deterministic(toy_vocab):
    model = init_model(small_config(toy_vocab), 0)
    cfg = TrainConfig(base_lr=1e-3, epochs=2, batch_size=4, max_seq_len=16)
    a = finetune(model, labeled_subset(), toy_vocab, cfg)
    b = finetune(model, labeled_subset(), toy_vocab, cfg)
    assert a.history == b.history
    for k, t in a.model.params.items():
        assert b.model.params[k].data.tobytes() == t.data.tobytes()


def test_gradient_accumulation_matches_large_batch(toy_vocab):
    examples = toy_data.labeled_examples()[:24]
    model = init_model(small_config(toy_vocab, dropout_prob=0.0, attention_dropout_prob=0.0), 1)
    common = dict(base_lr=1e-3, epochs=3, dropout=0.0, shuffle=False, max_seq_len=16)
    big = finetune(model, examples, toy_vocab, TrainConfig(batch_size=24, **common)).model
    # unequal micro-batches (10, 10, 4) per step still reproduce the full-batch gradient
    small = finetune(model, examples, toy_vocab, TrainConfig(batch_size=10, grad_accumulation_steps=3, **common)).model
    diff = max(float(np.max(np.abs(big.params[k].data - small.params[k].data))) for k in model.params)
    assert diff < 1e-5


def test_evaluate_report(toy_vocab):
    model = init_model(small_config(toy_vocab), 0)
    loss, report, logits = evaluate(model, labeled_subset(), toy_vocab, 16, batch_size=3)
    assert logits.shape == (10, 3)
    assert report.count == 10
    assert report.mean_ce_loss == pytest.approx(loss, rel=1e-5)


# -- pretraining ---------------------------------------------------------------


def test_pretrain_history_checkpoints_and_determinism(tmp_path, toy_vocab):
    model = init_model(small_config(toy_vocab, max_position=32), 0)
    cfg = TrainConfig(base_lr=1e-3, epochs=2, batch_size=8, max_seq_len=32)
    a = pretrain(model, toy_data.CORPUS_DOCUMENTS, toy_vocab, MaskingConfig(), cfg, checkpoint_dir=tmp_path)
    b = pretrain(model, toy_data.CORPUS_DOCUMENTS, toy_vocab, MaskingConfig(), cfg)
    assert len(a.history) == 2 and a.history == b.history
    assert {"mlm_loss", "nsp_loss", "mlm_accuracy", "nsp_accuracy"} <= set(a.history[0])
    loaded, _ = load_checkpoint(tmp_path / "pretrain_epoch_002.ckpt")
    for k, t in a.model.params.items():
        assert loaded.params[k].data.tobytes() == t.data.tobytes()


def test_pretrain_rejects_vocab_mismatch(toy_vocab):
    model = init_model(small_config(toy_vocab, vocab_size=50), 0)
    with pytest.raises(ConfigError):
        pretrain(model, toy_data.CORPUS_DOCUMENTS, toy_vocab, MaskingConfig(), TrainConfig(epochs=1))


def masked_lm_oracle(model, records):
    """Mean masked-token cross-entropy computed in float64 without the autodiff ops."""
    total, count = 0.0, 0
    for rec in records:
        out = model.forward_arrays(rec["input_ids"][None], rec["attention_mask"][None], rec["segment_ids"][None])
        positions = np.flatnonzero(rec["mlm_targets"] != IGNORE_INDEX)
        logits = model.mlm_logits(Tensor(out.sequence.data[0]), positions).data.astype(np.float64)
        shifted = logits - logits.max(-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        total += -logp[np.arange(len(positions)), rec["mlm_targets"][positions]].sum()
        count += len(positions)
    return total / count


def test_mlm_loss_matches_oracle(toy_vocab):
    model = init_model(small_config(toy_vocab), 2)
    records = mlm_eval_records(toy_data.CORPUS_DOCUMENTS[2], toy_vocab, MaskingConfig(mask_percent=40), 16, seed=1)
    assert mlm_loss(model, records) == pytest.approx(masked_lm_oracle(model, records), rel=1e-5)


def test_mlm_loss_needs_masked_positions(toy_vocab):
    records = mlm_eval_records(["a b"], toy_vocab, MaskingConfig(mask_percent=0), 16, seed=1)
    with pytest.raises(ContractError):
        mlm_loss(init_model(small_config(toy_vocab), 2), records)


# -- experiments ---------------------------------------------------------------


def test_forgetting_probe(toy_vocab):
    model = init_model(small_config(toy_vocab), 0)
    cfg = TrainConfig(base_lr=1e-3, epochs=2, batch_size=10, max_seq_len=16)
    result = finetune(model, labeled_subset(), toy_vocab, cfg, keep_snapshots=True)
    sentences = toy_data.CORPUS_DOCUMENTS[3]
    masking = MaskingConfig(mask_percent=30)
    rows = forgetting_probe(result.snapshots, sentences, toy_vocab, masking, seed=5, max_seq_len=16)
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    direct = mlm_loss(model, mlm_eval_records(sentences, toy_vocab, masking, 16, seed=5))
    assert rows[0]["mlm_loss"] == direct
    same = forgetting_probe([model, model], sentences, toy_vocab, masking, seed=5, max_seq_len=16)
    assert same[0]["mlm_loss"] == same[1]["mlm_loss"]


def test_depth_sweep_single_depth_matches_finetune(toy_vocab):
    base = small_config(toy_vocab)
    cfg = TrainConfig(base_lr=1e-3, epochs=1, batch_size=10, max_seq_len=16)
    (row,) = depth_sweep(base, [2], labeled_subset(), toy_vocab, cfg)
    direct = finetune(init_model(base, cfg.seed), labeled_subset(), toy_vocab, cfg).history[-1]
    assert row == {"depth": 2, "loss": direct["train_loss"], "accuracy": direct["train_accuracy"]}
    with pytest.raises(ConfigError):
        depth_sweep(base, [0], labeled_subset(), toy_vocab, cfg)


def test_write_table(tmp_path):
    rows = [{"depth": 1, "loss": 0.5, "accuracy": 1.0}, {"depth": 2, "loss": 0.25, "accuracy": 0.5}]
    write_table(rows, tmp_path / "t.tsv", tmp_path / "t.json")
    assert (tmp_path / "t.tsv").read_text() == "depth\tloss\taccuracy\n1\t0.5\t1.0\n2\t0.25\t0.5\n"
    assert json.loads((tmp_path / "t.json").read_text()) == rows
