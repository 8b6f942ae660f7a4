"""Post-layer-norm bidirectional transformer encoder with pretraining and task heads.

Parameters live in a flat ordered ``dict[str, Tensor]``.  Weight matrices are
stored ``[in, out]`` so every projection is ``x @ W + b``.  Heads:

* ``mlm.*``  dense + GELU + layer norm transform, then an untied vocab projection
* ``nsp.*``  2-way is-next / not-next classifier over the pooled state
* ``head.*`` task head, 3 logits ordered ``[positive, negative, neutral]`` for
  classification or a single score for regression
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ModeError
from .numerics import Tensor

LABELS = ("positive", "negative", "neutral")
TASKS = ("classification", "regression")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.  Defaults are the desk-scale configuration."""

    num_layers: int = 4
    num_heads: int = 4
    hidden_size: int = 128
    intermediate_size: int = 512
    vocab_size: int = 8192
    max_position: int = 64
    type_vocab_size: int = 2
    dropout_prob: float = 0.12
    attention_dropout_prob: float = 0.1
    initializer_range: float = 0.02
    layer_norm_eps: float = 1e-12
    use_pooler: bool = True
    task: str = "classification"

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("num_layers", "num_heads", "hidden_size", "intermediate_size",
                     "vocab_size", "max_position", "type_vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                out.append(f"{name} must be a positive integer (got {value!r})")
        if not out and self.hidden_size % self.num_heads:
            out.append(f"hidden_size ({self.hidden_size}) must be divisible by num_heads ({self.num_heads})")
        for name in ("dropout_prob", "attention_dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                out.append(f"{name} must lie in [0, 1) (got {p!r})")
        if not self.initializer_range > 0:
            out.append(f"initializer_range must be positive (got {self.initializer_range!r})")
        if not self.layer_norm_eps > 0:
            out.append(f"layer_norm_eps must be positive (got {self.layer_norm_eps!r})")
        if self.task not in TASKS:
            out.append(f"task must be one of {TASKS} (got {self.task!r})")
        return out

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def num_outputs(self) -> int:
        return len(LABELS) if self.task == "classification" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


class EncoderOutput(NamedTuple):
    sequence: Tensor  # [batch, seq, hidden]
    pooled: Tensor  # [batch, hidden]
    attentions: list[np.ndarray]  # per layer [batch, live_heads, seq, seq]


def _weight_kind(name: str) -> str:
    if name.endswith(".gamma"):
        return "ones"
    if name.endswith(".bias") or name.endswith(".beta"):
        return "zeros"
    return "normal"


def parameter_shapes(config: ModelConfig, live_heads: list[list[int]] | None = None) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list for ``config``, accounting for pruned heads."""
    h, i, v = config.hidden_size, config.intermediate_size, config.vocab_size
    shapes = [
        ("embeddings.word", (v, h)),
        ("embeddings.position", (config.max_position, h)),
        ("embeddings.segment", (config.type_vocab_size, h)),
        ("embeddings.ln.gamma", (h,)),
        ("embeddings.ln.beta", (h,)),
    ]
    for layer in range(config.num_layers):
        n_live = config.num_heads if live_heads is None else len(live_heads[layer])
        a = n_live * config.head_size
        p = f"layer.{layer}."
        shapes += [
            (p + "attn.query.weight", (h, a)), (p + "attn.query.bias", (a,)),
            (p + "attn.key.weight", (h, a)), (p + "attn.key.bias", (a,)),
            (p + "attn.value.weight", (h, a)), (p + "attn.value.bias", (a,)),
            (p + "attn.output.weight", (a, h)), (p + "attn.output.bias", (h,)),
            (p + "attn.ln.gamma", (h,)), (p + "attn.ln.beta", (h,)),
            (p + "ffn.in.weight", (h, i)), (p + "ffn.in.bias", (i,)),
            (p + "ffn.out.weight", (i, h)), (p + "ffn.out.bias", (h,)),
            (p + "ffn.ln.gamma", (h,)), (p + "ffn.ln.beta", (h,)),
        ]
    shapes += [
        ("pooler.weight", (h, h)), ("pooler.bias", (h,)),
        ("mlm.transform.weight", (h, h)), ("mlm.transform.bias", (h,)),
        ("mlm.ln.gamma", (h,)), ("mlm.ln.beta", (h,)),
        ("mlm.decoder.weight", (h, v)), ("mlm.decoder.bias", (v,)),
        ("nsp.weight", (h, 2)), ("nsp.bias", (2,)),
        ("head.weight", (h, config.num_outputs)), ("head.bias", (config.num_outputs,)),
    ]
    return shapes


def _init_array(kind: str, shape, rng: np.random.Generator, std: float) -> np.ndarray:
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class EncoderModel:
    """Parameter set plus the forward computations that use it.

    ``live_heads[l]`` lists the original indices of the attention heads still
    present in layer ``l``; the Q/K/V/output projections hold exactly those
    heads' slices, in that order.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], live_heads: list[list[int]] | None = None):
        self.config = config
        self.live_heads = (
            [list(range(config.num_heads)) for _ in range(config.num_layers)]
            if live_heads is None else [list(hs) for hs in live_heads]
        )
        expected = parameter_shapes(config, self.live_heads)
        names = [n for n, _ in expected]
        if list(params) != names:
            missing = sorted(set(names) - set(params))
            extra = sorted(set(params) - set(names))
            raise ConfigError(f"parameter set does not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")
        for layer, hs in enumerate(self.live_heads):
            if not hs:
                raise ConfigError(f"layer {layer} has no live attention heads")
        self.params = params

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "EncoderModel":
        rng = nx.make_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config):
            params[name] = Tensor(_init_array(_weight_kind(name), shape, rng, config.initializer_range), requires_grad=True)
        return cls(config, params)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: t.copy() for k, t in self.params.items()}, self.live_heads)

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, {k: t.astype(dtype) for k, t in self.params.items()}, self.live_heads)

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))

    def with_config(self, **changes) -> "EncoderModel":
        """Same parameters under a config differing only in non-structural fields (e.g. dropout)."""
        structural = {"num_layers", "num_heads", "hidden_size", "intermediate_size", "vocab_size",
                      "max_position", "type_vocab_size", "task"}
        bad = structural & set(changes)
        if bad:
            raise ConfigError(f"cannot change structural fields {sorted(bad)} in place")
        return EncoderModel(dataclasses.replace(self.config, **changes), self.params, self.live_heads)

    def with_task(self, task: str, seed: int) -> "EncoderModel":
        """Copy with a freshly initialised task head for ``task``."""
        if task == self.config.task:
            return self.copy()
        config = dataclasses.replace(self.config, task=task)
        rng = nx.make_rng(seed, stream=7)
        params = {k: t.copy() for k, t in self.params.items()}
        n = config.num_outputs
        params["head.weight"] = Tensor(
            _init_array("normal", (config.hidden_size, n), rng, config.initializer_range), requires_grad=True)
        params["head.bias"] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
        return EncoderModel(config, params, self.live_heads)

    # -- forward --------------------------------------------------------------

    def forward(self, features, training: bool = False, rng: np.random.Generator | None = None) -> EncoderOutput:
        """Encode a batch.

        ``features`` is anything with ``input_ids``, ``attention_mask`` and
        ``segment_ids`` attributes; 1-D sequences are treated as a batch of one.
        """
        ids, mask, segments = _feature_arrays(features)
        return self.forward_arrays(ids, mask, segments, training, rng)

    def forward_arrays(self, input_ids, attention_mask, segment_ids, training=False, rng=None) -> EncoderOutput:
        cfg = self.config
        p = self.params
        b, s = input_ids.shape
        if s > cfg.max_position:
            raise ContractError(f"sequence length {s} exceeds max_position {cfg.max_position}")
        if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        dtype = p["embeddings.word"].dtype

        x = nx.embedding(p["embeddings.word"], input_ids)
        x = nx.add(x, nx.embedding(p["embeddings.position"], np.arange(s)))
        x = nx.add(x, nx.embedding(p["embeddings.segment"], segment_ids))
        x = nx.layer_norm(x, p["embeddings.ln.gamma"], p["embeddings.ln.beta"], cfg.layer_norm_eps)
        x = nx.dropout(x, cfg.dropout_prob, training, rng)

        key_mask = np.where(np.asarray(attention_mask)[:, None, None, :] > 0, 0.0, -np.inf).astype(dtype)
        attentions = []
        for layer in range(cfg.num_layers):
            x, probs = self._layer(layer, x, key_mask, training, rng)
            attentions.append(probs)

        if cfg.use_pooler:
            cls_state = nx.take(nx.reshape(x, (b * s, cfg.hidden_size)), np.arange(b) * s)
            pooled = nx.tanh(nx.linear(cls_state, p["pooler.weight"], p["pooler.bias"]))
        else:
            pooled = nx.take(nx.reshape(x, (b * s, cfg.hidden_size)), np.arange(b) * s)
        return EncoderOutput(x, pooled, attentions)

    def _layer(self, layer, x, key_mask, training, rng):
        cfg = self.config
        p = self.params
        pre = f"layer.{layer}."
        b, s, h = x.shape
        n, d = len(self.live_heads[layer]), cfg.head_size

        def heads(t):
            return nx.transpose(nx.reshape(t, (b, s, n, d)), (0, 2, 1, 3))

        q = heads(nx.linear(x, p[pre + "attn.query.weight"], p[pre + "attn.query.bias"]))
        k = nx.transpose(
            nx.reshape(nx.linear(x, p[pre + "attn.key.weight"], p[pre + "attn.key.bias"]), (b, s, n, d)),
            (0, 2, 3, 1),
        )
        v = heads(nx.linear(x, p[pre + "attn.value.weight"], p[pre + "attn.value.bias"]))

        scores = nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(d))
        probs = nx.softmax(nx.add_constant(scores, key_mask), axis=-1)
        attn = nx.dropout(probs, cfg.attention_dropout_prob, training, rng)
        context = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, s, n * d))

        out = nx.linear(context, p[pre + "attn.output.weight"], p[pre + "attn.output.bias"])
        out = nx.dropout(out, cfg.dropout_prob, training, rng)
        x = nx.layer_norm(nx.add(x, out), p[pre + "attn.ln.gamma"], p[pre + "attn.ln.beta"], cfg.layer_norm_eps)

        hmid = nx.gelu(nx.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"]))
        out = nx.linear(hmid, p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"])
        out = nx.dropout(out, cfg.dropout_prob, training, rng)
        x = nx.layer_norm(nx.add(x, out), p[pre + "ffn.ln.gamma"], p[pre + "ffn.ln.beta"], cfg.layer_norm_eps)
        return x, probs.data

    # -- heads ----------------------------------------------------------------

    def mlm_logits(self, sequence: Tensor, positions) -> Tensor:
        """Vocabulary logits at selected positions.

        For a ``[batch, seq, hidden]`` state tensor ``positions`` is an ``[n, 2]``
        array of ``(batch, position)`` pairs; for ``[seq, hidden]`` it is a
        1-D index array.
        """
        cfg = self.config
        p = self.params
        pos = np.asarray(positions, dtype=np.int64)
        if sequence.data.ndim == 2:
            s = sequence.shape[0]
            if pos.size and (pos.min() < 0 or pos.max() >= s):
                raise IndexError(f"MLM position out of range [0, {s})")
            flat_states, flat = sequence, pos.reshape(-1)
        else:
            b, s, h = sequence.shape
            pos = pos.reshape(-1, 2)
            if pos.size and (pos[:, 0].min() < 0 or pos[:, 0].max() >= b or pos[:, 1].min() < 0 or pos[:, 1].max() >= s):
                raise IndexError(f"MLM position out of range for states of shape {sequence.shape}")
            flat_states = nx.reshape(sequence, (b * s, h))
            flat = pos[:, 0] * s + pos[:, 1]
        if flat.size == 0:
            return Tensor(np.zeros((0, cfg.vocab_size), dtype=sequence.dtype), dtype=sequence.dtype)
        x = nx.take(flat_states, flat)
        x = nx.gelu(nx.linear(x, p["mlm.transform.weight"], p["mlm.transform.bias"]))
        x = nx.layer_norm(x, p["mlm.ln.gamma"], p["mlm.ln.beta"], cfg.layer_norm_eps)
        return nx.linear(x, p["mlm.decoder.weight"], p["mlm.decoder.bias"])

    def nsp_logits(self, pooled: Tensor) -> Tensor:
        return nx.linear(pooled, self.params["nsp.weight"], self.params["nsp.bias"])

    def classify(self, pooled: Tensor, training: bool = False, rng=None) -> Tensor:
        """Logits ``[..., 3]`` in ``LABELS`` order."""
        if self.config.task != "classification":
            raise ModeError("classify() called on a model with a regression head")
        x = nx.dropout(pooled, self.config.dropout_prob, training, rng)
        return nx.linear(x, self.params["head.weight"], self.params["head.bias"])

    def regress(self, pooled: Tensor, training: bool = False, rng=None) -> Tensor:
        """One real-valued sentiment score per pooled row."""
        if self.config.task != "regression":
            raise ModeError("regress() called on a model with a classification head")
        x = nx.dropout(pooled, self.config.dropout_prob, training, rng)
        out = nx.linear(x, self.params["head.weight"], self.params["head.bias"])
        return nx.reshape(out, out.shape[:-1])

    # -- lifecycle ------------------------------------------------------------

    def resize_embeddings(self, new_vocab_size: int, seed: int) -> "EncoderModel":
        """Copy with word embeddings and MLM decoder resized to ``new_vocab_size``.

        Surviving rows are kept bit-exactly; new rows are drawn from the init
        distribution and new decoder biases start at zero.
        """
        from .tokenizer import SPECIAL_TOKENS

        if new_vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError(f"vocabulary must keep the {len(SPECIAL_TOKENS)} special tokens")
        old = self.config.vocab_size
        if new_vocab_size == old:
            return self.copy()
        config = dataclasses.replace(self.config, vocab_size=new_vocab_size)
        params = {k: t.copy() for k, t in self.params.items()}
        keep = min(old, new_vocab_size)
        rng = nx.make_rng(seed, stream=11)
        h = config.hidden_size
        dtype = self.params["embeddings.word"].dtype

        word = np.empty((new_vocab_size, h), dtype=dtype)
        word[:keep] = self.params["embeddings.word"].data[:keep]
        dec = np.empty((h, new_vocab_size), dtype=dtype)
        dec[:, :keep] = self.params["mlm.decoder.weight"].data[:, :keep]
        bias = np.zeros(new_vocab_size, dtype=dtype)
        bias[:keep] = self.params["mlm.decoder.bias"].data[:keep]
        if new_vocab_size > old:
            extra = new_vocab_size - old
            word[old:] = rng.normal(0.0, config.initializer_range, size=(extra, h))
            dec[:, old:] = rng.normal(0.0, config.initializer_range, size=(h, extra))
        params["embeddings.word"] = Tensor(word, requires_grad=True, dtype=dtype)
        params["mlm.decoder.weight"] = Tensor(dec, requires_grad=True, dtype=dtype)
        params["mlm.decoder.bias"] = Tensor(bias, requires_grad=True, dtype=dtype)
        return EncoderModel(config, params, self.live_heads)

    def prune_heads(self, spec: Mapping[int, Iterable[int]]) -> "EncoderModel":
        """Copy with the given original head indices removed per layer."""
        live = [list(hs) for hs in self.live_heads]
        params = {k: t.copy() for k, t in self.params.items()}
        d = self.config.head_size
        for layer, heads in sorted(spec.items()):
            if not 0 <= layer < self.config.num_layers:
                raise ConfigError(f"layer {layer} does not exist")
            heads = set(heads)
            bad = [hd for hd in heads if not 0 <= hd < self.config.num_heads]
            if bad:
                raise ConfigError(f"head indices {sorted(bad)} out of range for layer {layer}")
            remaining = [hd for hd in live[layer] if hd not in heads]
            if not remaining:
                raise ConfigError(f"pruning {sorted(heads)} would remove every head of layer {layer}")
            keep_cols = np.concatenate([
                np.arange(slot * d, (slot + 1) * d)
                for slot, hd in enumerate(live[layer]) if hd not in heads
            ])
            pre = f"layer.{layer}.attn."
            # Column gathers come back non-contiguous; BLAS then takes a different summation
            # path and a save/load round trip would no longer reproduce outputs bit for bit.
            for proj in ("query", "key", "value"):
                w, b = params[pre + proj + ".weight"], params[pre + proj + ".bias"]
                params[pre + proj + ".weight"] = Tensor(np.ascontiguousarray(w.data[:, keep_cols]), True, dtype=w.dtype)
                params[pre + proj + ".bias"] = Tensor(b.data[keep_cols], True, dtype=b.dtype)
            wo = params[pre + "output.weight"]
            params[pre + "output.weight"] = Tensor(wo.data[keep_cols, :], True, dtype=wo.dtype)
            live[layer] = remaining
        return EncoderModel(self.config, params, live)


def init_model(config: ModelConfig, seed: int) -> EncoderModel:
    return EncoderModel.init(config, seed)


def _feature_arrays(features):
    ids = np.asarray(features.input_ids, dtype=np.int64)
    mask = np.asarray(features.attention_mask, dtype=np.int64)
    seg = np.asarray(features.segment_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids, mask, seg = ids[None], mask[None], seg[None]
    if not ids.shape == mask.shape == seg.shape:
        raise ContractError(f"feature arrays differ in shape: {ids.shape}, {mask.shape}, {seg.shape}")
    return ids, mask, seg
